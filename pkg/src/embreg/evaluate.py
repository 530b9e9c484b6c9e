"""Landmark-distance evaluation and per-iteration run reports.

MED is computed in the fixed volume's voxel space: per-axis values are means
of absolute per-axis deltas, the total is the mean Euclidean norm; standard
deviations accompany every mean. Reports aggregate a pipeline run directory
into one CSV row per iteration plus an initial (unregistered) row.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ToolkitError
from .rigid import RigidTransform
from .volume import LandmarkSet

REPORT_COLUMNS = (
    "iteration",
    "med_x",
    "med_x_std",
    "med_y",
    "med_y_std",
    "med_z",
    "med_z_std",
    "med",
    "med_std",
    "n_pairs",
)


class EvalError(ToolkitError):
    """Evaluation inputs unusable (e.g. no common landmarks)."""


@dataclass
class MedReport:
    """Landmark distances in voxels of the fixed volume."""

    names: list[str]
    deltas_voxels: np.ndarray  # (N, 3) signed per-axis deltas
    med_x: float
    med_x_std: float
    med_y: float
    med_y_std: float
    med_z: float
    med_z_std: float
    med: float
    med_std: float
    n_landmarks: int
    n_missing: int
    units: str = "voxels"

    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.deltas_voxels, axis=1)


def med(
    landmarks_fixed: LandmarkSet,
    landmarks_moved: LandmarkSet,
    voxel_spacing,
) -> MedReport:
    """Mean Euclidean distance of name-matched landmarks, per axis and total.

    Landmarks present in only one set are excluded and counted in
    ``n_missing``; no common landmarks is an error.
    """
    fixed = landmarks_fixed.as_dict()
    moved = landmarks_moved.as_dict()
    common = sorted(set(fixed) & set(moved))
    n_missing = len(set(fixed) ^ set(moved))
    if not common:
        raise EvalError("no common landmark names between the two sets")
    spacing = np.asarray(voxel_spacing, dtype=float)
    deltas = np.asarray([(moved[n] - fixed[n]) / spacing for n in common])
    absd = np.abs(deltas)
    norms = np.linalg.norm(deltas, axis=1)
    return MedReport(
        names=list(common),
        deltas_voxels=deltas,
        med_x=float(absd[:, 0].mean()),
        med_x_std=float(absd[:, 0].std()),
        med_y=float(absd[:, 1].mean()),
        med_y_std=float(absd[:, 1].std()),
        med_z=float(absd[:, 2].mean()),
        med_z_std=float(absd[:, 2].std()),
        med=float(norms.mean()),
        med_std=float(norms.std()),
        n_landmarks=len(common),
        n_missing=n_missing,
    )


def apply_to_landmarks(xf: RigidTransform, lm: LandmarkSet) -> LandmarkSet:
    """Map every landmark's world point through ``xf``, names preserved."""
    points = []
    for name, w in lm.points:
        mapped = xf.apply(np.asarray(w, dtype=float))
        points.append((name, (float(mapped[0]), float(mapped[1]), float(mapped[2]))))
    return LandmarkSet(points=points)


def _aggregate_rows(per_iteration: dict[str, list[dict]]) -> list[dict]:
    """One report row per iteration key from per-pair metrics payloads."""

    def sort_key(k: str):
        return (0, 0) if k == "initial" else (1, int(k))

    rows = []
    for key in sorted(per_iteration, key=sort_key):
        deltas = []
        n_pairs = 0
        for payload in per_iteration[key]:
            d = payload.get("deltas_voxels")
            if d:
                deltas.append(np.asarray(d, dtype=float))
                n_pairs += 1
        if not deltas:
            continue
        all_d = np.concatenate(deltas, axis=0)
        absd = np.abs(all_d)
        norms = np.linalg.norm(all_d, axis=1)
        rows.append(
            {
                "iteration": key,
                "med_x": float(absd[:, 0].mean()),
                "med_x_std": float(absd[:, 0].std()),
                "med_y": float(absd[:, 1].mean()),
                "med_y_std": float(absd[:, 1].std()),
                "med_z": float(absd[:, 2].mean()),
                "med_z_std": float(absd[:, 2].std()),
                "med": float(norms.mean()),
                "med_std": float(norms.std()),
                "n_pairs": n_pairs,
            }
        )
    return rows


def write_report_csv(rows: list[dict], path) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(REPORT_COLUMNS)
        for row in rows:
            writer.writerow(
                [row["iteration"]]
                + [repr(float(row[c])) for c in REPORT_COLUMNS[1:-1]]
                + [int(row["n_pairs"])]
            )


def collect_run_metrics(run_dir) -> tuple[dict[str, list[dict]], list[str]]:
    """Gather per-pair metrics.json files; returns (metrics, problem notes)."""
    run = Path(run_dir)
    per_iteration: dict[str, list[dict]] = {}
    problems: list[str] = []
    buckets = []
    initial = run / "initial"
    if initial.is_dir():
        buckets.append(("initial", initial))
    for it_dir in sorted(run.glob("iter_*")):
        buckets.append((it_dir.name.removeprefix("iter_"), it_dir))
    if not buckets:
        problems.append(f"no initial/ or iter_*/ directories under {run}")
    for key, bucket in buckets:
        payloads = []
        pair_dirs = sorted(bucket.glob("pair_*"))
        if not pair_dirs:
            problems.append(f"{bucket.name}: no pair_* directories")
        for pair_dir in pair_dirs:
            metrics_path = pair_dir / "metrics.json"
            if not metrics_path.exists():
                problems.append(f"{bucket.name}/{pair_dir.name}: missing metrics.json")
                continue
            try:
                payloads.append(json.loads(metrics_path.read_text(encoding="utf-8")))
            except (json.JSONDecodeError, UnicodeDecodeError) as exc:
                problems.append(f"{bucket.name}/{pair_dir.name}: corrupt metrics.json ({exc})")
        per_iteration[key] = payloads
    return per_iteration, problems


def report(run_dir, out_path=None) -> tuple[list[dict], list[str]]:
    """Aggregate a run directory into report.csv rows.

    Returns (rows, problems); a nonempty problem list means the report is
    partial and the CLI exits nonzero.
    """
    per_iteration, problems = collect_run_metrics(run_dir)
    rows = _aggregate_rows(per_iteration)
    if out_path is None:
        out_path = Path(run_dir) / "report.csv"
    write_report_csv(rows, out_path)
    return rows, problems
