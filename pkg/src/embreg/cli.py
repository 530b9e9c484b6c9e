"""Command-line surface tying the toolkit together.

Exit codes: 0 success, 1 usage error, 2 data error. ``--json`` switches
summaries to machine-readable output.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from .augment import AugmentConfig, augment
from .encoder import load_checkpoint, save_checkpoint
from .errors import ToolkitError
from .evaluate import REPORT_COLUMNS, med, report
from .matching import load_correspondences
from .phantom import load_spec, write_phantom_pair
from .pipeline import (
    PipelineConfig,
    inference,
    load_pipeline_config,
    run_pipeline,
)
from .rigid import fit_rigid, fit_rigid_robust, save_transform
from .training import train_self_supervised
from .volume import LandmarkSet, VoxelGrid, load_landmarks, load_volume, normalize_unit, save_volume


@click.group()
def cli():
    """Cross-modality volume registration via voxel embeddings."""


# -- phantom ----------------------------------------------------------------


@cli.group()
def phantom():
    """Synthetic paired-modality phantom generation."""


@phantom.command("gen")
@click.option("--spec", "spec_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", type=int, default=None, help="Override the spec's seed.")
def phantom_gen(spec_path, out_dir, seed):
    """Write vol_a/vol_b containers, landmark CSVs and gt_transform.json."""
    spec = load_spec(spec_path)
    if seed is not None:
        spec.seed = seed
    write_phantom_pair(spec, out_dir)
    click.echo(f"phantom pair written to {out_dir}")


# -- augment ----------------------------------------------------------------


@cli.group("augment")
def augment_group():
    """Appearance-destruction augmentation."""


@augment_group.command("preview")
@click.option("--in", "in_path", required=True, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=0)
def augment_preview(in_path, out_path, config_path, seed):
    """Augment one volume container and write the result."""
    grid = load_volume(in_path)
    if config_path is not None:
        cfg = AugmentConfig(**json.loads(Path(config_path).read_text(encoding="utf-8")))
    else:
        cfg = AugmentConfig()
    out = augment(normalize_unit(grid), cfg, rng=np.random.default_rng(seed))
    save_volume(out, out_path)
    click.echo(f"augmented volume written to {out_path}")


# -- training ---------------------------------------------------------------


def _discover_pairs(data_dir: Path):
    """Pair subdirectories holding vol_a/vol_b (or fixed/moving) containers."""
    pairs = []
    for sub in sorted(p for p in data_dir.iterdir() if p.is_dir()):
        fixed_base = next((sub / n for n in ("fixed", "vol_a") if (sub / n).with_suffix(".json").exists()), None)
        moving_base = next((sub / n for n in ("moving", "vol_b") if (sub / n).with_suffix(".json").exists()), None)
        if fixed_base is None or moving_base is None:
            continue
        lm_f = sub / "landmarks_a.csv"
        lm_m = sub / "landmarks_b.csv"
        pairs.append(
            {
                "name": sub.name,
                "fixed": load_volume(fixed_base),
                "moving": load_volume(moving_base),
                "landmarks": (
                    (load_landmarks(lm_f), load_landmarks(lm_m))
                    if lm_f.exists() and lm_m.exists()
                    else None
                ),
            }
        )
    if not pairs:
        raise ToolkitError(f"no volume pairs found under {data_dir}")
    return pairs


@cli.group("train")
def train_group():
    """Embedding training."""


@train_group.command("ss")
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--steps", type=int, default=200)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=0)
def train_ss(data_dir, out_path, steps, config_path, seed):
    """Self-supervised pretraining on every volume found in the data dir."""
    import torch

    from .encoder import build_encoder
    from .volume import resample_isotropic

    cfg = load_pipeline_config(config_path) if config_path else PipelineConfig(seed=seed)
    pairs = _discover_pairs(Path(data_dir))
    volumes = []
    for p in pairs:
        volumes.append(normalize_unit(resample_isotropic(p["fixed"], cfg.resample_mm)))
        volumes.append(normalize_unit(resample_isotropic(p["moving"], cfg.resample_mm)))
    torch.manual_seed(seed)
    encoder = build_encoder(cfg.encoder_cfg, seed=seed)
    encoder, losses = train_self_supervised(
        encoder, volumes, cfg.aug_cfg, cfg.loss_cfg, steps, np.random.default_rng(seed), cfg.train_cfg
    )
    save_checkpoint(encoder, out_path, step_count=steps, loss_history=losses)
    click.echo(f"checkpoint written to {out_path} (final loss {losses[-1]:.3f})" if losses else "no steps run")


# -- pipeline ---------------------------------------------------------------


@cli.group("pipeline")
def pipeline_group():
    """Iterative registration plus retraining."""


@pipeline_group.command("run")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--json", "as_json", is_flag=True, default=False)
def pipeline_run(config_path, data_dir, out_dir, seed, as_json):
    """Run the full iterative loop over every pair in the data directory."""
    cfg = load_pipeline_config(config_path)
    if seed is not None:
        cfg.seed = seed
    pairs = _discover_pairs(Path(data_dir))
    landmarks = [p["landmarks"] for p in pairs]
    if any(lm is None for lm in landmarks):
        landmarks = None
    result = run_pipeline(
        [p["fixed"] for p in pairs],
        [p["moving"] for p in pairs],
        cfg,
        out_dir=out_dir,
        landmarks=landmarks,
    )
    if as_json:
        click.echo(json.dumps({"rows": result.report_rows}, sort_keys=True))
    else:
        for row in result.report_rows:
            click.echo(
                f"iteration {row['iteration']}: MED {row['med']:.3f} ± {row['med_std']:.3f} voxels "
                f"({row['n_pairs']} pairs)"
            )
        click.echo(f"artifacts in {out_dir}")


@cli.command("infer")
@click.option("--ckpt", "ckpt_path", required=True, type=click.Path())
@click.option("--fixed", "fixed_path", required=True, type=click.Path())
@click.option("--moving", "moving_path", required=True, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=0)
@click.option("--json", "as_json", is_flag=True, default=False)
def infer_cmd(ckpt_path, fixed_path, moving_path, out_path, config_path, seed, as_json):
    """One-pass registration with a trained checkpoint."""
    cfg = load_pipeline_config(config_path) if config_path else PipelineConfig(seed=seed)
    encoder, _manifest = load_checkpoint(ckpt_path)
    fixed = load_volume(fixed_path)
    moving = load_volume(moving_path)
    result = inference(encoder, fixed, moving, cfg)
    save_transform(result.transform, out_path)
    summary = {
        "n_correspondences": result.n_correspondences,
        "inlier_fraction": result.inlier_fraction,
        "flagged_low_confidence": result.flagged,
        "out": str(out_path),
    }
    if as_json:
        click.echo(json.dumps(summary, sort_keys=True))
    else:
        click.echo(
            f"transform written to {out_path} "
            f"({result.n_correspondences} matches, inlier fraction {result.inlier_fraction:.2f}"
            + (", LOW CONFIDENCE" if result.flagged else "")
            + ")"
        )


# -- rigid fit ----------------------------------------------------------------


@cli.command("fit-rigid")
@click.option("--corr", "corr_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--robust", is_flag=True, default=False)
@click.option("--seed", type=int, default=0)
@click.option("--json", "as_json", is_flag=True, default=False)
def fit_rigid_cmd(corr_path, out_path, robust, seed, as_json):
    """Least-squares rigid fit of a correspondence CSV."""
    corr = load_correspondences(corr_path)
    result = fit_rigid_robust(corr, seed=seed) if robust else fit_rigid(corr)
    save_transform(result.transform, out_path)
    summary = {
        "residual_sq_mm2": result.residual_sq,
        "n_used": result.n_used,
        "inlier_fraction": result.inlier_fraction,
        "out": str(out_path),
    }
    if as_json:
        click.echo(json.dumps(summary, sort_keys=True))
    else:
        click.echo(f"transform written to {out_path} (residual {result.residual_sq:.3e} mm^2, n={result.n_used})")


# -- evaluation ---------------------------------------------------------------


@cli.group("eval")
def eval_group():
    """Evaluation metrics."""


@eval_group.command("med")
@click.option("--fixed", "fixed_path", required=True, type=click.Path(exists=True))
@click.option("--moved", "moved_path", required=True, type=click.Path(exists=True))
@click.option("--spacing", default="1,1,1", help="Voxel spacing mm, comma-separated.")
@click.option("--seed", type=int, default=0, hidden=True)
@click.option("--json", "as_json", is_flag=True, default=False)
def eval_med(fixed_path, moved_path, spacing, seed, as_json):
    """Mean Euclidean distance between name-matched landmark CSVs."""
    del seed
    try:
        spacing_vals = tuple(float(v) for v in spacing.split(","))
        if len(spacing_vals) != 3:
            raise ValueError
    except ValueError:
        raise click.UsageError(f"--spacing must be three comma-separated numbers, got {spacing!r}")
    rep = med(load_landmarks(fixed_path), load_landmarks(moved_path), spacing_vals)
    if as_json:
        click.echo(
            json.dumps(
                {
                    "med": rep.med,
                    "med_std": rep.med_std,
                    "med_x": rep.med_x,
                    "med_y": rep.med_y,
                    "med_z": rep.med_z,
                    "n_landmarks": rep.n_landmarks,
                    "n_missing": rep.n_missing,
                    "units": rep.units,
                },
                sort_keys=True,
            )
        )
    else:
        click.echo(
            f"MED {rep.med:.3f} ± {rep.med_std:.3f} voxels "
            f"(x {rep.med_x:.3f}, y {rep.med_y:.3f}, z {rep.med_z:.3f}; n={rep.n_landmarks})"
        )


@cli.command("report")
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--json", "as_json", is_flag=True, default=False)
def report_cmd(run_dir, as_json):
    """Aggregate a run directory into report.csv; exit 2 if partial."""
    rows, problems = report(run_dir)
    if as_json:
        click.echo(json.dumps({"rows": rows, "problems": problems}, sort_keys=True))
    else:
        click.echo(",".join(REPORT_COLUMNS))
        for row in rows:
            click.echo(",".join(str(row[c]) for c in REPORT_COLUMNS))
        if problems:
            click.echo("-- problems --")
            for p in problems:
                click.echo(p)
    if problems:
        raise SystemExit(2)


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.UsageError as exc:
        exc.show()
        return 1
    except click.Abort:
        return 1
    except click.ClickException as exc:
        exc.show()
        return 2
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    except (ToolkitError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
