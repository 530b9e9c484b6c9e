"""Adaptive registration and iterative embedding refinement.

One registration pass encodes both volumes, matches grid points, fits a
robust rigid transform, maps the moving scan onto the fixed one and crops the
fixed scan to the mapped moving FOV plus a dilation margin; an optional
block-matching stage adds a smooth displacement field on top of the rigid
alignment. The refinement loop alternates registration of every pair with
retraining of the encoder on the registered pairs, shrinking the dilation
margin each iteration.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .augment import AugmentConfig
from .encoder import EncoderConfig, VoxelEncoder, build_encoder, encode, save_checkpoint
from .errors import ToolkitError
from .evaluate import apply_to_landmarks, med, write_report_csv
from .matching import CorrespondenceSet, GridMatchConfig, extract_grid_points, match_points
from .rigid import FitResult, RigidTransform, fit_rigid_robust, save_transform
from .training import LossConfig, TrainConfig, train_cross_modality, train_self_supervised
from .volume import (
    LandmarkSet,
    Mask,
    SpatialMeta,
    VoxelBox,
    VoxelGrid,
    apply_rigid_resample,
    crop_with_margin,
    normalize_unit,
    pad_to_multiple,
    pullback_inbounds_mask,
    resample_isotropic,
    save_volume,
    trilinear_sample,
    voxel_to_world,
    world_to_voxel,
)

logger = logging.getLogger(__name__)

LOW_CONFIDENCE_INLIER_FRACTION = 0.3


class PipelineError(ToolkitError):
    """Registration or refinement failed; message names the stage."""


@dataclass
class DeformableConfig:
    block_size: int = 4  # in embedding cells
    search_radius: int = 2  # in embedding cells
    smoothing_sigma_mm: float = 6.0

    def __post_init__(self):
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")
        if self.search_radius < 0:
            raise ValueError("search_radius must be >= 0")


@dataclass
class PipelineConfig:
    n_iterations: int = 3
    dilation_radius_schedule: tuple[int, ...] = (5, 3, 2)
    match_cfg: GridMatchConfig = field(default_factory=GridMatchConfig)
    loss_cfg: LossConfig = field(default_factory=LossConfig)
    aug_cfg: AugmentConfig = field(default_factory=AugmentConfig)
    train_cfg: TrainConfig = field(default_factory=TrainConfig)
    encoder_cfg: EncoderConfig = field(default_factory=EncoderConfig)
    train_steps_per_iteration: int = 100
    pretrain_steps: int = 200
    deformable: str = "block_match"  # none | block_match
    deformable_cfg: DeformableConfig = field(default_factory=DeformableConfig)
    resample_mm: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.n_iterations < 0:
            raise ValueError("n_iterations must be >= 0")
        if len(self.dilation_radius_schedule) < self.n_iterations:
            raise ValueError("dilation_radius_schedule shorter than n_iterations")
        sched = self.dilation_radius_schedule
        if any(b > a for a, b in zip(sched, sched[1:])):
            raise ValueError("dilation_radius_schedule must be non-increasing")
        if any(r < 0 for r in sched):
            raise ValueError("dilation radii must be non-negative")
        if self.deformable not in ("none", "block_match"):
            raise ValueError(f"unknown deformable stage {self.deformable!r}")


@dataclass
class RegisteredPair:
    """A moving scan rigidly (plus optionally deformably) mapped onto a crop
    of the fixed scan."""

    fixed: VoxelGrid
    moving_warped: VoxelGrid
    overlap_mask: Mask
    rigid: RigidTransform  # moving world -> fixed world
    displacement_field: np.ndarray | None = None  # (dims..., 3) mm on the crop
    fixed_full: VoxelGrid | None = None
    crop_offset: tuple[int, int, int] = (0, 0, 0)
    fit: FitResult | None = None
    crop_box: VoxelBox | None = None


@dataclass
class InferenceResult:
    transform: RigidTransform  # moving world -> fixed world
    fit: FitResult
    n_correspondences: int

    @property
    def inlier_fraction(self) -> float:
        return self.fit.inlier_fraction

    @property
    def flagged(self) -> bool:
        return self.inlier_fraction < LOW_CONFIDENCE_INLIER_FRACTION


def _encode_padded(encoder: VoxelEncoder, grid: VoxelGrid):
    return encode(encoder, pad_to_multiple(grid, encoder.cfg.coarse_stride))


def _match_and_fit(
    encoder: VoxelEncoder, fixed: VoxelGrid, moving: VoxelGrid, cfg: PipelineConfig
) -> tuple[CorrespondenceSet, FitResult]:
    """Grid matching fixed->moving plus robust rigid fit, stage-annotated."""
    fixed_emb = _encode_padded(encoder, fixed)
    moving_emb = _encode_padded(encoder, moving)
    try:
        points = extract_grid_points(fixed, cfg.match_cfg)
        corr = match_points(fixed_emb, moving_emb, points, cfg.match_cfg)
    except ToolkitError as exc:
        raise PipelineError(f"matching stage: {exc}") from exc
    try:
        fit = fit_rigid_robust(corr, seed=cfg.seed)
    except ToolkitError as exc:
        raise PipelineError(f"rigid fit stage: {exc}") from exc
    return corr, fit


def _moving_box_in_fixed(moving: VoxelGrid, xf_mf: RigidTransform, fixed: VoxelGrid) -> VoxelBox:
    """Voxel box of the moving volume's world extent mapped into fixed space."""
    hi = np.asarray(moving.dims, dtype=float) - 1.0
    corners = np.array(
        [[0.0 if bit & (1 << a) == 0 else hi[a] for a in range(3)] for bit in range(8)]
    )
    world = xf_mf.apply(voxel_to_world(moving.meta, corners))
    vox = world_to_voxel(fixed.meta, world)
    lo = np.floor(vox.min(axis=0)).astype(int)
    hi_v = np.ceil(vox.max(axis=0)).astype(int)
    return VoxelBox(lo=tuple(lo), hi=tuple(hi_v))


def register_once(
    encoder: VoxelEncoder,
    fixed: VoxelGrid,
    moving: VoxelGrid,
    cfg: PipelineConfig,
    dilation_radius: int,
) -> RegisteredPair:
    """Match, fit, crop with margin and optionally deformably refine."""
    _corr, fit = _match_and_fit(encoder, fixed, moving, cfg)
    xf_mf = fit.transform.invert()  # fit maps fixed->moving; we warp moving onto fixed

    box = _moving_box_in_fixed(moving, xf_mf, fixed)
    try:
        fixed_crop, offset = crop_with_margin(fixed, box, margin_voxels=dilation_radius)
    except ToolkitError as exc:
        raise PipelineError(f"cropping stage: {exc}") from exc

    moving_warped = apply_rigid_resample(moving, xf_mf, fixed_crop.meta)
    overlap = pullback_inbounds_mask(moving.meta, xf_mf, fixed_crop.meta)

    displacement = None
    if cfg.deformable == "block_match" and cfg.deformable_cfg.search_radius > 0:
        displacement = deformable_block_match(
            fixed_crop, moving_warped, cfg.deformable_cfg, encoder=encoder
        )
        moving_warped, overlap = _apply_displacement(moving_warped, overlap, displacement)

    return RegisteredPair(
        fixed=fixed_crop,
        moving_warped=moving_warped,
        overlap_mask=overlap,
        rigid=xf_mf,
        displacement_field=displacement,
        fixed_full=fixed,
        crop_offset=tuple(int(v) for v in offset),
        fit=fit,
        crop_box=box,
    )


def _apply_displacement(moving_warped: VoxelGrid, overlap: Mask, displacement: np.ndarray):
    """Pull the warped volume through the displacement field (mm)."""
    spacing = np.asarray(moving_warped.meta.spacing)
    idx = np.stack(
        np.meshgrid(*[np.arange(d, dtype=float) for d in moving_warped.dims], indexing="ij"),
        axis=-1,
    )
    src = idx + displacement / spacing
    flat = src.reshape(-1, 3)
    values = trilinear_sample(moving_warped, flat)
    corrected = VoxelGrid(
        meta=moving_warped.meta, data=values.reshape(moving_warped.dims).astype(np.float32)
    )
    mask_grid = VoxelGrid(meta=overlap.meta, data=overlap.data.astype(np.float32))
    mask_pull = trilinear_sample(mask_grid, flat).reshape(moving_warped.dims)
    dims = np.asarray(moving_warped.dims)
    inb = np.all((flat >= 0) & (flat <= dims - 1), axis=1).reshape(moving_warped.dims)
    return corrected, Mask(meta=overlap.meta, data=(mask_pull > 0.999) & inb)


def _block_ncc(fixed_block: np.ndarray, moving_block: np.ndarray) -> float | None:
    """Mean over channels of zero-mean NCC; None when both sides are flat."""
    f = fixed_block.reshape(-1, fixed_block.shape[-1])
    m = moving_block.reshape(-1, moving_block.shape[-1])
    f = f - f.mean(axis=0)
    m = m - m.mean(axis=0)
    fn = np.sqrt((f * f).sum(axis=0))
    mn = np.sqrt((m * m).sum(axis=0))
    valid = (fn > 1e-8) & (mn > 1e-8)
    if not np.any(valid):
        return None
    ncc = (f[:, valid] * m[:, valid]).sum(axis=0) / (fn[valid] * mn[valid])
    return float(ncc.mean())


def deformable_block_match(
    fixed_crop: VoxelGrid,
    moving_crop: VoxelGrid,
    cfg: DeformableConfig,
    encoder: VoxelEncoder | None = None,
) -> np.ndarray:
    """Dense displacement field (mm) from exhaustive local block matching.

    Blocks live on the fine embedding lattice when an encoder is given
    (cross-modality safe); otherwise raw intensities are matched. Each block
    center picks the integer displacement maximizing channel-averaged local
    NCC; the sparse field is Gaussian-smoothed and trilinearly upsampled.
    Constant blocks get zero displacement.
    """
    if fixed_crop.dims != moving_crop.dims:
        raise ValueError("deformable stage requires identical cropped dims")
    dims = fixed_crop.dims
    spacing = np.asarray(fixed_crop.meta.spacing)
    if cfg.search_radius == 0:
        return np.zeros((*dims, 3), dtype=np.float32)

    if encoder is not None:
        stride = encoder.cfg.fine_stride
        chan_f = _encode_padded(encoder, fixed_crop).fine
        chan_m = _encode_padded(encoder, moving_crop).fine
    else:
        stride = 1
        chan_f = fixed_crop.data[..., None]
        chan_m = moving_crop.data[..., None]

    cell_dims = np.asarray(chan_f.shape[:3])
    b = cfg.block_size
    r = cfg.search_radius
    n_blocks = np.maximum(cell_dims // b, 1)
    # Candidate displacements ordered by magnitude then lexicographically,
    # so ties prefer the smallest motion.
    offs = np.stack(
        np.meshgrid(*([np.arange(-r, r + 1)] * 3), indexing="ij"), axis=-1
    ).reshape(-1, 3)
    order = np.lexsort((offs[:, 2], offs[:, 1], offs[:, 0], (offs**2).sum(axis=1)))
    offs = offs[order]

    sparse = np.zeros((*n_blocks, 3), dtype=np.float64)
    centers = np.zeros((*n_blocks, 3), dtype=np.float64)
    for bx in range(n_blocks[0]):
        for by in range(n_blocks[1]):
            for bz in range(n_blocks[2]):
                lo = np.array([bx, by, bz]) * b
                hi = np.minimum(lo + b, cell_dims)
                centers[bx, by, bz] = (lo + hi - 1) / 2.0
                fixed_block = chan_f[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]]
                if float(fixed_block.std()) < 1e-8:
                    continue
                best_score = -np.inf
                best = np.zeros(3)
                for d in offs:
                    slo = lo + d
                    shi = hi + d
                    if np.any(slo < 0) or np.any(shi > cell_dims):
                        continue
                    score = _block_ncc(
                        fixed_block, chan_m[slo[0] : shi[0], slo[1] : shi[1], slo[2] : shi[2]]
                    )
                    if score is not None and score > best_score:
                        best_score = score
                        best = d.astype(float)
                sparse[bx, by, bz] = best

    # Block-lattice smoothing, then trilinear upsampling to the voxel grid.
    sigma_blocks = [cfg.smoothing_sigma_mm / (b * stride * spacing[a]) for a in range(3)]
    for c in range(3):
        sparse[..., c] = ndimage.gaussian_filter(sparse[..., c], sigma=sigma_blocks, mode="nearest")

    idx = np.stack(np.meshgrid(*[np.arange(d, dtype=float) for d in dims], indexing="ij"), axis=-1)
    cell_coords = idx / stride
    dense = np.zeros((*dims, 3), dtype=np.float32)
    for c in range(3):
        block_coords = [
            np.clip(
                (cell_coords[..., a] - centers[(0,) * 3][a]) / b,
                0,
                n_blocks[a] - 1,
            )
            for a in range(3)
        ]
        dense[..., c] = ndimage.map_coordinates(
            sparse[..., c], block_coords, order=1, mode="nearest"
        ) * (stride * spacing[c])
    return dense


def inference(
    encoder: VoxelEncoder, fixed: VoxelGrid, moving: VoxelGrid, cfg: PipelineConfig
) -> InferenceResult:
    """One-pass registration: match, robust fit, no training or iteration."""
    fixed_p = normalize_unit(resample_isotropic(fixed, cfg.resample_mm))
    moving_p = normalize_unit(resample_isotropic(moving, cfg.resample_mm))
    corr, fit = _match_and_fit(encoder, fixed_p, moving_p, cfg)
    return InferenceResult(transform=fit.transform.invert(), fit=fit, n_correspondences=len(corr))


@dataclass
class PipelineResult:
    encoder: VoxelEncoder
    registered: dict[int, list[tuple[int, RegisteredPair]]]
    metrics: list[dict]
    report_rows: list[dict]


def _pair_metrics(
    iteration,
    pair_index: int,
    xf_mf: RigidTransform | None,
    lm_fixed: LandmarkSet | None,
    lm_moving: LandmarkSet | None,
    spacing,
    extra: dict | None = None,
) -> dict | None:
    if lm_fixed is None or lm_moving is None or len(lm_fixed) == 0 or len(lm_moving) == 0:
        return None
    moved = apply_to_landmarks(xf_mf, lm_moving) if xf_mf is not None else lm_moving
    # Distances moved-vs-fixed: how far each moving landmark lands from its twin.
    rep = med(lm_fixed, moved, spacing)
    payload = {
        "iteration": str(iteration),
        "pair": pair_index,
        "names": rep.names,
        "deltas_voxels": [[float(v) for v in row] for row in rep.deltas_voxels],
        "med": rep.med,
        "med_std": rep.med_std,
        "med_x": rep.med_x,
        "med_y": rep.med_y,
        "med_z": rep.med_z,
        "n_landmarks": rep.n_landmarks,
        "units": rep.units,
    }
    if extra:
        payload.update(extra)
    return payload


def _write_pair_artifacts(out_dir: Path, reg: RegisteredPair, metrics: dict | None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    save_transform(reg.rigid, out_dir / "rigid.json")
    save_volume(reg.moving_warped, out_dir / "warped")
    (out_dir / "overlap_mask.raw").write_bytes(
        np.asfortranarray(reg.overlap_mask.data.astype(np.uint8)).tobytes(order="F")
    )
    if metrics is not None:
        (out_dir / "metrics.json").write_text(
            json.dumps(metrics, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )


def run_pipeline(
    fixed_set: list[VoxelGrid],
    moving_set: list[VoxelGrid],
    cfg: PipelineConfig,
    out_dir=None,
    landmarks: list[tuple[LandmarkSet, LandmarkSet]] | None = None,
) -> PipelineResult:
    """Pretrain, then iterate register-all-pairs / retrain / shrink margin.

    Pairs failing registration are excluded from that iteration's training
    set with a warning; an iteration where every pair fails aborts. With a
    run directory, per-pair artifacts, checkpoints, and report.csv are
    written. Deterministic for a fixed seed and inputs.
    """
    if len(fixed_set) != len(moving_set):
        raise ValueError("fixed_set and moving_set must have equal length")
    if not fixed_set:
        raise ValueError("need at least one volume pair")
    if landmarks is not None and len(landmarks) != len(fixed_set):
        raise ValueError("landmarks list must match the number of pairs")

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    out = Path(out_dir) if out_dir is not None else None

    fixed_p = [normalize_unit(resample_isotropic(v, cfg.resample_mm)) for v in fixed_set]
    moving_p = [normalize_unit(resample_isotropic(v, cfg.resample_mm)) for v in moving_set]
    spacing = (cfg.resample_mm,) * 3

    encoder = build_encoder(cfg.encoder_cfg, seed=cfg.seed)
    all_volumes = fixed_p + moving_p
    encoder, pretrain_losses = train_self_supervised(
        encoder, all_volumes, cfg.aug_cfg, cfg.loss_cfg, cfg.pretrain_steps, rng, cfg.train_cfg
    )

    metrics: list[dict] = []
    if landmarks is not None:
        for j, (lm_f, lm_m) in enumerate(landmarks):
            payload = _pair_metrics("initial", j, None, lm_f, lm_m, spacing)
            if payload is not None:
                metrics.append(payload)
                if out is not None:
                    pair_dir = out / "initial" / f"pair_{j}"
                    pair_dir.mkdir(parents=True, exist_ok=True)
                    (pair_dir / "metrics.json").write_text(
                        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
                    )

    registered: dict[int, list[tuple[int, RegisteredPair]]] = {}
    for it in range(cfg.n_iterations):
        radius = cfg.dilation_radius_schedule[it]
        regs: list[tuple[int, RegisteredPair]] = []
        for j, (f, m) in enumerate(zip(fixed_p, moving_p)):
            try:
                reg = register_once(encoder, f, m, cfg, radius)
            except ToolkitError as exc:
                logger.warning("iteration %d pair %d failed: %s", it, j, exc)
                continue
            regs.append((j, reg))
            payload = None
            if landmarks is not None:
                lm_f, lm_m = landmarks[j]
                payload = _pair_metrics(
                    it,
                    j,
                    reg.rigid,
                    lm_f,
                    lm_m,
                    spacing,
                    extra={
                        "inlier_fraction": reg.fit.inlier_fraction if reg.fit else None,
                        "n_used": reg.fit.n_used if reg.fit else None,
                    },
                )
                if payload is not None:
                    metrics.append(payload)
            if out is not None:
                _write_pair_artifacts(out / f"iter_{it}" / f"pair_{j}", reg, payload)
        if not regs:
            raise PipelineError(f"iteration {it}: every pair failed registration")
        registered[it] = regs

        encoder, _losses = train_cross_modality(
            encoder,
            [reg for _, reg in regs],
            all_volumes,
            cfg.aug_cfg,
            cfg.loss_cfg,
            cfg.train_steps_per_iteration,
            rng,
            cfg.train_cfg,
        )
        if out is not None:
            save_checkpoint(
                encoder,
                out / "checkpoints" / f"iter_{it}.ckpt",
                step_count=cfg.pretrain_steps + (it + 1) * cfg.train_steps_per_iteration,
                loss_history=pretrain_losses,
            )

    rows = _report_rows_from_metrics(metrics)
    if out is not None:
        write_report_csv(rows, out / "report.csv")
    return PipelineResult(encoder=encoder, registered=registered, metrics=metrics, report_rows=rows)


def _report_rows_from_metrics(metrics: list[dict]) -> list[dict]:
    from .evaluate import _aggregate_rows

    per_iteration: dict[str, list[dict]] = {}
    for payload in metrics:
        per_iteration.setdefault(payload["iteration"], []).append(payload)
    return _aggregate_rows(per_iteration)


# ---------------------------------------------------------------------------
# Config serialization (single JSON with nested blocks per module config)


def pipeline_config_to_json(cfg: PipelineConfig) -> dict:
    return {
        "n_iterations": cfg.n_iterations,
        "dilation_radius_schedule": list(cfg.dilation_radius_schedule),
        "match_cfg": asdict(cfg.match_cfg),
        "loss_cfg": asdict(cfg.loss_cfg),
        "aug_cfg": asdict(cfg.aug_cfg),
        "train_cfg": {
            "patch_dims": list(cfg.train_cfg.patch_dims),
            "batch_pairs": cfg.train_cfg.batch_pairs,
            "lr": cfg.train_cfg.lr,
            "momentum": cfg.train_cfg.momentum,
        },
        "encoder_cfg": {
            "channels": list(cfg.encoder_cfg.channels),
            "fine_dim": cfg.encoder_cfg.fine_dim,
            "coarse_dim": cfg.encoder_cfg.coarse_dim,
        },
        "train_steps_per_iteration": cfg.train_steps_per_iteration,
        "pretrain_steps": cfg.pretrain_steps,
        "deformable": cfg.deformable,
        "deformable_cfg": asdict(cfg.deformable_cfg),
        "resample_mm": cfg.resample_mm,
        "seed": cfg.seed,
    }


def pipeline_config_from_json(payload: dict) -> PipelineConfig:
    try:
        kwargs = {}
        for key in ("n_iterations", "train_steps_per_iteration", "pretrain_steps", "deformable", "resample_mm", "seed"):
            if key in payload:
                kwargs[key] = payload[key]
        if "dilation_radius_schedule" in payload:
            kwargs["dilation_radius_schedule"] = tuple(payload["dilation_radius_schedule"])
        if "match_cfg" in payload:
            kwargs["match_cfg"] = GridMatchConfig(**payload["match_cfg"])
        if "loss_cfg" in payload:
            kwargs["loss_cfg"] = LossConfig(**payload["loss_cfg"])
        if "aug_cfg" in payload:
            kwargs["aug_cfg"] = AugmentConfig(**payload["aug_cfg"])
        if "train_cfg" in payload:
            tc = dict(payload["train_cfg"])
            if "patch_dims" in tc:
                tc["patch_dims"] = tuple(tc["patch_dims"])
            kwargs["train_cfg"] = TrainConfig(**tc)
        if "encoder_cfg" in payload:
            ec = dict(payload["encoder_cfg"])
            if "channels" in ec:
                ec["channels"] = tuple(ec["channels"])
            kwargs["encoder_cfg"] = EncoderConfig(**ec)
        if "deformable_cfg" in payload:
            kwargs["deformable_cfg"] = DeformableConfig(**payload["deformable_cfg"])
        return PipelineConfig(**kwargs)
    except (TypeError, ValueError, KeyError) as exc:
        raise PipelineError(f"invalid pipeline config: {exc}") from exc


def load_pipeline_config(path) -> PipelineConfig:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise PipelineError(f"unreadable pipeline config {path}: {exc}") from exc
    return pipeline_config_from_json(payload)
