"""Contrastive embedding training.

The objective pulls corresponding voxels of two views together against
per-positive negative sets and, for registered cross-modality pairs, an extra
set of negatives drawn from the non-overlapping region of the larger-FOV
scan:

    L = -sum_i log( exp(x_i . x_i' / tau)
                    / (exp(x_i . x_i' / tau)
                       + sum_j exp(x_i . x_j / tau)
                       + sum_k exp(x_i . x_k_fov / tau)) )

Fine-level terms use the three-part denominator; coarse-level terms use the
two-part form. Optimization is plain SGD with classical momentum.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np
import torch

from .augment import AugmentConfig, PatchPair, sample_patch_pair, slic_superpixels
from .encoder import VoxelEncoder, grid_to_tensor
from .errors import ToolkitError
from .volume import VoxelGrid, pad_to_multiple

if TYPE_CHECKING:
    from .pipeline import RegisteredPair

logger = logging.getLogger(__name__)

UNIT_NORM_ATOL = 1e-5
NEG_EXCLUSION_FINE_CELLS = 2  # no negatives within this many fine cells of the positive
NEG_EXCLUSION_COARSE_CELLS = 1


@dataclass
class LossConfig:
    tau: float = 0.5
    n_pos_f: int = 200
    n_neg_f: int = 500
    n_fov_f: int = 100
    n_pos_c: int = 100
    n_neg_c: int = 200

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        for name in ("n_pos_f", "n_neg_f", "n_fov_f", "n_pos_c", "n_neg_c"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class TrainConfig:
    patch_dims: tuple[int, int, int] = (96, 96, 32)
    batch_pairs: int = 4
    lr: float = 0.02
    momentum: float = 0.9


@dataclass
class TrainingSample:
    """Index sets feeding one loss evaluation on a pair of views.

    All index arrays address fine/coarse cell grids of the encoded views.
    ``fov_view``, when present, supplies the extra fine-level negatives from
    the larger-FOV scan's non-overlap region.
    """

    view_a: VoxelGrid
    view_b: VoxelGrid
    fine_pairs_a: np.ndarray  # (N, 3)
    fine_pairs_b: np.ndarray  # (N, 3)
    fine_negs: np.ndarray  # (N, M, 3) cells in view_b
    coarse_pairs_a: np.ndarray  # (Nc, 3)
    coarse_pairs_b: np.ndarray  # (Nc, 3)
    coarse_negs: np.ndarray  # (Nc, Mc, 3) cells in view_b
    fov_view: VoxelGrid | None = None
    fov_cells: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=int))

    @property
    def n_fine(self) -> int:
        return int(self.fine_pairs_a.shape[0])


# ---------------------------------------------------------------------------
# Loss


def _check_unit_norm(name: str, vectors: np.ndarray) -> None:
    if vectors.size == 0:
        return
    norms = np.linalg.norm(vectors, axis=-1)
    worst = float(np.abs(norms - 1.0).max())
    if worst > UNIT_NORM_ATOL:
        raise ValueError(f"{name} vectors must be unit-norm (worst deviation {worst:.2e})")


def info_nce_loss(pos_a, pos_b, negatives=None, fov_negatives=None, tau: float = 0.5):
    """Evaluate the contrastive objective in float64.

    pos_a/pos_b: (N, d) embeddings of positive pairs; negatives: (N, M, d)
    per-positive negatives; fov_negatives: (K, d) shared across positives.
    Returns (loss, per-pair terms). Inputs must already be unit-norm.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    pos_a = np.asarray(pos_a, dtype=np.float64)
    pos_b = np.asarray(pos_b, dtype=np.float64)
    if pos_a.shape != pos_b.shape or pos_a.ndim != 2:
        raise ValueError(f"positive pair shapes differ: {pos_a.shape} vs {pos_b.shape}")
    n = pos_a.shape[0]
    _check_unit_norm("positive", pos_a)
    _check_unit_norm("positive", pos_b)

    s_pos = np.sum(pos_a * pos_b, axis=1) / tau  # (N,)
    logits = [s_pos[:, None]]
    if negatives is not None and np.size(negatives) > 0:
        negatives = np.asarray(negatives, dtype=np.float64)
        if negatives.ndim != 3 or negatives.shape[0] != n:
            raise ValueError(f"negatives must be (N, M, d), got {negatives.shape}")
        _check_unit_norm("negative", negatives)
        logits.append(np.einsum("nd,nmd->nm", pos_a, negatives) / tau)
    if fov_negatives is not None and np.size(fov_negatives) > 0:
        fov_negatives = np.asarray(fov_negatives, dtype=np.float64)
        if fov_negatives.ndim != 2:
            raise ValueError(f"fov_negatives must be (K, d), got {fov_negatives.shape}")
        _check_unit_norm("fov negative", fov_negatives)
        logits.append(pos_a @ fov_negatives.T / tau)

    all_logits = np.concatenate(logits, axis=1)
    lse = np.log(np.sum(np.exp(all_logits - all_logits.max(axis=1, keepdims=True)), axis=1))
    lse += all_logits.max(axis=1)
    per_pair = lse - s_pos
    return float(per_pair.sum()), per_pair


def _gather_cells(field: torch.Tensor, cells: np.ndarray) -> torch.Tensor:
    """Embedding vectors at cell indices; field is (1, d, X, Y, Z), cells (N, 3)."""
    idx = torch.from_numpy(np.ascontiguousarray(cells.reshape(-1, 3), dtype=np.int64))
    out = field[0, :, idx[:, 0], idx[:, 1], idx[:, 2]].T
    return out.reshape(*cells.shape[:-1], field.shape[1])


def _info_nce_torch(pos_a, pos_b, negatives, fov_negatives, tau: float) -> torch.Tensor:
    s_pos = (pos_a * pos_b).sum(dim=1) / tau
    logits = [s_pos[:, None]]
    if negatives is not None and negatives.numel() > 0:
        logits.append(torch.einsum("nd,nmd->nm", pos_a, negatives) / tau)
    if fov_negatives is not None and fov_negatives.numel() > 0:
        logits.append(pos_a @ fov_negatives.T / tau)
    lse = torch.logsumexp(torch.cat(logits, dim=1), dim=1)
    return (lse - s_pos).sum()


def sample_loss(encoder: VoxelEncoder, sample: TrainingSample, cfg: LossConfig) -> torch.Tensor:
    """Differentiable loss of one TrainingSample (fine + coarse terms)."""
    dtype = next(encoder.parameters()).dtype
    fine_a, coarse_a = encoder(grid_to_tensor(sample.view_a, dtype))
    fine_b, coarse_b = encoder(grid_to_tensor(sample.view_b, dtype))

    total = torch.zeros((), dtype=dtype)
    if sample.n_fine > 0:
        fov_vecs = None
        if sample.fov_view is not None and sample.fov_cells.shape[0] > 0:
            fov_fine, _ = encoder(grid_to_tensor(sample.fov_view, dtype))
            fov_vecs = _gather_cells(fov_fine, sample.fov_cells)
        total = total + _info_nce_torch(
            _gather_cells(fine_a, sample.fine_pairs_a),
            _gather_cells(fine_b, sample.fine_pairs_b),
            _gather_cells(fine_b, sample.fine_negs) if sample.fine_negs.size else None,
            fov_vecs,
            cfg.tau,
        )
    if sample.coarse_pairs_a.shape[0] > 0:
        total = total + _info_nce_torch(
            _gather_cells(coarse_a, sample.coarse_pairs_a),
            _gather_cells(coarse_b, sample.coarse_pairs_b),
            _gather_cells(coarse_b, sample.coarse_negs) if sample.coarse_negs.size else None,
            None,
            cfg.tau,
        )
    return total


def loss_gradient(encoder: VoxelEncoder, sample: TrainingSample, cfg: LossConfig) -> dict[str, np.ndarray]:
    """Gradient of the sample loss for every encoder parameter."""
    encoder.zero_grad(set_to_none=True)
    loss = sample_loss(encoder, sample, cfg)
    loss.backward()
    grads = {}
    for name, p in encoder.named_parameters():
        grads[name] = (
            p.grad.detach().clone().numpy() if p.grad is not None else np.zeros(p.shape, dtype=np.float64)
        )
    encoder.zero_grad(set_to_none=True)
    return grads


def sgd_step(params: dict, grads: dict, lr: float, momentum: float, state: dict | None = None):
    """Classical momentum update: v <- m*v + g; p <- p - lr*v.

    Works on dicts of numpy arrays or torch tensors; returns (params, state)
    as new dicts.
    """
    state = dict(state) if state else {}
    new_params = {}
    for name, p in params.items():
        g = grads[name]
        if hasattr(g, "shape") and tuple(g.shape) != tuple(p.shape):
            raise ValueError(f"gradient shape {tuple(g.shape)} != param shape {tuple(p.shape)} for {name}")
        v = state.get(name)
        if v is None:
            v = g * 0
        v = momentum * v + g
        new_params[name] = p - lr * v
        state[name] = v
    return new_params, state


# ---------------------------------------------------------------------------
# Sample construction


def _sample_negatives(
    rng: np.random.Generator,
    grid_dims: tuple[int, int, int],
    anchors: np.ndarray,
    n_neg: int,
    exclusion: int,
):
    """(N, n_neg, 3) cells uniform over the grid, outside a Chebyshev ball
    around each anchor."""
    n = anchors.shape[0]
    if n == 0 or n_neg == 0:
        return np.zeros((n, n_neg, 3), dtype=int)
    dims = np.asarray(grid_dims)
    flat = rng.integers(0, dims.prod(), size=(n, n_neg))
    cells = np.stack(np.unravel_index(flat, grid_dims), axis=-1)
    for _ in range(20):
        too_close = np.all(np.abs(cells - anchors[:, None, :]) <= exclusion, axis=-1)
        if not np.any(too_close):
            break
        redraw = rng.integers(0, dims.prod(), size=int(too_close.sum()))
        cells[too_close] = np.stack(np.unravel_index(redraw, grid_dims), axis=-1)
    return cells


def _level_pairs_from_patch_pair(pair: PatchPair, stride: int):
    """Cell-index positives (a_cells, b_cells) for one embedding level."""
    dims = pair.patch_a.dims
    level_dims = tuple(d // stride for d in dims)
    cells = np.stack(
        np.meshgrid(*[np.arange(n) for n in level_dims], indexing="ij"), axis=-1
    ).reshape(-1, 3)
    centers = cells * stride
    mask_ok = pair.overlap_mask_a.data[centers[:, 0], centers[:, 1], centers[:, 2]]
    mapped = pair.correspondence.apply(centers.astype(float))
    b_cells = np.rint(mapped / stride).astype(int)
    in_bounds = np.all((b_cells >= 0) & (b_cells < np.asarray(level_dims)), axis=1)
    ok = mask_ok & in_bounds
    return cells[ok], b_cells[ok], level_dims


def build_sample_from_patch_pair(
    pair: PatchPair,
    loss_cfg: LossConfig,
    rng: np.random.Generator,
    fine_stride: int = 2,
    coarse_stride: int = 8,
) -> TrainingSample | None:
    """Positive/negative cell sets from an augmented overlapping patch pair."""
    fa, fb, fine_dims = _level_pairs_from_patch_pair(pair, fine_stride)
    if fa.shape[0] == 0:
        return None
    pick = rng.choice(fa.shape[0], size=min(loss_cfg.n_pos_f, fa.shape[0]), replace=False)
    fa, fb = fa[pick], fb[pick]
    fine_negs = _sample_negatives(rng, fine_dims, fb, loss_cfg.n_neg_f, NEG_EXCLUSION_FINE_CELLS)

    ca, cb, coarse_dims = _level_pairs_from_patch_pair(pair, coarse_stride)
    if ca.shape[0] > 0:
        pick_c = rng.choice(ca.shape[0], size=min(loss_cfg.n_pos_c, ca.shape[0]), replace=False)
        ca, cb = ca[pick_c], cb[pick_c]
        coarse_negs = _sample_negatives(rng, coarse_dims, cb, loss_cfg.n_neg_c, NEG_EXCLUSION_COARSE_CELLS)
    else:
        coarse_negs = np.zeros((0, loss_cfg.n_neg_c, 3), dtype=int)

    return TrainingSample(
        view_a=pair.patch_a,
        view_b=pair.patch_b,
        fine_pairs_a=fa,
        fine_pairs_b=fb,
        fine_negs=fine_negs,
        coarse_pairs_a=ca,
        coarse_pairs_b=cb,
        coarse_negs=coarse_negs,
    )


def build_sample_from_registered_pair(
    reg: "RegisteredPair",
    loss_cfg: LossConfig,
    rng: np.random.Generator,
    fine_stride: int = 2,
    coarse_stride: int = 8,
    max_displacement_voxels: float = 2.0,
) -> TrainingSample | None:
    """Aligned-cell positives from a registered pair, FOV negatives from the
    larger-FOV volume outside the crop region.

    Sites where the deformable field moved more than
    ``max_displacement_voxels`` are skipped as unreliable supervision.
    """
    view_a = pad_to_multiple(reg.fixed, coarse_stride)
    view_b = pad_to_multiple(reg.moving_warped, coarse_stride)
    crop_dims = reg.fixed.dims
    mask = np.zeros(view_a.dims, dtype=bool)
    mask[: crop_dims[0], : crop_dims[1], : crop_dims[2]] = reg.overlap_mask.data

    disp_vox = None
    if reg.displacement_field is not None:
        spacing = np.asarray(reg.fixed.meta.spacing)
        disp_vox = np.linalg.norm(reg.displacement_field / spacing, axis=-1)

    def level_positives(stride):
        level_dims = tuple(d // stride for d in view_a.dims)
        cells = np.stack(
            np.meshgrid(*[np.arange(n) for n in level_dims], indexing="ij"), axis=-1
        ).reshape(-1, 3)
        centers = cells * stride
        ok = mask[centers[:, 0], centers[:, 1], centers[:, 2]]
        if disp_vox is not None:
            inside = np.all(centers < np.asarray(crop_dims), axis=1)
            stable = np.ones(len(cells), dtype=bool)
            cc = centers[inside]
            stable[inside] = disp_vox[cc[:, 0], cc[:, 1], cc[:, 2]] <= max_displacement_voxels
            ok = ok & stable
        return cells[ok], level_dims

    fine_cells, fine_dims = level_positives(fine_stride)
    if fine_cells.shape[0] == 0:
        return None
    pick = rng.choice(fine_cells.shape[0], size=min(loss_cfg.n_pos_f, fine_cells.shape[0]), replace=False)
    fa = fine_cells[pick]
    fine_negs = _sample_negatives(rng, fine_dims, fa, loss_cfg.n_neg_f, NEG_EXCLUSION_FINE_CELLS)

    coarse_cells, coarse_dims = level_positives(coarse_stride)
    if coarse_cells.shape[0] > 0:
        pick_c = rng.choice(
            coarse_cells.shape[0], size=min(loss_cfg.n_pos_c, coarse_cells.shape[0]), replace=False
        )
        ca = coarse_cells[pick_c]
        coarse_negs = _sample_negatives(rng, coarse_dims, ca, loss_cfg.n_neg_c, NEG_EXCLUSION_COARSE_CELLS)
    else:
        ca = coarse_cells
        coarse_negs = np.zeros((0, loss_cfg.n_neg_c, 3), dtype=int)

    fov_view = None
    fov_cells = np.zeros((0, 3), dtype=int)
    if loss_cfg.n_fov_f > 0 and getattr(reg, "fixed_full", None) is not None:
        fov_view = pad_to_multiple(reg.fixed_full, coarse_stride)
        full_fine = tuple(d // fine_stride for d in fov_view.dims)
        cells = np.stack(
            np.meshgrid(*[np.arange(n) for n in full_fine], indexing="ij"), axis=-1
        ).reshape(-1, 3)
        centers = cells * fine_stride
        lo = np.asarray(reg.crop_offset)
        hi = lo + np.asarray(crop_dims)
        outside = np.any((centers < lo) | (centers >= hi), axis=1)
        in_volume = np.all(centers < np.asarray(reg.fixed_full.dims), axis=1)
        candidates = cells[outside & in_volume]
        if candidates.shape[0] > 0:
            pick_f = rng.choice(
                candidates.shape[0], size=min(loss_cfg.n_fov_f, candidates.shape[0]), replace=False
            )
            fov_cells = candidates[pick_f]
        else:
            fov_view = None

    return TrainingSample(
        view_a=view_a,
        view_b=view_b,
        fine_pairs_a=fa,
        fine_pairs_b=fa.copy(),
        fine_negs=fine_negs,
        coarse_pairs_a=ca,
        coarse_pairs_b=ca.copy(),
        coarse_negs=coarse_negs,
        fov_view=fov_view,
        fov_cells=fov_cells,
    )


# ---------------------------------------------------------------------------
# Training loops


def _clamped_patch_dims(vol_dims, patch_dims, coarse_stride: int) -> tuple[int, int, int]:
    out = []
    for a in range(3):
        d = min(patch_dims[a], vol_dims[a])
        d = max(coarse_stride, (d // coarse_stride) * coarse_stride)
        out.append(d)
    return tuple(out)


def _apply_sgd(encoder: VoxelEncoder, lr: float, momentum: float, state: dict) -> dict:
    params = dict(encoder.named_parameters())
    grads = {name: (p.grad if p.grad is not None else torch.zeros_like(p)) for name, p in params.items()}
    with torch.no_grad():
        new_params, state = sgd_step(
            {n: p.detach() for n, p in params.items()}, grads, lr, momentum, state
        )
        for name, p in params.items():
            p.copy_(new_params[name])
    encoder.zero_grad(set_to_none=True)
    return state


class _LabelCache:
    """Per-volume SLIC labelings, computed once and cropped per patch."""

    def __init__(self, aug_cfg: AugmentConfig):
        self.aug_cfg = aug_cfg
        self._cache: dict[int, object] = {}

    def get(self, volume: VoxelGrid):
        if self.aug_cfg.p_curve == 0 and self.aug_cfg.p_invert == 0:
            return None
        key = id(volume)
        if key not in self._cache:
            self._cache[key] = slic_superpixels(
                volume, self.aug_cfg.n_superpixels, self.aug_cfg.compactness
            )
        return self._cache[key]


def _self_supervised_step(
    encoder: VoxelEncoder,
    volumes: list[VoxelGrid],
    aug_cfg: AugmentConfig,
    loss_cfg: LossConfig,
    train_cfg: TrainConfig,
    rng: np.random.Generator,
    labels: _LabelCache,
) -> torch.Tensor | None:
    total = None
    for _ in range(train_cfg.batch_pairs):
        sample = None
        for _attempt in range(5):
            vol = volumes[int(rng.integers(0, len(volumes)))]
            dims = _clamped_patch_dims(vol.dims, train_cfg.patch_dims, encoder.cfg.coarse_stride)
            pair = sample_patch_pair(vol, dims, aug_cfg, rng=rng, labels=labels.get(vol))
            sample = build_sample_from_patch_pair(
                pair, loss_cfg, rng, encoder.cfg.fine_stride, encoder.cfg.coarse_stride
            )
            if sample is not None:
                break
        if sample is None:
            continue
        loss = sample_loss(encoder, sample, loss_cfg)
        total = loss if total is None else total + loss
    return total


def train_self_supervised(
    encoder: VoxelEncoder,
    volumes: list[VoxelGrid],
    aug_cfg: AugmentConfig,
    loss_cfg: LossConfig,
    steps: int,
    rng: np.random.Generator,
    train_cfg: TrainConfig | None = None,
) -> tuple[VoxelEncoder, list[float]]:
    """Intra-volume training on augmented overlapping patch pairs."""
    if not volumes:
        raise ValueError("need at least one volume")
    train_cfg = train_cfg or TrainConfig()
    labels = _LabelCache(aug_cfg)
    state: dict = {}
    losses: list[float] = []
    for _step in range(steps):
        loss = _self_supervised_step(encoder, volumes, aug_cfg, loss_cfg, train_cfg, rng, labels)
        if loss is None:
            losses.append(float("nan"))
            continue
        encoder.zero_grad(set_to_none=True)
        loss.backward()
        state = _apply_sgd(encoder, train_cfg.lr, train_cfg.momentum, state)
        losses.append(float(loss.detach()))
    return encoder, losses


def train_cross_modality(
    encoder: VoxelEncoder,
    registered_pairs: list["RegisteredPair"],
    volumes: list[VoxelGrid],
    aug_cfg: AugmentConfig,
    loss_cfg: LossConfig,
    steps: int,
    rng: np.random.Generator,
    train_cfg: TrainConfig | None = None,
) -> tuple[VoxelEncoder, list[float]]:
    """Alternate self-supervised steps with registered-pair supervision."""
    if not registered_pairs:
        raise ValueError("need at least one registered pair")
    usable = [r for r in registered_pairs if np.any(r.overlap_mask.data)]
    for r in registered_pairs:
        if not np.any(r.overlap_mask.data):
            logger.warning("skipping registered pair with empty overlap")
    if not usable:
        raise ToolkitError("all registered pairs have empty overlap")

    train_cfg = train_cfg or TrainConfig()
    labels = _LabelCache(aug_cfg)
    state: dict = {}
    losses: list[float] = []
    for step in range(steps):
        if step % 2 == 0 and volumes:
            loss = _self_supervised_step(encoder, volumes, aug_cfg, loss_cfg, train_cfg, rng, labels)
        else:
            reg = usable[int(rng.integers(0, len(usable)))]
            sample = build_sample_from_registered_pair(
                reg, loss_cfg, rng, encoder.cfg.fine_stride, encoder.cfg.coarse_stride
            )
            loss = sample_loss(encoder, sample, loss_cfg) if sample is not None else None
        if loss is None:
            losses.append(float("nan"))
            continue
        encoder.zero_grad(set_to_none=True)
        loss.backward()
        state = _apply_sgd(encoder, train_cfg.lr, train_cfg.momentum, state)
        losses.append(float(loss.detach()))
    return encoder, losses
