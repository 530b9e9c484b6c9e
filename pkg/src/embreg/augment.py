"""Appearance-destruction augmentation for modality-robust embedding training.

The pipeline segments a volume into superpixels, remaps each superpixel's
intensities through an independent random monotone curve and/or inversion,
then applies a global random affine warp, Gaussian blur and additive noise.
Intensity statistics are destroyed while anatomy topology is preserved.
Patch pairs sampled from one volume carry the exact voxel correspondence map
over their overlap, which is what supplies positive pairs for training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import Mask, SpatialMeta, VoxelGrid, trilinear_sample

SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


@dataclass
class SuperpixelLabeling:
    """Partition of a volume into connected same-ish-intensity clusters."""

    meta: SpatialMeta
    labels: np.ndarray
    n_labels: int

    def __post_init__(self):
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int32)
        if self.labels.shape != self.meta.dims:
            raise ValueError(f"labels shape {self.labels.shape} != dims {self.meta.dims}")


@dataclass
class AugmentConfig:
    n_superpixels: int = 150
    compactness: float = 0.1
    p_curve: float = 0.8
    p_invert: float = 0.5
    curve_control_points: int = 4
    affine_max_rotation_deg: float = 15.0
    affine_max_scale_delta: float = 0.1
    noise_sigma: float = 0.05
    blur_sigma_mm: float = 1.0
    seed: int = 0
    min_overlap_fraction: float = 0.3

    def __post_init__(self):
        for name in ("p_curve", "p_invert"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        for name in ("noise_sigma", "blur_sigma_mm", "affine_max_rotation_deg", "affine_max_scale_delta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.curve_control_points < 2:
            raise ValueError("curve_control_points must be >= 2")

    def no_spatial_warp(self) -> bool:
        return self.affine_max_rotation_deg == 0.0 and self.affine_max_scale_delta == 0.0


@dataclass(frozen=True)
class AffineMap:
    """Affine map on voxel coordinates: v -> matrix @ v + offset."""

    matrix: np.ndarray
    offset: np.ndarray

    @classmethod
    def identity(cls) -> "AffineMap":
        return cls(matrix=np.eye(3), offset=np.zeros(3))

    def apply(self, pts) -> np.ndarray:
        p = np.asarray(pts, dtype=float)
        return p @ np.asarray(self.matrix).T + np.asarray(self.offset)

    def invert(self) -> "AffineMap":
        inv = np.linalg.inv(self.matrix)
        return AffineMap(matrix=inv, offset=-inv @ self.offset)

    def compose(self, other: "AffineMap") -> "AffineMap":
        """Map applying ``other`` first, then ``self``."""
        return AffineMap(
            matrix=np.asarray(self.matrix) @ np.asarray(other.matrix),
            offset=np.asarray(self.matrix) @ np.asarray(other.offset) + np.asarray(self.offset),
        )


@dataclass
class PatchPair:
    """Two augmented views of one volume with exact overlap correspondence.

    ``correspondence`` maps patch_a voxel coordinates to patch_b voxel
    coordinates; it is valid over ``overlap_mask_a``.
    """

    patch_a: VoxelGrid
    patch_b: VoxelGrid
    correspondence: AffineMap
    overlap_mask_a: Mask


# ---------------------------------------------------------------------------
# SLIC superpixels


def _center_grid_counts(dims, n: int) -> list[int]:
    """Per-axis center counts whose product first reaches n."""
    k = [1, 1, 1]
    while k[0] * k[1] * k[2] < n:
        ratios = [dims[a] / k[a] for a in range(3)]
        axis = int(np.argmax(ratios))
        if k[axis] >= dims[axis]:
            sortable = sorted(range(3), key=lambda a: -ratios[a])
            axis = next((a for a in sortable if k[a] < dims[a]), None)
            if axis is None:
                break
        k[axis] += 1
    return k


def _label_components(labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Connected components of a label image; returns (comp ids 1..K, label per comp)."""
    comp = np.zeros(labels.shape, dtype=np.int32)
    comp_label = [-1]  # index 0 unused
    next_id = 1
    for lab, bbox in enumerate(ndimage.find_objects(labels + 1)):
        if bbox is None:
            continue
        mask = labels[bbox] == lab
        sub, n = ndimage.label(mask, structure=SIX_CONNECTED)
        comp[bbox][mask] = sub[mask] + (next_id - 1)
        comp_label.extend([lab] * n)
        next_id += n
    return comp, np.asarray(comp_label, dtype=np.int64)


def _component_adjacency(comp: np.ndarray) -> np.ndarray:
    """Unique face-adjacent (comp, comp) pairs, both directions."""
    pairs = []
    for axis in range(3):
        a = np.moveaxis(comp, axis, 0)[:-1].ravel()
        b = np.moveaxis(comp, axis, 0)[1:].ravel()
        sel = a != b
        pairs.append(np.column_stack([a[sel], b[sel]]))
        pairs.append(np.column_stack([b[sel], a[sel]]))
    return np.unique(np.concatenate(pairs, axis=0), axis=0)


def _enforce_connectivity(labels: np.ndarray) -> np.ndarray:
    """Merge disconnected fragments of each label into an adjacent label.

    Each label keeps its largest component; every other fragment adopts, in
    breadth-first order from the kept components, the largest adjacent
    already-resolved label. Adopting the BFS parent's label keeps every final
    label 6-connected by construction.
    """
    comp, comp_label = _label_components(labels)
    n_comp = comp_label.size - 1
    if n_comp == np.unique(labels).size:
        return labels
    comp_sizes = np.bincount(comp.ravel(), minlength=n_comp + 1)
    label_counts = np.bincount(labels.ravel())

    keep: dict[int, int] = {}
    for cid in range(1, n_comp + 1):
        lab = int(comp_label[cid])
        if lab not in keep or comp_sizes[cid] > comp_sizes[keep[lab]]:
            keep[lab] = cid

    adj = _component_adjacency(comp)
    order = np.argsort(adj[:, 0], kind="stable")
    adj = adj[order]
    starts = np.searchsorted(adj[:, 0], np.arange(n_comp + 2))

    resolved = np.full(n_comp + 1, -1, dtype=np.int64)
    for lab, cid in keep.items():
        resolved[cid] = lab
    unresolved = [cid for cid in range(1, n_comp + 1) if resolved[cid] < 0]
    while unresolved:
        assignments = {}
        for cid in unresolved:
            neighbors = adj[starts[cid] : starts[cid + 1], 1]
            nb_labels = resolved[neighbors]
            nb_labels = np.unique(nb_labels[nb_labels >= 0])
            if nb_labels.size:
                assignments[cid] = int(nb_labels[np.argmax(label_counts[nb_labels])])
        if not assignments:
            break  # unreachable fragments; leave them as-is
        for cid, lab in assignments.items():
            resolved[cid] = lab
        unresolved = [cid for cid in unresolved if cid not in assignments]
    resolved[resolved < 0] = comp_label[resolved < 0]
    return resolved[comp].astype(np.int32)


def slic_superpixels(
    grid: VoxelGrid,
    n: int,
    compactness: float,
    seed: int = 0,
    max_iters: int = 10,
) -> SuperpixelLabeling:
    """Standard 3D SLIC: k-means over (intensity, compactness-scaled position).

    Cluster centers start on a regular grid; assignment is restricted to a
    local window per center; a final pass merges disconnected fragments so
    every output label is 6-connected and nonempty.
    """
    dims = grid.dims
    n_voxels = dims[0] * dims[1] * dims[2]
    if n < 1 or n > n_voxels:
        raise ValueError(f"n must be in [1, {n_voxels}], got {n}")
    del seed  # initialization is deterministic; kept for interface stability

    data = grid.data.astype(np.float64)
    k = _center_grid_counts(dims, n)
    steps = [dims[a] / k[a] for a in range(3)]
    centers = []
    for ix in range(k[0]):
        for iy in range(k[1]):
            for iz in range(k[2]):
                pos = np.array(
                    [(ix + 0.5) * steps[0] - 0.5, (iy + 0.5) * steps[1] - 0.5, (iz + 0.5) * steps[2] - 0.5]
                )
                pos = np.clip(pos, 0, np.asarray(dims) - 1)
                ip = np.round(pos).astype(int)
                centers.append(np.array([data[ip[0], ip[1], ip[2]], *pos]))
    centers = np.asarray(centers)

    scale = (n_voxels / len(centers)) ** (1.0 / 3.0)
    w = compactness / scale
    half = [max(2, int(math.ceil(1.5 * s))) for s in steps]

    coords = [np.arange(d, dtype=np.float64) for d in dims]
    labels = np.zeros(dims, dtype=np.int32)
    for _ in range(max_iters):
        best = np.full(dims, np.inf)
        new_labels = np.full(dims, -1, dtype=np.int32)
        for ci, c in enumerate(centers):
            lo = [max(0, int(math.floor(c[1 + a])) - half[a]) for a in range(3)]
            hi = [min(dims[a], int(math.ceil(c[1 + a])) + half[a] + 1) for a in range(3)]
            sl = tuple(slice(lo[a], hi[a]) for a in range(3))
            di = data[sl] - c[0]
            dx = (coords[0][sl[0]] - c[1])[:, None, None]
            dy = (coords[1][sl[1]] - c[2])[None, :, None]
            dz = (coords[2][sl[2]] - c[3])[None, None, :]
            d2 = di * di + (w * w) * (dx * dx + dy * dy + dz * dz)
            better = d2 < best[sl]
            best[sl][better] = d2[better]
            new_labels[sl][better] = ci
        if np.any(new_labels < 0):
            # Centers drifted away from a corner; assign leftovers globally.
            missing = np.argwhere(new_labels < 0)
            feats = np.column_stack([data[tuple(missing.T)], missing * w])
            cfeats = np.column_stack([centers[:, 0], centers[:, 1:] * w])
            d2 = ((feats[:, None, :] - cfeats[None, :, :]) ** 2).sum(axis=2)
            new_labels[tuple(missing.T)] = np.argmin(d2, axis=1)
        if np.array_equal(new_labels, labels):
            labels = new_labels
            break
        labels = new_labels
        for ci in range(len(centers)):
            sel = labels == ci
            if not np.any(sel):
                continue
            pos = np.argwhere(sel)
            centers[ci, 0] = data[sel].mean()
            centers[ci, 1:] = pos.mean(axis=0)

    labels = _enforce_connectivity(labels)
    # Compress ids so labels occupy [0, n_labels) with no empty label.
    unique = np.unique(labels)
    remap = np.zeros(unique.max() + 1, dtype=np.int32)
    remap[unique] = np.arange(unique.size, dtype=np.int32)
    labels = remap[labels]
    return SuperpixelLabeling(meta=grid.meta, labels=labels, n_labels=int(unique.size))


# ---------------------------------------------------------------------------
# Random monotone intensity curves


@dataclass(frozen=True)
class MonotoneCurve:
    """Strictly increasing piecewise-linear map with f(0)=0, f(1)=1."""

    xs: np.ndarray
    ys: np.ndarray

    def __call__(self, values):
        return np.interp(values, self.xs, self.ys)

    def inverse(self) -> "MonotoneCurve":
        return MonotoneCurve(xs=self.ys, ys=self.xs)


def random_monotone_curve(control_points: int, rng: np.random.Generator) -> MonotoneCurve:
    """Curve through sorted uniform control points; 2 points give identity."""
    if control_points < 2:
        raise ValueError("control_points must be >= 2")
    anchors = np.linspace(0.0, 1.0, control_points)
    if control_points == 2:
        return MonotoneCurve(xs=anchors, ys=anchors.copy())

    def draw() -> np.ndarray:
        interior = np.sort(rng.uniform(0.0, 1.0, size=control_points - 2))
        pts = np.concatenate([[0.0], interior, [1.0]])
        # Blend toward even spacing to guarantee strict monotonicity.
        return 0.9 * pts + 0.1 * anchors

    return MonotoneCurve(xs=draw(), ys=draw())


# ---------------------------------------------------------------------------
# Full augmentation


def _random_voxel_affine(cfg: AugmentConfig, dims, rng: np.random.Generator) -> AffineMap:
    """Rotation + per-axis scale about the volume center, in voxel coords."""
    from .rigid import RigidTransform  # rotation construction only

    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = math.radians(rng.uniform(-cfg.affine_max_rotation_deg, cfg.affine_max_rotation_deg))
    scales = 1.0 + rng.uniform(-cfg.affine_max_scale_delta, cfg.affine_max_scale_delta, size=3)
    m = RigidTransform.from_axis_angle(axis, angle).rotation @ np.diag(scales)
    center = (np.asarray(dims, dtype=float) - 1.0) / 2.0
    return AffineMap(matrix=m, offset=center - m @ center)


def _augment_with_map(
    grid: VoxelGrid,
    cfg: AugmentConfig,
    rng: np.random.Generator,
    labels: SuperpixelLabeling | None = None,
) -> tuple[VoxelGrid, AffineMap]:
    data = grid.data.astype(np.float64)

    if cfg.p_curve > 0 or cfg.p_invert > 0:
        if labels is None:
            labels = slic_superpixels(grid, cfg.n_superpixels, cfg.compactness)
        lab = labels.labels
        for lab_id in np.unique(lab):
            sel = lab == lab_id
            if cfg.p_curve > 0 and rng.uniform() < cfg.p_curve:
                curve = random_monotone_curve(cfg.curve_control_points, rng)
                data[sel] = curve(data[sel])
            if cfg.p_invert > 0 and rng.uniform() < cfg.p_invert:
                data[sel] = 1.0 - data[sel]

    voxel_map = AffineMap.identity()
    if not cfg.no_spatial_warp():
        voxel_map = _random_voxel_affine(cfg, grid.dims, rng)
        if not np.allclose(voxel_map.matrix, np.eye(3)) or not np.allclose(voxel_map.offset, 0.0):
            inv = voxel_map.invert()
            idx = np.stack(np.meshgrid(*[np.arange(d, dtype=float) for d in grid.dims], indexing="ij"), axis=-1)
            src = inv.apply(idx.reshape(-1, 3))
            warped = trilinear_sample(VoxelGrid(meta=grid.meta, data=data.astype(np.float32)), src, fill=0.0)
            data = warped.reshape(grid.dims).astype(np.float64)

    if cfg.blur_sigma_mm > 0:
        sigma_vox = [cfg.blur_sigma_mm / s for s in grid.meta.spacing]
        data = ndimage.gaussian_filter(data, sigma=sigma_vox)
    if cfg.noise_sigma > 0:
        data = data + rng.normal(0.0, cfg.noise_sigma, size=data.shape)

    out = VoxelGrid(meta=grid.meta, data=np.clip(data, 0.0, 1.0).astype(np.float32))
    return out, voxel_map


def augment(
    grid: VoxelGrid,
    cfg: AugmentConfig,
    rng: np.random.Generator | None = None,
    labels: SuperpixelLabeling | None = None,
) -> VoxelGrid:
    """Apply the full appearance-destruction pipeline.

    Order: per-superpixel curve/inversion, global affine warp, blur, noise,
    clamp to [0, 1]. Intensities are expected pre-normalized to [0, 1].
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    out, _ = _augment_with_map(grid, cfg, rng, labels=labels)
    return out


def _crop_labels(labels: SuperpixelLabeling, offset, patch_dims) -> SuperpixelLabeling:
    sl = tuple(slice(offset[a], offset[a] + patch_dims[a]) for a in range(3))
    sub = labels.labels[sl]
    meta = SpatialMeta(
        dims=patch_dims,
        spacing=labels.meta.spacing,
        origin=tuple(labels.meta.origin[a] + offset[a] * labels.meta.spacing[a] for a in range(3)),
    )
    return SuperpixelLabeling(meta=meta, labels=sub, n_labels=labels.n_labels)


def sample_patch_pair(
    grid: VoxelGrid,
    patch_dims: tuple[int, int, int],
    cfg: AugmentConfig,
    rng: np.random.Generator | None = None,
    labels: SuperpixelLabeling | None = None,
) -> PatchPair:
    """Crop two overlapping windows, augment each, record exact correspondence.

    The overlap is at least ``cfg.min_overlap_fraction`` of the patch volume.
    ``labels`` may carry a precomputed full-volume superpixel labeling, which
    is cropped per window instead of re-running SLIC.
    """
    dims = grid.dims
    patch_dims = tuple(int(p) for p in patch_dims)
    if any(patch_dims[a] > dims[a] or patch_dims[a] < 1 for a in range(3)):
        raise ValueError(f"patch_dims {patch_dims} do not fit grid dims {dims}")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)

    max_off = [dims[a] - patch_dims[a] for a in range(3)]
    o_a = np.array([rng.integers(0, m + 1) for m in max_off])
    # Per-axis shift bound keeping the overlap volume above the minimum.
    axis_keep = cfg.min_overlap_fraction ** (1.0 / 3.0)
    o_b = np.empty(3, dtype=int)
    for a in range(3):
        d_max = int(math.floor(patch_dims[a] * (1.0 - axis_keep)))
        delta = int(rng.integers(-d_max, d_max + 1)) if d_max > 0 else 0
        o_b[a] = int(np.clip(o_a[a] + delta, 0, max_off[a]))

    def crop(offset):
        sl = tuple(slice(int(offset[a]), int(offset[a]) + patch_dims[a]) for a in range(3))
        meta = SpatialMeta(
            dims=patch_dims,
            spacing=grid.meta.spacing,
            origin=tuple(grid.meta.origin[a] + int(offset[a]) * grid.meta.spacing[a] for a in range(3)),
        )
        return VoxelGrid(meta=meta, data=grid.data[sl].copy())

    raw_a = crop(o_a)
    raw_b = crop(o_b)
    labels_a = _crop_labels(labels, o_a, patch_dims) if labels is not None else None
    labels_b = _crop_labels(labels, o_b, patch_dims) if labels is not None else None

    rng_a, rng_b = rng.spawn(2)
    patch_a, map_a = _augment_with_map(raw_a, cfg, rng_a, labels=labels_a)
    patch_b, map_b = _augment_with_map(raw_b, cfg, rng_b, labels=labels_b)

    shift = AffineMap(matrix=np.eye(3), offset=(o_a - o_b).astype(float))
    corr = map_b.compose(shift).compose(map_a.invert())

    idx = np.stack(np.meshgrid(*[np.arange(d, dtype=float) for d in patch_dims], indexing="ij"), axis=-1).reshape(-1, 3)
    pre_a = map_a.invert().apply(idx)
    pre_b = pre_a + (o_a - o_b)
    v_b = map_b.apply(pre_b)
    hi = np.asarray(patch_dims, dtype=float) - 1.0
    ok = (
        np.all((pre_a >= 0) & (pre_a <= hi), axis=1)
        & np.all((pre_b >= 0) & (pre_b <= hi), axis=1)
        & np.all((v_b >= 0) & (v_b <= hi), axis=1)
    )
    mask = Mask(meta=patch_a.meta, data=ok.reshape(patch_dims))
    return PatchPair(patch_a=patch_a, patch_b=patch_b, correspondence=corr, overlap_mask_a=mask)
