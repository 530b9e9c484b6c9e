"""Paired pseudo-modality phantom generation with rigid ground truth.

A phantom pair renders one latent anatomy (ellipsoid "organs" plus tube
structures on a uniform background) through two different intensity response
curves. Volume B is additionally moved by a known rigid transform, cropped to
a fraction of A's z-extent and resampled to its own (typically anisotropic)
spacing, mimicking a small-FOV scan of the same subject in another contrast
mechanism. Landmarks sit at analytic ellipsoid extremal points.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ToolkitError
from .rigid import RigidTransform, save_transform
from .volume import (
    LandmarkSet,
    SpatialMeta,
    VoxelGrid,
    save_landmarks,
    save_volume,
    trilinear_sample,
    voxel_to_world,
    world_to_voxel,
)

BACKGROUND_BASE = 0.08


class PhantomError(ToolkitError):
    """Phantom spec cannot be realized (e.g. too few landmarks in B's FOV)."""


@dataclass
class ModalityMap:
    """Intensity response: piecewise-linear curve over tissue base values.

    ``curve`` is a list of (base, rendered) control points with strictly
    increasing base values. Modality A uses a monotone curve; a second
    modality may reorder tissue intensities, which is what makes the pair a
    genuine cross-modality case.
    """

    curve: list[tuple[float, float]]
    noise_sigma: float = 0.0
    blur_sigma_mm: float = 0.0

    def __post_init__(self):
        xs = [x for x, _ in self.curve]
        if len(xs) < 2 or any(b <= a for a, b in zip(xs, xs[1:])):
            raise ValueError("curve needs >= 2 control points with increasing base values")

    def is_monotone(self) -> bool:
        ys = [y for _, y in self.curve]
        return all(b >= a for a, b in zip(ys, ys[1:]))

    def apply(self, values: np.ndarray) -> np.ndarray:
        xs = np.asarray([x for x, _ in self.curve])
        ys = np.asarray([y for _, y in self.curve])
        return np.interp(values, xs, ys)


def default_modality_a(noise_sigma: float = 0.02) -> ModalityMap:
    return ModalityMap(
        curve=[(0.0, 0.0), (0.25, 0.2), (0.6, 0.75), (1.0, 1.0)],
        noise_sigma=noise_sigma,
        blur_sigma_mm=0.5,
    )


def default_modality_b(noise_sigma: float = 0.02) -> ModalityMap:
    # Deliberately non-monotone: several tissue pairs swap brightness order.
    return ModalityMap(
        curve=[(0.0, 0.85), (0.2, 0.15), (0.45, 0.7), (0.7, 0.05), (1.0, 0.55)],
        noise_sigma=noise_sigma,
        blur_sigma_mm=1.2,
    )


@dataclass
class PhantomSpec:
    """Everything needed to generate one phantom pair deterministically."""

    seed: int = 0
    canvas_dims: tuple[int, int, int] = (96, 96, 96)
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    n_blobs: int = 4
    n_tubes: int = 2
    gt_transform: RigidTransform = field(default_factory=RigidTransform.identity)
    fov_fraction_b: float = 0.4
    noise_sigma: float = 0.02
    spacing_b_mm: tuple[float, float, float] = (1.0, 1.0, 3.0)
    modality_a: ModalityMap | None = None
    modality_b: ModalityMap | None = None

    def __post_init__(self):
        if not (0.0 < self.fov_fraction_b <= 1.0):
            raise ValueError("fov_fraction_b must be in (0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")

    def map_a(self) -> ModalityMap:
        return self.modality_a if self.modality_a is not None else default_modality_a(self.noise_sigma)

    def map_b(self) -> ModalityMap:
        return self.modality_b if self.modality_b is not None else default_modality_b(self.noise_sigma)


@dataclass
class _Blob:
    center_mm: np.ndarray
    radii_mm: np.ndarray
    core_value: float
    band_value: float


def _tissue_class_values(n_classes: int, rng: np.random.Generator) -> np.ndarray:
    values = np.linspace(0.2, 1.0, n_classes)
    rng.shuffle(values)
    return values


def tissue_field(spec: PhantomSpec) -> tuple[VoxelGrid, LandmarkSet]:
    """Latent anatomy volume of tissue base values plus landmark candidates.

    Landmarks are the six axis extremal points of each ellipsoid blob,
    analogous to organ top/bottom annotation.
    """
    if spec.n_blobs < 1 and spec.n_tubes < 1:
        raise PhantomError("phantom needs at least one blob or tube")
    rng = np.random.default_rng([int(spec.seed), 0])
    meta = SpatialMeta(dims=spec.canvas_dims, spacing=spec.spacing_mm)
    extent = meta.extent_mm

    n_classes = 2 * spec.n_blobs + spec.n_tubes
    class_values = _tissue_class_values(n_classes, rng)

    blobs: list[_Blob] = []
    for i in range(spec.n_blobs):
        radii = rng.uniform(0.08, 0.16, size=3) * extent
        # Keep every extremal point inside the canvas.
        center = np.array(
            [rng.uniform(radii[a] + 2.0, extent[a] - radii[a] - 2.0) for a in range(3)]
        ) + np.asarray(meta.origin)
        blobs.append(
            _Blob(
                center_mm=center,
                radii_mm=radii,
                core_value=float(class_values[2 * i]),
                band_value=float(class_values[2 * i + 1]),
            )
        )

    world = voxel_to_world(meta, np.stack(np.meshgrid(*[np.arange(n, dtype=float) for n in meta.dims], indexing="ij"), axis=-1))
    data = np.full(meta.dims, BACKGROUND_BASE, dtype=np.float64)

    for blob in blobs:
        rho = np.sqrt(np.sum(((world - blob.center_mm) / blob.radii_mm) ** 2, axis=-1))
        data[(rho <= 1.0) & (rho > 0.78)] = blob.band_value
        data[rho <= 0.78] = blob.core_value

    for j in range(spec.n_tubes):
        value = float(class_values[2 * spec.n_blobs + j])
        p0 = rng.uniform(0.2, 0.8, size=3) * extent + np.asarray(meta.origin)
        p1 = rng.uniform(0.2, 0.8, size=3) * extent + np.asarray(meta.origin)
        radius = rng.uniform(0.02, 0.04) * float(extent.min())
        seg = p1 - p0
        seg_len_sq = float(seg @ seg)
        if seg_len_sq < 1e-12:
            continue
        t = np.clip(np.sum((world - p0) * seg, axis=-1) / seg_len_sq, 0.0, 1.0)
        closest = p0 + t[..., None] * seg
        dist = np.linalg.norm(world - closest, axis=-1)
        data[dist <= radius] = value

    landmarks = []
    for i, blob in enumerate(blobs):
        for axis, label in enumerate("xyz"):
            for sign, tag in ((1.0, "+"), (-1.0, "-")):
                offset = np.zeros(3)
                offset[axis] = sign * blob.radii_mm[axis]
                w = blob.center_mm + offset
                landmarks.append((f"blob{i:02d}{tag}{label}", (float(w[0]), float(w[1]), float(w[2]))))

    return VoxelGrid(meta=meta, data=data.astype(np.float32)), LandmarkSet(points=landmarks)


def _render(latent: VoxelGrid, modality: ModalityMap, rng: np.random.Generator) -> VoxelGrid:
    out = modality.apply(latent.data.astype(np.float64))
    if modality.blur_sigma_mm > 0:
        sigma_vox = [modality.blur_sigma_mm / s for s in latent.meta.spacing]
        out = gaussian_filter(out, sigma=sigma_vox)
    if modality.noise_sigma > 0:
        out = out + rng.normal(0.0, modality.noise_sigma, size=out.shape)
    return VoxelGrid(meta=latent.meta, data=np.clip(out, 0.0, 1.0).astype(np.float32))


def _fov_box_b(meta_a: SpatialMeta, fraction: float) -> tuple[np.ndarray, np.ndarray]:
    """World range of voxel centers covered by B before the gt transform."""
    lo = np.asarray(meta_a.origin, dtype=float)
    hi = lo + (np.asarray(meta_a.dims) - 1) * np.asarray(meta_a.spacing)
    z_span = hi[2] - lo[2]
    z_len = fraction * z_span
    z_lo = lo[2] + (z_span - z_len) / 2.0
    lo_b = np.array([lo[0], lo[1], z_lo])
    hi_b = np.array([hi[0], hi[1], z_lo + z_len])
    return lo_b, hi_b


def generate_phantom_pair(spec: PhantomSpec):
    """Render the phantom pair.

    Returns (vol_a, vol_b, gt, landmarks_a, landmarks_b) where ``gt`` maps
    A-world coordinates onto B-world coordinates and landmarks_b is
    gt(landmarks_a) restricted to B's field of view.
    """
    latent_a, landmarks_a = tissue_field(spec)
    gt = spec.gt_transform

    vol_a = _render(latent_a, spec.map_a(), np.random.default_rng([int(spec.seed), 1]))

    lo_b, hi_b = _fov_box_b(latent_a.meta, spec.fov_fraction_b)
    corners = np.array([[lo_b[a] if bit & (1 << a) == 0 else hi_b[a] for a in range(3)] for bit in range(8)])
    mapped = gt.apply(corners)
    aabb_lo = mapped.min(axis=0)
    aabb_hi = mapped.max(axis=0)
    spacing_b = np.asarray(spec.spacing_b_mm, dtype=float)
    dims_b = tuple(int(math.ceil((aabb_hi[a] - aabb_lo[a]) / spacing_b[a])) + 1 for a in range(3))
    meta_b = SpatialMeta(dims=dims_b, spacing=tuple(spacing_b), origin=tuple(aabb_lo))

    centers_b = voxel_to_world(meta_b, np.stack(np.meshgrid(*[np.arange(n, dtype=float) for n in dims_b], indexing="ij"), axis=-1))
    back_in_a = world_to_voxel(latent_a.meta, gt.invert().apply(centers_b.reshape(-1, 3)))
    latent_b_values = trilinear_sample(latent_a, back_in_a, fill=BACKGROUND_BASE)
    latent_b = VoxelGrid(meta=meta_b, data=latent_b_values.reshape(dims_b).astype(np.float32))
    vol_b = _render(latent_b, spec.map_b(), np.random.default_rng([int(spec.seed), 2]))

    points_b = []
    lo_world_b = np.asarray(meta_b.origin)
    hi_world_b = lo_world_b + (np.asarray(dims_b) - 1) * spacing_b
    for name, w in landmarks_a.points:
        wb = gt.apply(np.asarray(w, dtype=float))
        if np.all(wb >= lo_world_b - 1e-9) and np.all(wb <= hi_world_b + 1e-9):
            points_b.append((name, (float(wb[0]), float(wb[1]), float(wb[2]))))
    landmarks_b = LandmarkSet(points=points_b)
    if len(landmarks_b) < 6:
        raise PhantomError(
            f"only {len(landmarks_b)} landmarks survive B's FOV (need >= 6); "
            "enlarge fov_fraction_b or add blobs"
        )
    return vol_a, vol_b, gt, landmarks_a, landmarks_b


def write_phantom_pair(spec: PhantomSpec, out_dir) -> None:
    """Write vol_a/vol_b containers, landmark CSVs and gt_transform.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vol_a, vol_b, gt, lm_a, lm_b = generate_phantom_pair(spec)
    save_volume(vol_a, out / "vol_a")
    save_volume(vol_b, out / "vol_b")
    save_landmarks(lm_a, out / "landmarks_a.csv")
    save_landmarks(lm_b, out / "landmarks_b.csv")
    save_transform(gt, out / "gt_transform.json")


def spec_to_json(spec: PhantomSpec) -> dict:
    payload = {
        "seed": spec.seed,
        "canvas_dims": list(spec.canvas_dims),
        "spacing_mm": list(spec.spacing_mm),
        "n_blobs": spec.n_blobs,
        "n_tubes": spec.n_tubes,
        "gt_transform": {
            "rotation": [float(v) for v in spec.gt_transform.rotation.reshape(-1)],
            "translation_mm": [float(v) for v in spec.gt_transform.translation],
        },
        "fov_fraction_b": spec.fov_fraction_b,
        "noise_sigma": spec.noise_sigma,
        "spacing_b_mm": list(spec.spacing_b_mm),
    }
    return payload


def spec_from_json(payload: dict) -> PhantomSpec:
    gt = RigidTransform.identity()
    if "gt_transform" in payload:
        gt = RigidTransform(
            rotation=np.asarray(payload["gt_transform"]["rotation"], dtype=float).reshape(3, 3),
            translation=np.asarray(payload["gt_transform"]["translation_mm"], dtype=float),
        )
    kwargs = {}
    for key in ("seed", "n_blobs", "n_tubes", "fov_fraction_b", "noise_sigma"):
        if key in payload:
            kwargs[key] = payload[key]
    for key in ("canvas_dims", "spacing_mm", "spacing_b_mm"):
        if key in payload:
            kwargs[key] = tuple(payload[key])
    return PhantomSpec(gt_transform=gt, **kwargs)


def load_spec(path) -> PhantomSpec:
    try:
        return spec_from_json(json.loads(Path(path).read_text(encoding="utf-8")))
    except (json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
        raise PhantomError(f"invalid phantom spec {path}: {exc}") from exc


def standard_cohort_specs(
    n_pairs: int,
    seed: int = 1234,
    fov_fraction_b: float = 0.4,
    canvas_dims: tuple[int, int, int] = (96, 96, 96),
    max_rotation_deg: float = 10.0,
    max_translation_mm: float = 15.0,
) -> list[PhantomSpec]:
    """Reproducible cohort of specs with randomized planted misalignments."""
    rng = np.random.default_rng(seed)
    specs = []
    for i in range(n_pairs):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = math.radians(rng.uniform(0.25, 1.0) * max_rotation_deg)
        translation = rng.uniform(-max_translation_mm, max_translation_mm, size=3)
        gt = RigidTransform.from_axis_angle(axis, angle, translation)
        specs.append(
            PhantomSpec(
                seed=int(seed + 1000 * (i + 1)),
                canvas_dims=canvas_dims,
                fov_fraction_b=fov_fraction_b,
                gt_transform=gt,
            )
        )
    return specs
