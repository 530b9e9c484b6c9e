"""3D scalar volumes with world/voxel geometry, resampling, cropping and IO.

Conventions: data is indexed ``data[x, y, z]`` with shape ``dims``; the world
position of the center of voxel ``v`` is ``origin + v * spacing`` (no rotation
in the header, orientation lives in explicit transforms). On disk a volume is
a ``<name>.json`` header plus ``<name>.raw`` little-endian float32 payload in
x-fastest order.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ToolkitError


class VolumeIOError(ToolkitError):
    """Base class for volume container load/save failures."""


class MalformedHeaderError(VolumeIOError):
    """Header JSON is unreadable or violates the container schema."""


class PayloadSizeError(VolumeIOError):
    """Raw payload size does not match the dims declared in the header."""


class NonFiniteDataError(VolumeIOError):
    """Volume payload contains NaN or Inf values."""


class EmptyRegionError(ToolkitError):
    """Requested crop region does not intersect the volume."""


@dataclass(frozen=True)
class SpatialMeta:
    """Voxel lattice geometry: dims (voxels), spacing (mm/voxel), origin (mm)."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if len(self.dims) != 3 or any(int(d) < 1 for d in self.dims):
            raise ValueError(f"dims must be 3 positive integers, got {self.dims}")
        if len(self.spacing) != 3 or any(not (s > 0) for s in self.spacing):
            raise ValueError(f"spacing must be 3 positive reals, got {self.spacing}")
        if any(not math.isfinite(float(v)) for v in (*self.spacing, *self.origin)):
            raise ValueError("spacing and origin must be finite")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def extent_mm(self) -> np.ndarray:
        """Physical size dims * spacing per axis."""
        return np.asarray(self.dims, dtype=float) * np.asarray(self.spacing, dtype=float)


def voxel_to_world(meta: SpatialMeta, v) -> np.ndarray:
    """World coordinates (mm) of continuous voxel coordinates ``v`` (..., 3)."""
    v = np.asarray(v, dtype=float)
    return np.asarray(meta.origin) + v * np.asarray(meta.spacing)


def world_to_voxel(meta: SpatialMeta, w) -> np.ndarray:
    """Continuous voxel coordinates of world points ``w`` (..., 3).

    Out-of-bounds coordinates are returned unclamped; callers decide.
    """
    w = np.asarray(w, dtype=float)
    return (w - np.asarray(meta.origin)) / np.asarray(meta.spacing)


@dataclass
class VoxelGrid:
    """Dense float32 scalar volume with lattice geometry."""

    meta: SpatialMeta
    data: np.ndarray

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.shape != self.meta.dims:
            raise ValueError(f"data shape {self.data.shape} != dims {self.meta.dims}")
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteDataError("volume contains non-finite values")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.meta.dims

    @property
    def spacing(self) -> tuple[float, float, float]:
        return self.meta.spacing


@dataclass
class Mask:
    """Dense boolean volume sharing VoxelGrid geometry."""

    meta: SpatialMeta
    data: np.ndarray

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=bool)
        if self.data.shape != self.meta.dims:
            raise ValueError(f"mask shape {self.data.shape} != dims {self.meta.dims}")


@dataclass
class LandmarkSet:
    """Named world points (mm). Names are unique within a set."""

    points: list[tuple[str, tuple[float, float, float]]] = field(default_factory=list)

    def __post_init__(self):
        names = [n for n, _ in self.points]
        if len(names) != len(set(names)):
            raise ValueError("landmark names must be unique")

    def __len__(self) -> int:
        return len(self.points)

    def names(self) -> list[str]:
        return [n for n, _ in self.points]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {n: np.asarray(w, dtype=float) for n, w in self.points}

    def world_array(self) -> np.ndarray:
        if not self.points:
            return np.zeros((0, 3), dtype=float)
        return np.asarray([w for _, w in self.points], dtype=float)


@dataclass(frozen=True)
class VoxelBox:
    """Axis-aligned voxel-index box, inclusive on both ends."""

    lo: tuple[int, int, int]
    hi: tuple[int, int, int]

    def __post_init__(self):
        if any(h < l for l, h in zip(self.lo, self.hi)):
            raise ValueError(f"box hi {self.hi} below lo {self.lo}")
        object.__setattr__(self, "lo", tuple(int(v) for v in self.lo))
        object.__setattr__(self, "hi", tuple(int(v) for v in self.hi))


def trilinear_sample(grid: VoxelGrid, v, fill: float = 0.0) -> np.ndarray:
    """Trilinear interpolation at continuous voxel coordinates ``v`` (..., 3).

    Integer in-bounds coordinates reproduce stored values exactly; coordinates
    outside [0, dim-1] on any axis return ``fill``.
    """
    v = np.asarray(v, dtype=float)
    scalar_input = v.ndim == 1
    pts = np.atleast_2d(v)
    dims = np.asarray(grid.dims)

    inb = np.all((pts >= 0.0) & (pts <= dims - 1), axis=-1)
    # Clamp so gather indices stay legal even for rejected points.
    p = np.clip(pts, 0.0, np.maximum(dims - 1, 0))
    lo = np.minimum(np.floor(p).astype(np.int64), np.maximum(dims - 2, 0))
    frac = p - lo

    x0, y0, z0 = lo[..., 0], lo[..., 1], lo[..., 2]
    x1 = np.minimum(x0 + 1, dims[0] - 1)
    y1 = np.minimum(y0 + 1, dims[1] - 1)
    z1 = np.minimum(z0 + 1, dims[2] - 1)
    fx, fy, fz = frac[..., 0], frac[..., 1], frac[..., 2]

    d = grid.data
    out = (
        d[x0, y0, z0] * (1 - fx) * (1 - fy) * (1 - fz)
        + d[x1, y0, z0] * fx * (1 - fy) * (1 - fz)
        + d[x0, y1, z0] * (1 - fx) * fy * (1 - fz)
        + d[x0, y0, z1] * (1 - fx) * (1 - fy) * fz
        + d[x1, y0, z1] * fx * (1 - fy) * fz
        + d[x0, y1, z1] * (1 - fx) * fy * fz
        + d[x1, y1, z0] * fx * fy * (1 - fz)
        + d[x1, y1, z1] * fx * fy * fz
    )
    out = np.where(inb, out, float(fill))
    if scalar_input:
        return out.reshape(()).astype(float)
    return out.reshape(v.shape[:-1])


def _target_voxel_centers(meta: SpatialMeta) -> np.ndarray:
    """All voxel index triples of ``meta`` as an (nx, ny, nz, 3) float array."""
    ax = [np.arange(n, dtype=float) for n in meta.dims]
    gx, gy, gz = np.meshgrid(*ax, indexing="ij")
    return np.stack([gx, gy, gz], axis=-1)


def resample_isotropic(grid: VoxelGrid, target_spacing_mm: float, fill: float = 0.0) -> VoxelGrid:
    """Resample to isotropic spacing, dims = ceil(dims * spacing / target)."""
    t = float(target_spacing_mm)
    if not math.isfinite(t) or t <= 0:
        raise ValueError(f"target spacing must be a positive finite value, got {target_spacing_mm}")
    src = grid.meta
    new_dims = tuple(int(math.ceil(d * s / t)) for d, s in zip(src.dims, src.spacing))
    new_meta = SpatialMeta(dims=new_dims, spacing=(t, t, t), origin=src.origin)
    idx = _target_voxel_centers(new_meta)
    src_coords = idx * (t / np.asarray(src.spacing))
    values = trilinear_sample(grid, src_coords.reshape(-1, 3), fill=fill)
    return VoxelGrid(meta=new_meta, data=values.reshape(new_dims).astype(np.float32))


def apply_rigid_resample(grid: VoxelGrid, xf, target_meta: SpatialMeta, fill: float = 0.0) -> VoxelGrid:
    """Pull back ``grid`` through rigid transform ``xf`` onto ``target_meta``.

    ``xf`` maps grid-world coordinates to target-world coordinates; every
    output voxel samples ``grid`` at ``xf⁻¹(world(v))`` so the result is fully
    defined (out-of-bounds pulls get ``fill``).
    """
    idx = _target_voxel_centers(target_meta).reshape(-1, 3)
    w_target = voxel_to_world(target_meta, idx)
    w_source = xf.invert().apply(w_target)
    v_source = world_to_voxel(grid.meta, w_source)
    values = trilinear_sample(grid, v_source, fill=fill)
    return VoxelGrid(meta=target_meta, data=values.reshape(target_meta.dims).astype(np.float32))


def pullback_inbounds_mask(source_meta: SpatialMeta, xf, target_meta: SpatialMeta) -> Mask:
    """Mask of target voxels whose rigid pull-back lands inside the source grid."""
    idx = _target_voxel_centers(target_meta).reshape(-1, 3)
    w_target = voxel_to_world(target_meta, idx)
    v_source = world_to_voxel(source_meta, xf.invert().apply(w_target))
    dims = np.asarray(source_meta.dims)
    inb = np.all((v_source >= 0.0) & (v_source <= dims - 1), axis=-1)
    return Mask(meta=target_meta, data=inb.reshape(target_meta.dims))


def crop_with_margin(grid: VoxelGrid, region: VoxelBox, margin_voxels: int = 0):
    """Crop ``region`` expanded by ``margin_voxels`` per face, clamped to bounds.

    Returns (subvolume, offset); the subvolume origin is shifted so world
    coordinates of retained voxels are unchanged.
    """
    if margin_voxels < 0:
        raise ValueError("margin_voxels must be non-negative")
    dims = grid.dims
    if any(region.hi[a] < 0 or region.lo[a] > dims[a] - 1 for a in range(3)):
        raise EmptyRegionError(f"region {region} does not intersect grid of dims {dims}")
    lo = tuple(max(0, region.lo[a] - margin_voxels) for a in range(3))
    hi = tuple(min(dims[a] - 1, region.hi[a] + margin_voxels) for a in range(3))
    sub = grid.data[lo[0] : hi[0] + 1, lo[1] : hi[1] + 1, lo[2] : hi[2] + 1]
    new_origin = tuple(grid.meta.origin[a] + lo[a] * grid.meta.spacing[a] for a in range(3))
    meta = SpatialMeta(dims=sub.shape, spacing=grid.meta.spacing, origin=new_origin)
    return VoxelGrid(meta=meta, data=sub.copy()), lo


def pad_to_multiple(grid: VoxelGrid, multiple: int, fill: float = 0.0) -> VoxelGrid:
    """Zero-pad at the high end so every dim is a multiple of ``multiple``."""
    dims = grid.dims
    new_dims = tuple(int(math.ceil(d / multiple)) * multiple for d in dims)
    if new_dims == dims:
        return grid
    out = np.full(new_dims, float(fill), dtype=np.float32)
    out[: dims[0], : dims[1], : dims[2]] = grid.data
    meta = SpatialMeta(dims=new_dims, spacing=grid.meta.spacing, origin=grid.meta.origin)
    return VoxelGrid(meta=meta, data=out)


def normalize_unit(grid: VoxelGrid) -> VoxelGrid:
    """Min-max rescale intensities to [0, 1] (constant volumes map to 0)."""
    lo = float(grid.data.min())
    hi = float(grid.data.max())
    if hi - lo <= 0:
        return VoxelGrid(meta=grid.meta, data=np.zeros(grid.dims, dtype=np.float32))
    return VoxelGrid(meta=grid.meta, data=(grid.data - lo) / (hi - lo))


# ---------------------------------------------------------------------------
# Container IO: <name>.json header + <name>.raw little-endian float32 payload


def _base_path(path) -> Path:
    p = Path(path)
    if p.is_dir():
        return p / "volume"
    if p.suffix in (".json", ".raw"):
        return p.with_suffix("")
    return p


def save_volume(grid: VoxelGrid, path) -> Path:
    """Write the volume container; returns the base path (without suffix)."""
    base = _base_path(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "dims": list(grid.meta.dims),
        "spacing_mm": list(grid.meta.spacing),
        "origin_mm": list(grid.meta.origin),
        "dtype": "f32le",
        "layout": "x-fastest",
    }
    base.with_suffix(".json").write_text(json.dumps(header, indent=2) + "\n", encoding="utf-8")
    payload = np.asfortranarray(grid.data).astype("<f4", copy=False)
    base.with_suffix(".raw").write_bytes(payload.tobytes(order="F"))
    return base


def load_volume(path) -> VoxelGrid:
    """Load a volume container; inverse of save_volume, bit-exact."""
    base = _base_path(path)
    header_path = base.with_suffix(".json")
    raw_path = base.with_suffix(".raw")
    if not header_path.exists():
        raise MalformedHeaderError(f"missing header file {header_path}")
    if not raw_path.exists():
        raise PayloadSizeError(f"missing payload file {raw_path}")
    try:
        header = json.loads(header_path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedHeaderError(f"unreadable header {header_path}: {exc}") from exc

    for key in ("dims", "spacing_mm", "origin_mm", "dtype", "layout"):
        if key not in header:
            raise MalformedHeaderError(f"header missing field {key!r}")
    if header["dtype"] != "f32le":
        raise MalformedHeaderError(f"unsupported dtype {header['dtype']!r}")
    if header["layout"] != "x-fastest":
        raise MalformedHeaderError(f"unsupported layout {header['layout']!r}")
    dims = header["dims"]
    spacing = header["spacing_mm"]
    origin = header["origin_mm"]
    if len(dims) != 3 or any(not isinstance(d, int) or d < 1 for d in dims):
        raise MalformedHeaderError(f"invalid dims {dims}")
    try:
        meta = SpatialMeta(dims=tuple(dims), spacing=tuple(spacing), origin=tuple(origin))
    except (ValueError, TypeError) as exc:
        raise MalformedHeaderError(f"invalid geometry in header: {exc}") from exc

    payload = raw_path.read_bytes()
    expected = dims[0] * dims[1] * dims[2] * 4
    if len(payload) != expected:
        raise PayloadSizeError(f"payload is {len(payload)} bytes, header declares {expected}")
    data = np.frombuffer(payload, dtype="<f4").reshape(meta.dims, order="F")
    if not np.all(np.isfinite(data)):
        raise NonFiniteDataError(f"payload of {raw_path} contains non-finite values")
    return VoxelGrid(meta=meta, data=data.copy())


def save_landmarks(landmarks: LandmarkSet, path) -> None:
    """Write a landmark CSV with header name,x_mm,y_mm,z_mm."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["name", "x_mm", "y_mm", "z_mm"])
        for name, w in landmarks.points:
            writer.writerow([name, repr(float(w[0])), repr(float(w[1])), repr(float(w[2]))])


def load_landmarks(path) -> LandmarkSet:
    with Path(path).open(newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        required = {"name", "x_mm", "y_mm", "z_mm"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise MalformedHeaderError(f"landmark CSV {path} lacks header {sorted(required)}")
        points = []
        for row in reader:
            points.append((row["name"], (float(row["x_mm"]), float(row["y_mm"]), float(row["z_mm"]))))
    return LandmarkSet(points=points)
