"""Least-squares rigid and affine estimation from 3D point correspondences.

The rigid fit is the SVD solution of the centered cross-covariance with the
determinant-sign correction, minimizing sum ||q_i - (R p_i + T)||^2. A RANSAC
wrapper provides robustness to gross matching outliers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from .errors import ToolkitError

if TYPE_CHECKING:
    from .matching import CorrespondenceSet

ORTHONORMAL_TOL = 1e-9


class FitError(ToolkitError):
    """Base class for transform estimation failures."""


class InsufficientPairsError(FitError):
    """Fewer correspondences than the minimum the model needs."""


class DegenerateGeometryError(FitError):
    """Point configuration does not constrain the transform (e.g. collinear)."""


class RobustFitError(FitError):
    """RANSAC found no model with enough inliers."""


@dataclass(frozen=True)
class RigidTransform:
    """Rotation matrix plus translation (mm), mapping world -> world."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-6:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise ValueError("rotation determinant must be +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(rotation=np.eye(3), translation=np.zeros(3))

    @classmethod
    def from_axis_angle(cls, axis, angle_rad: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        """Rodrigues rotation about ``axis`` by ``angle_rad``."""
        a = np.asarray(axis, dtype=float)
        n = np.linalg.norm(a)
        if n == 0:
            raise ValueError("axis must be nonzero")
        a = a / n
        k = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
        r = np.eye(3) + math.sin(angle_rad) * k + (1 - math.cos(angle_rad)) * (k @ k)
        return cls(rotation=r, translation=np.asarray(translation, dtype=float))

    def apply(self, points) -> np.ndarray:
        """Map points (..., 3) through R p + T."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def invert(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rotation=rt, translation=-rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Returns the transform applying ``other`` first, then ``self``."""
        return RigidTransform(
            rotation=self.rotation @ other.rotation,
            translation=self.rotation @ other.translation + self.translation,
        )

    def rotation_angle_rad(self) -> float:
        """Magnitude of the rotation, in radians."""
        c = (np.trace(self.rotation) - 1.0) / 2.0
        return float(math.acos(min(1.0, max(-1.0, c))))


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    return a.compose(b)


def invert(xf: RigidTransform) -> RigidTransform:
    return xf.invert()


def apply(xf: RigidTransform, points) -> np.ndarray:
    return xf.apply(points)


def rotation_difference_rad(a: RigidTransform, b: RigidTransform) -> float:
    """Angle of the relative rotation between two transforms."""
    return a.compose(b.invert()).rotation_angle_rad()


def random_rotation(rng: np.random.Generator, max_angle_rad: float) -> np.ndarray:
    """Uniform random axis, uniform angle in [0, max_angle_rad]."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle_rad)
    return RigidTransform.from_axis_angle(axis, angle).rotation


@dataclass
class FitResult:
    """Estimated transform with residual and per-pair inlier bookkeeping."""

    transform: RigidTransform
    residual_sq: float
    inlier_flags: np.ndarray
    n_used: int

    @property
    def inlier_fraction(self) -> float:
        n = len(self.inlier_flags)
        return float(np.count_nonzero(self.inlier_flags)) / n if n else 0.0


def _as_point_arrays(corr) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(corr.fixed_array() if hasattr(corr, "fixed_array") else corr[0], dtype=float)
    q = np.asarray(corr.moving_array() if hasattr(corr, "moving_array") else corr[1], dtype=float)
    if p.shape != q.shape or p.ndim != 2 or p.shape[1] != 3:
        raise ValueError(f"expected matching (N, 3) point arrays, got {p.shape} and {q.shape}")
    return p, q


def _fit_rigid_arrays(p: np.ndarray, q: np.ndarray) -> tuple[RigidTransform, float]:
    if p.shape[0] < 3:
        raise InsufficientPairsError(f"rigid fit needs >= 3 pairs, got {p.shape[0]}")
    cp = p.mean(axis=0)
    cq = q.mean(axis=0)
    pc = p - cp
    qc = q - cq
    # Collinear fixed points leave the rotation about that line unconstrained.
    sv = np.linalg.svd(pc, compute_uv=False)
    if sv[1] <= ORTHONORMAL_TOL * sv[0]:
        raise DegenerateGeometryError("fixed points are (near-)collinear")
    h = pc.T @ qc
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    t = cq - r @ cp
    xf = RigidTransform(rotation=r, translation=t)
    residual = float(np.sum((q - xf.apply(p)) ** 2))
    return xf, residual


def fit_rigid(corr: "CorrespondenceSet") -> FitResult:
    """Globally optimal rigid fit of all pairs (centroid + SVD, det-corrected)."""
    p, q = _as_point_arrays(corr)
    xf, residual = _fit_rigid_arrays(p, q)
    return FitResult(
        transform=xf,
        residual_sq=residual,
        inlier_flags=np.ones(p.shape[0], dtype=bool),
        n_used=p.shape[0],
    )


def fit_affine(corr: "CorrespondenceSet") -> tuple[np.ndarray, float]:
    """Ordinary least squares 3x4 affine on homogeneous coordinates."""
    p, q = _as_point_arrays(corr)
    if p.shape[0] < 4:
        raise InsufficientPairsError(f"affine fit needs >= 4 pairs, got {p.shape[0]}")
    design = np.hstack([p, np.ones((p.shape[0], 1))])
    if np.linalg.matrix_rank(design, tol=1e-9 * np.linalg.norm(design)) < 4:
        raise DegenerateGeometryError("affine design matrix is rank-deficient (coplanar points)")
    coeffs, _, _, _ = np.linalg.lstsq(design, q, rcond=None)
    affine = coeffs.T  # rows map [p, 1] -> q components
    residual = float(np.sum((design @ coeffs - q) ** 2))
    return affine, residual


def fit_rigid_robust(
    corr: "CorrespondenceSet",
    max_iters: int = 500,
    inlier_tol_mm: float = 4.0,
    seed: int = 0,
) -> FitResult:
    """RANSAC over minimal 3-pair samples, refit on the consensus set.

    Falls back to the plain least-squares fit when fewer than 10 pairs are
    available. The winner is the model with the most inliers at
    ``inlier_tol_mm``; ties go to lower inlier residual, then lower trial
    index.
    """
    p, q = _as_point_arrays(corr)
    n = p.shape[0]
    if n < 3:
        raise InsufficientPairsError(f"robust rigid fit needs >= 3 pairs, got {n}")
    if n < 10:
        return fit_rigid(corr)

    rng = np.random.default_rng(seed)
    tol_sq = float(inlier_tol_mm) ** 2
    best_count = 0
    best_resid = math.inf
    best_flags = None
    for _ in range(max_iters):
        idx = rng.choice(n, size=3, replace=False)
        try:
            model, _ = _fit_rigid_arrays(p[idx], q[idx])
        except DegenerateGeometryError:
            continue
        err_sq = np.sum((q - model.apply(p)) ** 2, axis=1)
        flags = err_sq <= tol_sq
        count = int(np.count_nonzero(flags))
        if count < 3:
            continue
        resid = float(err_sq[flags].sum())
        if count > best_count or (count == best_count and resid < best_resid):
            best_count = count
            best_resid = resid
            best_flags = flags
    if best_flags is None:
        raise RobustFitError("no candidate model reached 3 inliers")

    xf, _ = _fit_rigid_arrays(p[best_flags], q[best_flags])
    err_sq = np.sum((q - xf.apply(p)) ** 2, axis=1)
    flags = err_sq <= tol_sq
    return FitResult(
        transform=xf,
        residual_sq=float(err_sq[flags].sum()),
        inlier_flags=flags,
        n_used=int(np.count_nonzero(best_flags)),
    )


def save_transform(xf: RigidTransform, path) -> None:
    """Transform JSON: rotation row-major 9 floats, translation_mm 3 floats."""
    payload = {
        "rotation": [float(v) for v in xf.rotation.reshape(-1)],
        "translation_mm": [float(v) for v in xf.translation],
    }
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def load_transform(path) -> RigidTransform:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        rotation = np.asarray(payload["rotation"], dtype=float).reshape(3, 3)
        translation = np.asarray(payload["translation_mm"], dtype=float)
        return RigidTransform(rotation=rotation, translation=translation)
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise FitError(f"invalid transform file {path}: {exc}") from exc
