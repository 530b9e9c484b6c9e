"""Grid-point correspondence between volumes via embedding similarity.

For each grid point on the fixed volume, a coarse nearest-neighbor search
keeps the top-k candidate coarse cells of the moving volume; a fine search
inside those cells' surrounding regions picks the best fine cell. Matches are
filtered by a similarity floor and an optional reciprocal
(mutual-nearest-neighbor) check. Everything downstream of the embeddings is
deterministic: ties break on the lowest linear cell index.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .encoder import EmbeddingField
from .errors import ToolkitError
from .volume import VoxelGrid, voxel_to_world, world_to_voxel


class MatchingError(ToolkitError):
    """No usable grid points or no reliable correspondences."""


@dataclass
class GridMatchConfig:
    grid_spacing_voxels: int = 6
    coarse_top_k: int = 5
    min_similarity: float = 0.5
    reciprocal_check: bool = True
    foreground_threshold: float = 1e-4  # local intensity variance floor

    def __post_init__(self):
        if self.grid_spacing_voxels < 1:
            raise ValueError("grid_spacing_voxels must be >= 1")
        if self.coarse_top_k < 1:
            raise ValueError("coarse_top_k must be >= 1")


@dataclass
class CorrespondenceSet:
    """Matched world-point pairs with similarities and config provenance."""

    pairs: list[tuple[np.ndarray, np.ndarray, float]] = field(default_factory=list)
    provenance: GridMatchConfig | None = None

    def __len__(self) -> int:
        return len(self.pairs)

    def fixed_array(self) -> np.ndarray:
        if not self.pairs:
            return np.zeros((0, 3))
        return np.asarray([p for p, _, _ in self.pairs], dtype=float)

    def moving_array(self) -> np.ndarray:
        if not self.pairs:
            return np.zeros((0, 3))
        return np.asarray([q for _, q, _ in self.pairs], dtype=float)

    def similarities(self) -> np.ndarray:
        return np.asarray([s for _, _, s in self.pairs], dtype=float)


def extract_grid_points(vol: VoxelGrid, cfg: GridMatchConfig) -> np.ndarray:
    """Regular world-space lattice over foreground voxels.

    Points whose local intensity variance falls below
    ``cfg.foreground_threshold`` are dropped; an all-background volume is an
    error.
    """
    s = cfg.grid_spacing_voxels
    data = vol.data.astype(np.float64)
    mean = ndimage.uniform_filter(data, size=s)
    var = ndimage.uniform_filter(data * data, size=s) - mean * mean

    axes = [np.arange(s // 2, vol.dims[a], s) for a in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    lattice = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    keep = var[lattice[:, 0], lattice[:, 1], lattice[:, 2]] >= cfg.foreground_threshold
    points = lattice[keep]
    if points.shape[0] == 0:
        raise MatchingError("no grid points above the foreground threshold")
    return voxel_to_world(vol.meta, points.astype(float))


def _coarse_cell_of_fine(fine_cell: np.ndarray, fine_stride: int, coarse_stride: int) -> np.ndarray:
    voxel = fine_cell * fine_stride
    return np.rint(voxel / coarse_stride).astype(int)


def _fine_candidates_for_coarse(
    coarse_cells: np.ndarray, field: EmbeddingField
) -> np.ndarray:
    """Unique fine cells covered by the given coarse cells' local regions."""
    s_ratio = field.coarse_stride // field.fine_stride
    half = s_ratio  # region extends one coarse-cell width around the center
    fine_dims = np.asarray(field.fine_dims)
    out = []
    for cc in np.atleast_2d(coarse_cells):
        center = cc * s_ratio
        lo = np.maximum(center - half, 0)
        hi = np.minimum(center + half + 1, fine_dims)
        if np.any(lo >= hi):
            continue
        cells = np.stack(
            np.meshgrid(*[np.arange(lo[a], hi[a]) for a in range(3)], indexing="ij"), axis=-1
        ).reshape(-1, 3)
        out.append(cells)
    if not out:
        return np.zeros((0, 3), dtype=int)
    cells = np.concatenate(out, axis=0)
    flat = np.ravel_multi_index(cells.T, field.fine_dims)
    _, first = np.unique(flat, return_index=True)
    return cells[np.sort(first)]


def _best_fine_match(
    query_fine: np.ndarray,
    query_coarse: np.ndarray,
    target: EmbeddingField,
    top_k: int,
) -> tuple[np.ndarray, float]:
    """Coarse-to-fine argmax; returns (fine cell, fine similarity)."""
    coarse_flat = target.coarse_flat()
    sims = coarse_flat @ query_coarse
    k = min(top_k, sims.shape[0])
    # Deterministic top-k: sort by (-similarity, linear index).
    order = np.lexsort((np.arange(sims.shape[0]), -sims))[:k]
    cand_coarse = np.stack(np.unravel_index(order, target.coarse_dims), axis=-1)

    cand_fine = _fine_candidates_for_coarse(cand_coarse, target)
    vecs = target.fine[cand_fine[:, 0], cand_fine[:, 1], cand_fine[:, 2]]
    fine_sims = vecs @ query_fine
    flat = np.ravel_multi_index(cand_fine.T, target.fine_dims)
    pick = np.lexsort((flat, -fine_sims))[0]
    return cand_fine[pick], float(fine_sims[pick])


def match_points(
    fixed_emb: EmbeddingField,
    moving_emb: EmbeddingField,
    points: np.ndarray,
    cfg: GridMatchConfig,
) -> CorrespondenceSet:
    """Match fixed-volume world points into the moving volume.

    Points are snapped to their fine cell on the fixed field; candidates in
    the moving field come from the top-k most similar coarse cells. Pairs
    failing the similarity floor or the reciprocal check are dropped; an
    empty result is an error.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    fine_dims_f = np.asarray(fixed_emb.fine_dims)
    coarse_dims_f = np.asarray(fixed_emb.coarse_dims)

    pairs = []
    for p_world in points:
        v = world_to_voxel(fixed_emb.meta, p_world)
        f_cell = fixed_emb.voxel_to_fine_cell(v)
        if np.any(f_cell < 0) or np.any(f_cell >= fine_dims_f):
            continue
        c_cell = np.clip(fixed_emb.voxel_to_coarse_cell(v), 0, coarse_dims_f - 1)
        q_fine = fixed_emb.fine[f_cell[0], f_cell[1], f_cell[2]]
        q_coarse = fixed_emb.coarse[c_cell[0], c_cell[1], c_cell[2]]

        m_cell, sim = _best_fine_match(q_fine, q_coarse, moving_emb, cfg.coarse_top_k)
        if sim < cfg.min_similarity:
            continue
        if cfg.reciprocal_check:
            m_fine_vec = moving_emb.fine[m_cell[0], m_cell[1], m_cell[2]]
            m_coarse_cell = np.clip(
                _coarse_cell_of_fine(m_cell, moving_emb.fine_stride, moving_emb.coarse_stride),
                0,
                np.asarray(moving_emb.coarse_dims) - 1,
            )
            m_coarse_vec = moving_emb.coarse[m_coarse_cell[0], m_coarse_cell[1], m_coarse_cell[2]]
            back_cell, _ = _best_fine_match(m_fine_vec, m_coarse_vec, fixed_emb, cfg.coarse_top_k)
            if not np.array_equal(back_cell, f_cell):
                continue
        p_moving = moving_emb.fine_cell_world(m_cell)
        pairs.append((p_world.copy(), np.asarray(p_moving, dtype=float), sim))

    if not pairs:
        raise MatchingError("no reliable correspondences survived filtering")
    return CorrespondenceSet(pairs=pairs, provenance=cfg)


def save_correspondences(corr: CorrespondenceSet, path) -> None:
    """CSV dump px,py,pz,qx,qy,qz,similarity in mm."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["px", "py", "pz", "qx", "qy", "qz", "similarity"])
        for fixed, moving, sim in corr.pairs:
            writer.writerow([repr(float(v)) for v in fixed] + [repr(float(v)) for v in moving] + [repr(float(sim))])


def load_correspondences(path) -> CorrespondenceSet:
    with Path(path).open(newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        required = {"px", "py", "pz", "qx", "qy", "qz", "similarity"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise MatchingError(f"correspondence CSV {path} lacks header {sorted(required)}")
        pairs = []
        for row in reader:
            fixed = np.array([float(row["px"]), float(row["py"]), float(row["pz"])])
            moving = np.array([float(row["qx"]), float(row["qy"]), float(row["qz"])])
            pairs.append((fixed, moving, float(row["similarity"])))
    return CorrespondenceSet(pairs=pairs)
