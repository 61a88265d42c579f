"""Spot coordinate handling.

Slides carry two coordinate systems: integer (row, col) grid positions from
the assay layout, and physical pixel positions on the scanned image. Off-grid
pseudo-spots live at half-integer grid coordinates; their pixel positions come
from an affine fit of the original spots. Distances for neighbor search and
for the attention bias are always measured in grid units.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, InsufficientSpotsError, RankDeficiencyError, ShapeError

Array = np.ndarray


@dataclass
class SpotCoords:
    """Grid + physical coordinates for n spots, with pseudo-spot flags."""

    grid: Array  # (n, 2) float64 (row, col); integers for original spots
    phys: Array  # (n, 2) float64 (x, y) in pixels
    is_pseudo: Array  # (n,) bool

    def __post_init__(self):
        self.grid = np.ascontiguousarray(self.grid, dtype=np.float64)
        self.phys = np.ascontiguousarray(self.phys, dtype=np.float64)
        self.is_pseudo = np.ascontiguousarray(self.is_pseudo, dtype=bool)

    @property
    def n(self) -> int:
        return self.grid.shape[0]

    @property
    def n_orig(self) -> int:
        return int((~self.is_pseudo).sum())

    def originals(self) -> Array:
        return self.grid[~self.is_pseudo]

    def violations(self) -> list[str]:
        """All invariant violations, not just the first."""
        out = []
        if not (self.grid.ndim == 2 and self.grid.shape[1] == 2):
            out.append(f"grid must be (n, 2), got {self.grid.shape}")
            return out
        if self.phys.shape != self.grid.shape:
            out.append(f"phys shape {self.phys.shape} != grid shape {self.grid.shape}")
        if self.is_pseudo.shape != (self.n,):
            out.append(f"is_pseudo length {self.is_pseudo.shape} != n={self.n}")
            return out
        orig = self.grid[~self.is_pseudo]
        off_grid = np.flatnonzero(np.any(orig != np.round(orig), axis=1))
        if off_grid.size:
            idx = np.flatnonzero(~self.is_pseudo)[off_grid]
            out.append(f"original spots with non-integer grid coords: {idx.tolist()}")
        seen: dict[tuple[float, float], int] = {}
        for i, (r, c) in enumerate(self.grid):
            key = (float(r), float(c))
            if key in seen:
                out.append(f"spots {seen[key]} and {i} share grid coordinate {key}")
            else:
                seen[key] = i
        if not np.isfinite(self.grid).all():
            out.append("grid contains non-finite values")
        if not np.isfinite(self.phys).all():
            out.append("phys contains non-finite values")
        return out


@dataclass
class AffineTransform:
    """Invertible affine map from grid (row, col) to physical (x, y)."""

    linear: Array  # (2, 2)
    offset: Array  # (2,)

    def __post_init__(self):
        self.linear = np.ascontiguousarray(self.linear, dtype=np.float64)
        self.offset = np.ascontiguousarray(self.offset, dtype=np.float64)
        if abs(np.linalg.det(self.linear)) <= 1e-9:
            raise RankDeficiencyError("affine linear part is singular")

    def apply(self, grid_pts: Array) -> Array:
        pts = np.asarray(grid_pts, dtype=np.float64)
        return pts @ self.linear.T + self.offset


def fit_affine(grid: Array, phys: Array) -> tuple[AffineTransform, float]:
    """Least-squares affine fit of grid -> physical coordinates.

    Returns the transform and the largest point residual in pixels. Needs at
    least 3 non-collinear grid points; otherwise the design matrix is
    rank-deficient and we refuse rather than return a degenerate map.
    """
    grid = np.asarray(grid, dtype=np.float64)
    phys = np.asarray(phys, dtype=np.float64)
    if grid.shape != phys.shape or grid.ndim != 2 or grid.shape[1] != 2:
        raise ShapeError(f"grid {grid.shape} and phys {phys.shape} must both be (n, 2)")
    n = grid.shape[0]
    design = np.column_stack([grid, np.ones(n)])
    coef, _, rank, _ = np.linalg.lstsq(design, phys, rcond=None)
    if rank < 3:
        raise RankDeficiencyError(f"grid points are collinear (design rank {rank} < 3)")
    transform = AffineTransform(linear=coef[:2].T, offset=coef[2])
    residual = float(np.linalg.norm(design @ coef - phys, axis=1).max())
    return transform, residual


def gen_pseudo_candidates(coords: SpotCoords) -> Array:
    """Half-integer lattice points inside the originals' bounding box.

    Emits every (row, col) in the box with an offset of exactly 0.5 in row,
    col, or both. Integer lattice points are skipped, so no candidate can
    collide with an original spot. Order is row-major and deterministic.
    """
    orig = coords.originals()
    if orig.shape[0] == 0:
        return np.empty((0, 2))
    # doubled coordinates are integers, so parity tests are exact
    r2 = np.arange(int(round(2 * orig[:, 0].min())), int(round(2 * orig[:, 0].max())) + 1)
    c2 = np.arange(int(round(2 * orig[:, 1].min())), int(round(2 * orig[:, 1].max())) + 1)
    rr, cc = np.meshgrid(r2, c2, indexing="ij")
    keep = (rr % 2 != 0) | (cc % 2 != 0)
    return np.column_stack([rr[keep], cc[keep]]) / 2.0


def avg_nn_distance(coords: SpotCoords) -> float:
    """Mean grid-space distance from each original spot to its nearest other."""
    orig = coords.originals()
    n = orig.shape[0]
    if n < 2:
        raise InsufficientSpotsError(f"need at least 2 original spots, got {n}")
    d2 = _sq_dists(orig, orig)
    np.fill_diagonal(d2, np.inf)
    return float(np.sqrt(d2.min(axis=1)).mean())


def filter_pseudo(
    candidates: Array,
    coords: SpotCoords,
    threshold: float,
    transform: AffineTransform,
) -> SpotCoords:
    """Keep candidates within ``threshold`` of some original spot.

    Returned coordinates are the pseudo-spot additions only, flagged
    is_pseudo with pixel positions assigned through the affine fit.
    """
    if threshold <= 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    candidates = np.asarray(candidates, dtype=np.float64).reshape(-1, 2)
    if candidates.shape[0] == 0:
        return SpotCoords(np.empty((0, 2)), np.empty((0, 2)), np.empty(0, dtype=bool))
    d2 = _sq_dists(candidates, coords.originals())
    kept = candidates[np.sqrt(d2.min(axis=1)) <= threshold]
    return SpotCoords(kept, transform.apply(kept), np.ones(kept.shape[0], dtype=bool))


@dataclass
class KnnGraph:
    """Per-query neighbor lists, ascending by distance, self excluded."""

    indices: Array  # (n_query, k) int64
    distances: Array  # (n_query, k) float64, non-decreasing along each row
    n_keys: int

    @property
    def k(self) -> int:
        return self.indices.shape[1]

    def as_mask(self) -> Array:
        """Expand to a boolean (n_query, n_keys) attention mask."""
        mask = np.zeros((self.indices.shape[0], self.n_keys), dtype=bool)
        np.put_along_axis(mask, self.indices, True, axis=1)
        return mask


def knn_indices(query_coords: Array, key_coords: Array, k: int) -> KnnGraph:
    """Brute-force k nearest keys per query in grid space.

    A key at distance exactly 0 is the query itself (no two spots share a
    grid coordinate) and is excluded. Ties break by ascending key index;
    sorting happens on exact squared distances so ties are exact for
    half-integer grids.
    """
    query = np.asarray(query_coords, dtype=np.float64)
    keys = np.asarray(key_coords, dtype=np.float64)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    d2 = _sq_dists(query, keys)
    self_hits = d2 == 0.0
    available = int((keys.shape[0] - self_hits.sum(axis=1)).min())
    if k > available:
        raise CapacityError(f"requested k={k} neighbors but only {available} keys available")
    d2 = np.where(self_hits, np.inf, d2)
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    dist = np.sqrt(np.take_along_axis(d2, order, axis=1))
    return KnnGraph(indices=order.astype(np.int64), distances=dist, n_keys=keys.shape[0])


def bias_matrix(query_coords: Array, key_coords: Array, m_h: float) -> Array:
    """Additive attention penalty: slope times grid Euclidean distance."""
    if m_h >= 0:
        raise ValueError(f"bias slope must be negative, got {m_h}")
    return m_h * grid_distances(query_coords, key_coords)


def grid_distances(query_coords: Array, key_coords: Array) -> Array:
    """Pairwise grid Euclidean distance matrix."""
    a = np.asarray(query_coords, dtype=np.float64)
    b = np.asarray(key_coords, dtype=np.float64)
    return np.sqrt(_sq_dists(a, b))


def _sq_dists(a: Array, b: Array) -> Array:
    """Exact pairwise squared distances for 2-D points."""
    diff = a[:, None, :] - b[None, :, :]
    return (diff * diff).sum(axis=2)
