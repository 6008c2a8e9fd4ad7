"""Brute-force point cloud primitives: FPS, kNN and ground-truth boundary sets.

Every routine here is exact and deterministic. Distance ties are always
resolved in favour of the smaller point index.
"""

from dataclasses import dataclass

import numpy as np

_QUERY_CHUNK = 128


class GeometryError(ValueError):
    """Raised when a geometric precondition is violated."""


@dataclass(frozen=True)
class PointSet:
    coords: np.ndarray
    normals: np.ndarray

    def __post_init__(self):
        coords = np.ascontiguousarray(self.coords, dtype=np.float64)
        normals = np.ascontiguousarray(self.normals, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 3 or coords.shape[0] < 1:
            raise GeometryError(f"coords must be N x 3 with N >= 1, got {coords.shape}")
        if normals.shape != coords.shape:
            raise GeometryError(f"normals shape {normals.shape} != coords shape {coords.shape}")
        if not (np.isfinite(coords).all() and np.isfinite(normals).all()):
            raise GeometryError("point set contains non-finite values")
        norms = np.linalg.norm(normals, axis=1)
        if np.abs(norms - 1.0).max() > 1e-4:
            raise GeometryError("normals must be unit length")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "normals", normals)

    def __len__(self):
        return self.coords.shape[0]

    @classmethod
    def from_coords(cls, coords):
        """Point set with placeholder +z normals, for geometry-only callers."""
        coords = np.asarray(coords, dtype=np.float64)
        normals = np.zeros_like(coords)
        normals[:, 2] = 1.0
        return cls(coords, normals)


def _as_coords(points):
    if isinstance(points, PointSet):
        return points.coords
    coords = np.asarray(points, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise GeometryError(f"expected N x 3 coordinates, got {coords.shape}")
    return coords


def farthest_point_sample(points, m: int, start_index: int = 0) -> np.ndarray:
    """Greedy farthest point sampling.

    Returns ``m`` distinct indices. The first is ``start_index``; every later
    pick maximises the squared distance to the already selected set, with
    ties going to the smallest index (``np.argmax`` returns the first max).
    """
    coords = _as_coords(points)
    n = coords.shape[0]
    if not 1 <= m <= n:
        raise GeometryError(f"m must lie in [1, {n}], got {m}")
    if not 0 <= start_index < n:
        raise GeometryError(f"start_index must lie in [0, {n}), got {start_index}")

    selected = np.empty(m, dtype=np.int64)
    selected[0] = start_index
    min_d2 = np.full(n, np.inf)
    current = start_index
    for i in range(1, m):
        d2 = ((coords - coords[current]) ** 2).sum(axis=1)
        np.minimum(min_d2, d2, out=min_d2)
        min_d2[current] = -1.0
        current = int(np.argmax(min_d2))
        selected[i] = current
    return selected


def pairwise_sq_dists(queries, source) -> np.ndarray:
    """Squared distances, Q x N, computed coordinate-wise (no expansion trick)."""
    q = _as_coords(queries)
    s = _as_coords(source)
    out = np.zeros((q.shape[0], s.shape[0]))
    for axis in range(3):
        diff = q[:, axis, None] - s[None, :, axis]
        out += diff * diff
    return out


def _sorted_k_smallest(d2: np.ndarray, k: int) -> np.ndarray:
    """Row-wise k smallest columns ordered by (distance, index)."""
    n_cols = d2.shape[1]
    if k == n_cols:
        return np.argsort(d2, axis=1, kind="stable")
    part = np.argpartition(d2, k - 1, axis=1)[:, :k]
    kth = np.take_along_axis(d2, part, axis=1).max(axis=1)
    # argpartition picks an arbitrary member of a tie straddling the k-th slot
    ambiguous = (d2 <= kth[:, None]).sum(axis=1) > k
    if ambiguous.any():
        rows = np.flatnonzero(ambiguous)
        part[rows] = np.argsort(d2[rows], axis=1, kind="stable")[:, :k]
    vals = np.take_along_axis(d2, part, axis=1)
    # sort by index, then stable sort by value == lexicographic (value, index)
    by_index = np.argsort(part, axis=1, kind="stable")
    part = np.take_along_axis(part, by_index, axis=1)
    vals = np.take_along_axis(vals, by_index, axis=1)
    order = np.argsort(vals, axis=1, kind="stable")
    return np.take_along_axis(part, order, axis=1)


def knn_indices(source, queries, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest source points for every query (Q x k).

    A query coinciding with a source point gets that point as its own
    first neighbour.
    """
    src = _as_coords(source)
    qry = _as_coords(queries)
    n = src.shape[0]
    if not 1 <= k <= n:
        raise GeometryError(f"k must lie in [1, {n}], got {k}")
    out = np.empty((qry.shape[0], k), dtype=np.int64)
    for lo in range(0, qry.shape[0], _QUERY_CHUNK):
        hi = min(lo + _QUERY_CHUNK, qry.shape[0])
        out[lo:hi] = _sorted_k_smallest(pairwise_sq_dists(qry[lo:hi], src), k)
    return out


def knn_excluding_self(points, k: int) -> np.ndarray:
    """k nearest neighbours of each point among the *other* points (N x k)."""
    coords = _as_coords(points)
    n = coords.shape[0]
    if not 1 <= k < n:
        raise GeometryError(f"k must lie in [1, {n - 1}], got {k}")
    out = np.empty((n, k), dtype=np.int64)
    for lo in range(0, n, _QUERY_CHUNK):
        hi = min(lo + _QUERY_CHUNK, n)
        d2 = pairwise_sq_dists(coords[lo:hi], coords)
        d2[np.arange(hi - lo), np.arange(lo, hi)] = np.inf
        out[lo:hi] = _sorted_k_smallest(d2, k)
    return out


def extract_boundary_set(points, instance_labels, k_b: int = 16) -> np.ndarray:
    """Boolean mask of points with a differently labelled point among their
    ``k_b`` nearest neighbours (self excluded)."""
    labels = np.asarray(instance_labels)
    coords = _as_coords(points)
    n = coords.shape[0]
    if labels.shape != (n,):
        raise GeometryError(f"expected {n} labels, got shape {labels.shape}")
    if k_b < 1 or k_b >= n:
        raise GeometryError(f"k_b must lie in [1, {n - 1}], got {k_b}")
    if (labels < 0).any():
        raise GeometryError("instance labels must be non-negative")
    nbrs = knn_excluding_self(coords, k_b)
    return (labels[nbrs] != labels[:, None]).any(axis=1)
