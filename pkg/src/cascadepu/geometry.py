"""Point-set kernels: neighbour search, farthest point sampling and distance metrics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .tensor import Tensor, _accumulate, _make, _note_branch

BRUTE_FORCE_LIMIT = 4096
_CHUNK_ELEMS = 1 << 22


@dataclass(frozen=True)
class Normalization:
    """Maps raw coordinates to the unit sphere: ``(p - centroid) / scale``."""

    centroid: np.ndarray
    scale: float

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.centroid) / self.scale

    def invert(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) * self.scale + self.centroid


@dataclass
class PointCloud:
    points: np.ndarray
    normalization: Normalization | None = None
    patch_id: int | None = None
    faces: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"PointCloud expects an M x 3 array, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("PointCloud coordinates must be finite")
        self.points = pts

    def __len__(self) -> int:
        return self.points.shape[0]


def _coords(x) -> np.ndarray:
    if isinstance(x, PointCloud):
        return x.points
    if isinstance(x, Tensor):
        return x.data
    arr = np.asarray(x, dtype=np.float64)
    return arr.reshape(1, 3) if arr.shape == (3,) else arr


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Explicit per-axis differences rather than the |a|^2 - 2ab + |b|^2
    # expansion, so equal distances compare equal and tie-breaking is
    # reproducible. Every distance in this module is summed x, y, z in order.
    d = np.subtract.outer(a[:, 0], b[:, 0])
    d *= d
    for ax in (1, 2):
        t = np.subtract.outer(a[:, ax], b[:, ax])
        t *= t
        d += t
    return d


def _sq_norms(diff: np.ndarray) -> np.ndarray:
    return diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1] + diff[:, 2] * diff[:, 2]


def _k_smallest(d: np.ndarray, k: int) -> np.ndarray:
    """Column indices of the k smallest entries per row, ascending, ties by index."""
    if k == d.shape[1]:
        return np.argsort(d, axis=1, kind="stable")
    part = np.argpartition(d, k - 1, axis=1)[:, :k]
    vals = np.take_along_axis(d, part, axis=1)
    order = np.lexsort((part, vals), axis=-1)
    out = np.take_along_axis(part, order, axis=1)
    # argpartition breaks ties at the k-th value arbitrarily; redo those rows.
    kth = vals.max(axis=1)
    crowded = np.flatnonzero((d <= kth[:, None]).sum(axis=1) > k)
    if crowded.size:
        out[crowded] = np.argsort(d[crowded], axis=1, kind="stable")[:, :k]
    return out


def _chunks(n_rows: int, n_cols: int):
    step = max(1, _CHUNK_ELEMS // max(1, n_cols))
    for start in range(0, n_rows, step):
        yield start, min(n_rows, start + step)


def nearest(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """For each row of ``a``: index of the closest row of ``b`` and the squared distance.

    The tree only proposes the match; the returned distance is recomputed
    exactly from coordinates.
    """
    _, idx = cKDTree(b).query(a, k=1)
    idx = np.asarray(idx, dtype=np.int64)
    return idx, _sq_norms(a - b[idx])


def _knn_brute(points: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    out = np.empty((queries.shape[0], k), dtype=np.int64)
    for s, e in _chunks(queries.shape[0], points.shape[0]):
        out[s:e] = _k_smallest(_sq_dists(queries[s:e], points), k)
    return out


def _knn_tree(points: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    tree = cKDTree(points)
    dist, _ = tree.query(queries, k=k)
    dist = dist.reshape(queries.shape[0], k)
    out = np.empty((queries.shape[0], k), dtype=np.int64)
    for q in range(queries.shape[0]):
        # Collect everything inside the k-th radius, then rank with the same
        # exact distances and index tie-break the brute-force path uses.
        radius = dist[q, -1] * (1 + 1e-9) + 1e-12
        cand = np.asarray(tree.query_ball_point(queries[q], radius), dtype=np.int64)
        d2 = _sq_norms(points[cand] - queries[q])
        order = np.lexsort((cand, d2))
        out[q] = cand[order[:k]]
    return out


def knn_indices(cloud, queries, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest cloud points per query, nearest first, ties by index."""
    pts, qs = _coords(cloud), _coords(queries)
    m = pts.shape[0]
    if k < 1 or k > m:
        raise ValueError(f"knn_indices: k={k} must lie in [1, {m}]")
    if m <= BRUTE_FORCE_LIMIT:
        return _knn_brute(pts, qs, k)
    return _knn_tree(pts, qs, k)


def farthest_point_sample(cloud, m: int, seed_index: int = 0) -> np.ndarray:
    """Greedy max-min subset selection starting from ``seed_index``.

    Ties go to the lowest index; already-chosen points are never re-picked,
    even when the remaining points coincide with them.
    """
    pts = _coords(cloud)
    n = pts.shape[0]
    if m < 1 or m > n:
        raise ValueError(f"farthest_point_sample: m={m} must lie in [1, {n}]")
    if not 0 <= seed_index < n:
        raise ValueError(f"farthest_point_sample: seed index {seed_index} out of range")
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = seed_index
    mind = _sq_norms(pts - pts[seed_index])
    mind[seed_index] = -1.0
    for i in range(1, m):
        j = int(np.argmax(mind))
        chosen[i] = j
        np.minimum(mind, _sq_norms(pts - pts[j]), out=mind)
        mind[chosen[: i + 1]] = -1.0
    return chosen


def chamfer_distance(p, q) -> Tensor:
    """Mean squared nearest-neighbour distance, summed over both directions.

    Differentiable in whichever argument is a tensor with ``requires_grad``;
    the nearest-neighbour matches are held fixed in the backward pass.
    """
    pt = p if isinstance(p, Tensor) else Tensor(_coords(p))
    qt = q if isinstance(q, Tensor) else Tensor(_coords(q))
    a, b = pt.data, qt.data
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("chamfer_distance: both point sets must be non-empty")
    ab, dab = nearest(a, b)
    ba, dba = nearest(b, a)
    _note_branch(ab)
    _note_branch(ba)
    na, nb = a.shape[0], b.shape[0]
    value = dab.mean() + dba.mean()

    def bw(g):
        g = float(np.asarray(g).reshape(-1)[0])
        ra = a - b[ab]
        rb = b - a[ba]
        if pt.requires_grad:
            ga = (2.0 * g / na) * ra
            np.add.at(ga, ba, (-2.0 * g / nb) * rb)
            _accumulate(pt, ga)
        if qt.requires_grad:
            gb = (2.0 * g / nb) * rb
            np.add.at(gb, ab, (-2.0 * g / na) * ra)
            _accumulate(qt, gb)

    return _make(np.asarray(value), (pt, qt), "chamfer", bw)


def hausdorff_distance(p, q) -> float:
    """Symmetric Hausdorff distance on Euclidean (not squared) distances."""
    a, b = _coords(p), _coords(q)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("hausdorff_distance: both point sets must be non-empty")
    _, dab = nearest(a, b)
    _, dba = nearest(b, a)
    return float(np.sqrt(max(dab.max(), dba.max())))


def point_to_surface(p, surface) -> float:
    """Mean unsigned distance from the points to an analytic surface or triangle mesh."""
    pts = _coords(p)
    if pts.shape[0] == 0:
        raise ValueError("point_to_surface: empty point set")
    return float(np.mean(surface.distance(pts)))


def normalize_to_unit_sphere(cloud) -> tuple[PointCloud, Normalization]:
    pts = _coords(cloud)
    centroid = pts.mean(axis=0)
    centred = pts - centroid
    scale = float(np.sqrt(_sq_norms(centred).max()))
    if scale == 0.0:
        scale = 1.0
    record = Normalization(centroid=centroid, scale=scale)
    return PointCloud(centred / scale, normalization=record), record


def denormalize(cloud, record: Normalization) -> PointCloud:
    return PointCloud(record.invert(_coords(cloud)))
