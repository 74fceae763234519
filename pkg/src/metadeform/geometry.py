"""Point clouds, exact nearest-neighbour search, Chamfer distance and rotations.

Squared distances are always evaluated as ``dx*dx + dy*dy + dz*dz`` in that
order, so the tree and the exhaustive scan produce bit-identical values and
the lowest-index tie rule is decided on identical numbers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyCloudError, ShapeError

DEFAULT_LEAF_SIZE = 64
_BRUTE_CHUNK = 1 << 20  # pair evaluations per block in the exhaustive scan


@dataclass
class PointCloud:
    """An ordered ``(N, 3)`` array of points.  Index is identity."""

    points: np.ndarray
    name: str | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ShapeError(f"points must have shape (N, 3), got {pts.shape}")
        self.points = pts

    def __len__(self):
        return self.points.shape[0]

    def __array__(self, dtype=None, copy=None):
        return self.points if dtype is None else self.points.astype(dtype)


def as_points(cloud, allow_empty=False):
    """Return the ``(N, 3)`` array behind a cloud or array-like."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ShapeError(f"points must have shape (N, 3), got {pts.shape}")
    if not allow_empty and pts.shape[0] == 0:
        raise EmptyCloudError("point cloud is empty")
    return pts


def _sqdist(a, b):
    # a (..., 3), b (..., 3) broadcastable; fixed evaluation order
    d = a - b
    return d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]


def brute_force_nearest(reference, queries):
    """Exhaustive nearest-neighbour scan.

    Returns ``(indices, squared_distances)``; ties go to the lowest index.
    """
    ref = as_points(reference)
    q = as_points(queries, allow_empty=True)
    idx = np.empty(len(q), dtype=np.intp)
    dist = np.empty(len(q), dtype=np.result_type(ref.dtype, q.dtype))
    step = max(1, _BRUTE_CHUNK // len(ref))
    for start in range(0, len(q), step):
        block = _sqdist(q[start : start + step, None, :], ref[None, :, :])
        j = np.argmin(block, axis=1)
        idx[start : start + step] = j
        dist[start : start + step] = block[np.arange(len(j)), j]
    return idx, dist


class NNIndex:
    """Axis-aligned splitting tree for exact nearest-neighbour queries.

    Each internal node splits at the median of its widest axis; leaves hold
    at most ``leaf_size`` points, stored in ascending index order.  A cloud no
    larger than ``leaf_size`` is a single leaf, i.e. an exhaustive scan.

    Query results equal :func:`brute_force_nearest` exactly, including the
    lowest-index tie rule.  The index is immutable after construction.
    """

    def __init__(self, cloud, leaf_size=DEFAULT_LEAF_SIZE):
        self.points = np.ascontiguousarray(as_points(cloud))
        self.leaf_size = max(1, int(leaf_size))
        # internal nodes: axis, split value, children; leaves: point ids and bbox
        self._axis = []
        self._split = []
        self._left = []
        self._right = []
        self._leaf_of = []  # node -> leaf number or -1
        self.leaf_ids = []
        lo, hi = [], []
        self._build(np.arange(len(self.points)), lo, hi)
        self.leaf_lo = np.array(lo)
        self.leaf_hi = np.array(hi)
        self._axis = np.array(self._axis)
        self._split = np.array(self._split, dtype=self.points.dtype)
        self._left = np.array(self._left)
        self._right = np.array(self._right)
        self._leaf_of = np.array(self._leaf_of)

    def __len__(self):
        return len(self.points)

    def _new_node(self):
        self._axis.append(-1)
        self._split.append(0.0)
        self._left.append(-1)
        self._right.append(-1)
        self._leaf_of.append(-1)
        return len(self._axis) - 1

    def _build(self, ids, lo, hi):
        node = self._new_node()
        pts = self.points[ids]
        if len(ids) <= self.leaf_size:
            self._leaf_of[node] = len(self.leaf_ids)
            self.leaf_ids.append(np.sort(ids))
            lo.append(pts.min(axis=0))
            hi.append(pts.max(axis=0))
            return node
        extent = pts.max(axis=0) - pts.min(axis=0)
        axis = int(np.argmax(extent))
        order = np.argsort(pts[:, axis], kind="stable")
        half = len(ids) // 2
        self._axis[node] = axis
        self._split[node] = pts[order[half], axis]
        left = self._build(ids[order[:half]], lo, hi)
        right = self._build(ids[order[half:]], lo, hi)
        self._left[node] = left
        self._right[node] = right
        return node

    def _descend(self, q):
        node = np.zeros(len(q), dtype=np.intp)
        while True:
            inner = self._leaf_of[node] < 0
            if not inner.any():
                return self._leaf_of[node]
            n = node[inner]
            go_right = q[inner, self._axis[n]] >= self._split[n]
            node[inner] = np.where(go_right, self._right[n], self._left[n])

    def query(self, p):
        """Nearest stored point to a single query: ``(index, squared distance)``."""
        p = np.asarray(p, dtype=self.points.dtype).reshape(3)
        best = [np.inf, -1]
        self._query_node(0, p, best)
        return int(best[1]), float(best[0])

    def _query_node(self, node, p, best):
        leaf = self._leaf_of[node]
        if leaf >= 0:
            box = np.clip(p, self.leaf_lo[leaf], self.leaf_hi[leaf])
            if _sqdist(p, box) > best[0]:
                return
            ids = self.leaf_ids[leaf]
            d = _sqdist(self.points[ids], p)
            j = int(np.argmin(d))
            if d[j] < best[0] or (d[j] == best[0] and ids[j] < best[1]):
                best[0], best[1] = d[j], ids[j]
            return
        axis, split = self._axis[node], self._split[node]
        near, far = (self._right[node], self._left[node]) if p[axis] >= split else (self._left[node], self._right[node])
        self._query_node(near, p, best)
        gap = p[axis] - split
        # the far side may still hold an equidistant lower index, hence <=
        if gap * gap <= best[0]:
            self._query_node(far, p, best)

    def query_many(self, queries):
        """Vectorised exact search: ``(indices, squared distances)`` per query."""
        q = as_points(queries, allow_empty=True).astype(self.points.dtype, copy=False)
        n = len(q)
        best_d = np.full(n, np.inf, dtype=self.points.dtype)
        best_i = np.full(n, -1, dtype=np.intp)
        if n == 0:
            return best_i, best_d
        home = self._descend(q)
        for leaf in np.unique(home):
            sel = np.nonzero(home == leaf)[0]
            self._scan_leaf(leaf, q, sel, best_d, best_i)
        for leaf, (lo, hi) in enumerate(zip(self.leaf_lo, self.leaf_hi)):
            box = np.clip(q, lo, hi)
            sel = np.nonzero((_sqdist(q, box) <= best_d) & (home != leaf))[0]
            if len(sel):
                self._scan_leaf(leaf, q, sel, best_d, best_i)
        return best_i, best_d

    def _scan_leaf(self, leaf, q, sel, best_d, best_i):
        ids = self.leaf_ids[leaf]
        pts = self.points[ids]
        step = max(1, _BRUTE_CHUNK // len(ids))
        for start in range(0, len(sel), step):
            rows = sel[start : start + step]
            d = _sqdist(q[rows, None, :], pts[None, :, :])
            j = np.argmin(d, axis=1)
            dj = d[np.arange(len(rows)), j]
            ij = ids[j]
            better = (dj < best_d[rows]) | ((dj == best_d[rows]) & (ij < best_i[rows]))
            rows = rows[better]
            best_d[rows] = dj[better]
            best_i[rows] = ij[better]


def nearest(index, p):
    """Exact nearest neighbour of ``p`` in ``index``: ``(index, squared distance)``."""
    return index.query(p)


def chamfer_terms(A, B, nn="tree"):
    """Nearest-neighbour matches in both directions.

    Returns ``(a_to_b_index, a_to_b_sqdist, b_to_a_index, b_to_a_sqdist)``.
    ``nn`` selects ``"tree"`` (:class:`NNIndex`) or ``"brute"``.
    """
    a, b = as_points(A), as_points(B)
    if nn == "brute":
        ia, da = brute_force_nearest(b, a)
        ib, db = brute_force_nearest(a, b)
    else:
        ia, da = NNIndex(b).query_many(a)
        ib, db = NNIndex(a).query_many(b)
    return ia, da, ib, db


def chamfer(A, B, nn="tree"):
    """Sum-form Chamfer distance.

    ``sum_a min_b |a-b|^2 + sum_b min_a |a-b|^2`` in squared model units.
    """
    _, da, _, db = chamfer_terms(A, B, nn=nn)
    return float(da.sum() + db.sum())


def chamfer_mean(A, B, nn="tree"):
    """Mean-per-point Chamfer: each direction averaged over its own points.

    Independent of cloud sizes, so clouds of different resolution compare.
    """
    _, da, _, db = chamfer_terms(A, B, nn=nn)
    return float(da.mean() + db.mean())


# -- rotations ---------------------------------------------------------------


def rotation_y(alpha):
    """Counterclockwise rotation about +y (pitch)."""
    c, s = np.cos(alpha), np.sin(alpha)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotation_z(beta):
    """Counterclockwise rotation about +z (yaw)."""
    c, s = np.cos(beta), np.sin(beta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class RotationPair:
    """Pitch ``alpha`` about y and yaw ``beta`` about z, in radians."""

    alpha: float = 0.0
    beta: float = 0.0

    def matrix(self):
        """``R_z(beta) @ R_y(alpha)``: pitch first, then yaw."""
        return rotation_z(self.beta) @ rotation_y(self.alpha)


def rotation_apply(cloud, rot, inverse=False):
    """Rotate every point by ``rot.matrix()`` (or its inverse)."""
    pts = as_points(cloud, allow_empty=True)
    R = rot.matrix()
    if inverse:
        R = R.T
    out = pts @ R.T
    return PointCloud(out, cloud.name) if isinstance(cloud, PointCloud) else out


def normalize_centroid(cloud):
    """Translate so the centroid is the origin.  Returns ``(cloud, centroid)``."""
    pts = as_points(cloud)
    centroid = pts.mean(axis=0)
    out = pts - centroid
    if isinstance(cloud, PointCloud):
        out = PointCloud(out, cloud.name)
    return out, centroid
