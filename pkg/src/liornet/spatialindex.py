"""Exact radius-count and k-nearest-neighbour queries over a scan.

Candidates come from a k-d tree queried with a slightly inflated radius;
membership is then decided with the canonical test
``dx*dx + dy*dy + dz*dz <= r*r`` in float64, so answers are exactly those
of a brute-force scan using the same arithmetic.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

_INFLATE = 1e-9


def sq_dist(a, b) -> np.ndarray:
    """Canonical squared distance, broadcasting over leading axes."""
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]


class NeighborIndex:
    """Immutable spatial index over an (N, 3) array of positions."""

    def __init__(self, xyz):
        pts = np.ascontiguousarray(np.asarray(xyz, dtype=np.float64).reshape(-1, 3))
        pts.flags.writeable = False
        self.points = pts
        self._tree = cKDTree(pts, balanced_tree=True, compact_nodes=True) if len(pts) else None

    @property
    def point_count(self) -> int:
        return len(self.points)

    def _query_point(self, query):
        if isinstance(query, (int, np.integer)):
            return self.points[int(query)], int(query)
        return np.asarray(query, dtype=np.float64).reshape(3), -1

    def radius_count(self, query, r: float) -> int:
        """Points within ``r`` (boundary inclusive).

        ``query`` is either a member index, which is then excluded from its
        own count, or a coordinate triple, for which every point counts.
        """
        if not r > 0:
            raise ValueError(f"radius must be positive, got {r}")
        if self._tree is None:
            return 0
        q, self_idx = self._query_point(query)
        cand = np.asarray(self._tree.query_ball_point(q, r * (1 + _INFLATE) + _INFLATE), dtype=np.int64)
        hit = cand[sq_dist(self.points[cand], q) <= r * r]
        return int(len(hit) - (self_idx in hit))

    def radius_counts(self, radii, members=None) -> np.ndarray:
        """Batch :meth:`radius_count` for member points (self excluded).

        ``radii`` is a scalar or one radius per queried member.
        """
        members = np.arange(self.point_count) if members is None else np.asarray(members, dtype=np.int64)
        radii = np.broadcast_to(np.asarray(radii, dtype=np.float64), members.shape)
        if len(members) and not (radii > 0).all():
            raise ValueError("radii must be positive")
        if self._tree is None or len(members) == 0:
            return np.zeros(len(members), dtype=np.int64)
        q = self.points[members]
        lists = self._tree.query_ball_point(q, radii * (1 + _INFLATE) + _INFLATE, return_sorted=False)
        lens = np.fromiter((len(l) for l in lists), dtype=np.int64, count=len(lists))
        cand = np.fromiter((j for l in lists for j in l), dtype=np.int64, count=int(lens.sum()))
        owner = np.repeat(np.arange(len(members)), lens)
        ok = (sq_dist(self.points[cand], q[owner]) <= radii[owner] ** 2) & (cand != members[owner])
        return np.bincount(owner[ok], minlength=len(members)).astype(np.int64)

    def knn(self, query, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(indices, distances)`` of the k nearest points, ascending.

        Ties are broken by lower point index. A member query excludes itself;
        fewer than k results come back when the cloud is too small.
        """
        if k < 1:
            raise ValueError("k must be >= 1")
        q, self_idx = self._query_point(query)
        idx, dist = self._knn_rows(q[None, :], np.array([self_idx]), k)
        keep = idx[0] >= 0
        return idx[0][keep], dist[0][keep]

    def knn_all(self, k: int, members=None) -> tuple[np.ndarray, np.ndarray]:
        """k nearest neighbours of member points; rows padded with -1 / inf."""
        if k < 1:
            raise ValueError("k must be >= 1")
        members = np.arange(self.point_count) if members is None else np.asarray(members, dtype=np.int64)
        return self._knn_rows(self.points[members], members, k)

    def mean_knn_distance(self, k: int, members=None) -> np.ndarray:
        """Mean distance to the k nearest other points (fewer if the cloud is small)."""
        _, dist = self.knn_all(k, members)
        finite = np.isfinite(dist)
        count = finite.sum(axis=1)
        total = np.where(finite, dist, 0.0).sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(count > 0, total / np.maximum(count, 1), np.inf)

    def _knn_rows(self, q, self_idx, k):
        m = len(q)
        out_idx = np.full((m, k), -1, dtype=np.int64)
        out_dist = np.full((m, k), np.inf)
        n = self.point_count
        if n == 0 or m == 0:
            return out_idx, out_dist
        want = min(k + 1, n)
        # the k-th distance bounds the answer; re-query that ball to catch ties
        d_tree, _ = self._tree.query(q, k=want)
        d_tree = np.asarray(d_tree).reshape(m, want)
        bound = d_tree[:, -1] * (1 + 1e-7) + 1e-9
        lists = self._tree.query_ball_point(q, bound, return_sorted=False)
        for row, cand in enumerate(lists):
            cand = np.asarray(cand, dtype=np.int64)
            cand = cand[cand != self_idx[row]]
            d2 = sq_dist(self.points[cand], q[row])
            order = np.lexsort((cand, d2))[:k]
            out_idx[row, :len(order)] = cand[order]
            out_dist[row, :len(order)] = np.sqrt(d2[order])
        return out_idx, out_dist


def build(xyz_or_cloud) -> NeighborIndex:
    xyz = getattr(xyz_or_cloud, "xyz", xyz_or_cloud)
    return NeighborIndex(xyz)
