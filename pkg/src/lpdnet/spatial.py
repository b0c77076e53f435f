"""Exact k-nearest-neighbour search over d-dimensional points.

Distances are squared Euclidean throughout. Ties are broken by the lower point
index, which makes results deterministic regardless of backend or thread count.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._accel import njit, prange, use_numba


class SpatialError(ValueError):
    pass


@dataclass(frozen=True)
class NeighborList:
    indices: np.ndarray
    distances: np.ndarray  # squared, ascending

    def __len__(self):
        return len(self.indices)


class KdTree:
    """Immutable kd-tree over an (N, d) array; safe to query from many threads."""

    def __init__(self, points, leaf_size: int = 16):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim == 1:
            raise SpatialError("points must be a 2-D array of d-dimensional vectors")
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise SpatialError("cannot build a tree over an empty point set")
        if pts.shape[1] == 0:
            raise SpatialError("points must have dimension >= 1")
        if leaf_size < 1:
            raise SpatialError("leaf_size must be >= 1")
        self.data = np.ascontiguousarray(pts)
        self.n, self.dimension = pts.shape
        self.leaf_size = int(leaf_size)
        self._build()

    def _build(self):
        perm = np.arange(self.n, dtype=np.int64)
        start, end, left, right, lo, hi = [], [], [], [], [], []

        def new_node(s, e):
            sub = self.data[perm[s:e]]
            start.append(s)
            end.append(e)
            left.append(-1)
            right.append(-1)
            lo.append(sub.min(axis=0))
            hi.append(sub.max(axis=0))
            return len(start) - 1

        root = new_node(0, self.n)
        stack = [root]
        while stack:
            node = stack.pop()
            s, e = start[node], end[node]
            if e - s <= self.leaf_size:
                continue
            spread = hi[node] - lo[node]
            dim = int(np.argmax(spread))
            if spread[dim] == 0.0:
                continue  # all points identical: keep as a leaf
            seg = perm[s:e]
            order = np.argsort(self.data[seg, dim], kind="stable")
            perm[s:e] = seg[order]
            mid = s + (e - s) // 2
            left[node] = new_node(s, mid)
            right[node] = new_node(mid, e)
            stack.extend((left[node], right[node]))

        self.perm = perm
        self.node_start = np.asarray(start, dtype=np.int64)
        self.node_end = np.asarray(end, dtype=np.int64)
        self.node_left = np.asarray(left, dtype=np.int64)
        self.node_right = np.asarray(right, dtype=np.int64)
        self.node_lo = np.ascontiguousarray(lo, dtype=np.float64)
        self.node_hi = np.ascontiguousarray(hi, dtype=np.float64)

    def __len__(self):
        return self.n

    def query(self, queries, k: int, exclude=None) -> tuple[np.ndarray, np.ndarray]:
        """Batch kNN. Returns ``(indices, sq_distances)``, each (Q, k)."""
        q = np.ascontiguousarray(np.asarray(queries, dtype=np.float64))
        if q.ndim == 1:
            q = q[None, :]
        if q.shape[1] != self.dimension:
            raise SpatialError(f"query dimension {q.shape[1]} does not match tree dimension {self.dimension}")
        if k < 1:
            raise SpatialError("k must be >= 1")
        if exclude is None:
            excl = np.full(q.shape[0], -1, dtype=np.int64)
            avail = self.n
        else:
            excl = np.broadcast_to(np.asarray(exclude, dtype=np.int64), (q.shape[0],)).copy()
            avail = self.n - int(np.any((excl >= 0) & (excl < self.n)))
        if k > avail:
            raise SpatialError(f"k={k} exceeds the {avail} available points")
        if use_numba():
            return _knn_tree_kernel(self.data, self.perm, self.node_start, self.node_end,
                                    self.node_left, self.node_right, self.node_lo, self.node_hi,
                                    q, k, excl)
        return knn_bruteforce_numpy(self.data, q, k, excl)


def build(points, leaf_size: int = 16) -> KdTree:
    return KdTree(points, leaf_size)


def knn(tree: KdTree, query, k: int, exclude: int | None = None) -> NeighborList:
    """Single-query kNN with optional exclusion of one stored index."""
    idx, d2 = tree.query(np.asarray(query, dtype=np.float64)[None, :], k,
                         None if exclude is None else np.array([exclude]))
    return NeighborList(idx[0], d2[0])


def self_knn(points, k: int, exclude_self: bool = True, leaf_size: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """kNN of every point against its own set, optionally excluding itself."""
    tree = KdTree(points, leaf_size)
    excl = np.arange(tree.n) if exclude_self else None
    return tree.query(tree.data, k, excl)


# ---------------------------------------------------------------------------
# kernels


def knn_bruteforce_numpy(data, queries, k, exclude, chunk: int = 256):
    """Exact chunked linear scan; ties resolved by stable sort on index."""
    n = data.shape[0]
    out_i = np.empty((queries.shape[0], k), dtype=np.int64)
    out_d = np.empty((queries.shape[0], k), dtype=np.float64)
    for s in range(0, queries.shape[0], chunk):
        q = queries[s:s + chunk]
        d2 = ((q[:, None, :] - data[None, :, :]) ** 2).sum(axis=-1)
        ex = exclude[s:s + chunk]
        rows = np.nonzero((ex >= 0) & (ex < n))[0]
        d2[rows, ex[rows]] = np.inf
        order = np.argsort(d2, axis=1, kind="stable")[:, :k]
        out_i[s:s + chunk] = order
        out_d[s:s + chunk] = np.take_along_axis(d2, order, axis=1)
    return out_i, out_d


@njit(cache=True)
def _box_dist(q, lo, hi):
    s = 0.0
    for j in range(q.shape[0]):
        if q[j] < lo[j]:
            t = lo[j] - q[j]
            s += t * t
        elif q[j] > hi[j]:
            t = q[j] - hi[j]
            s += t * t
    return s


@njit(cache=True, parallel=True)
def _knn_tree_kernel(data, perm, nstart, nend, nleft, nright, nlo, nhi, queries, k, exclude):
    nq = queries.shape[0]
    dim = data.shape[1]
    out_i = np.empty((nq, k), dtype=np.int64)
    out_d = np.empty((nq, k), dtype=np.float64)
    n_nodes = nstart.shape[0]
    for qi in prange(nq):
        q = queries[qi]
        ex = exclude[qi]
        best_d = np.full(k, np.inf)
        best_i = np.full(k, np.int64(2**62))
        stack = np.empty(n_nodes, dtype=np.int64)
        top = 0
        stack[0] = 0
        top = 1
        while top > 0:
            top -= 1
            node = stack[top]
            if _box_dist(q, nlo[node], nhi[node]) > best_d[k - 1]:
                continue
            l = nleft[node]
            if l < 0:
                for p in range(nstart[node], nend[node]):
                    idx = perm[p]
                    if idx == ex:
                        continue
                    d = 0.0
                    for j in range(dim):
                        t = q[j] - data[idx, j]
                        d += t * t
                    if d > best_d[k - 1] or (d == best_d[k - 1] and idx > best_i[k - 1]):
                        continue
                    # insertion into the sorted (d, idx) list
                    pos = k - 1
                    while pos > 0 and (best_d[pos - 1] > d or (best_d[pos - 1] == d and best_i[pos - 1] > idx)):
                        best_d[pos] = best_d[pos - 1]
                        best_i[pos] = best_i[pos - 1]
                        pos -= 1
                    best_d[pos] = d
                    best_i[pos] = idx
            else:
                r = nright[node]
                dl = _box_dist(q, nlo[l], nhi[l])
                dr = _box_dist(q, nlo[r], nhi[r])
                # push the farther child first so the nearer one is popped next
                if dl <= dr:
                    stack[top] = r
                    stack[top + 1] = l
                else:
                    stack[top] = l
                    stack[top + 1] = r
                top += 2
        out_i[qi] = best_i
        out_d[qi] = best_d
    return out_i, out_d


def knn_graph(points, k: int) -> np.ndarray:
    """Self-excluded kNN indices for every point of every set in a batch.

    ``points`` is (B, N, d) or (N, d); returns int64 indices of matching rank.
    Exact all-pairs scan, which beats a tree for the small N and large d of
    the network's feature space.
    """
    pts = np.ascontiguousarray(points, dtype=np.float64)
    squeeze = pts.ndim == 2
    if squeeze:
        pts = pts[None]
    if not 1 <= k < pts.shape[1]:
        raise SpatialError(f"k={k} must satisfy 1 <= k < N={pts.shape[1]}")
    if use_numba():
        idx = _knn_graph_kernel(pts, k)
    else:
        idx = knn_graph_numpy(pts, k)
    return idx[0] if squeeze else idx


def knn_graph_numpy(pts, k):
    bsz, n, _ = pts.shape
    out = np.empty((bsz, n, k), dtype=np.int64)
    for b in range(bsz):
        x = pts[b]
        d2 = ((x[:, None, :] - x[None, :, :]) ** 2).sum(axis=-1)
        np.fill_diagonal(d2, np.inf)
        out[b] = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return out


@njit(cache=True, parallel=True)
def _knn_graph_kernel(pts, k):
    bsz, n, dim = pts.shape
    out = np.empty((bsz, n, k), dtype=np.int64)
    for t in prange(bsz * n):
        b = t // n
        i = t % n
        best_d = np.full(k, np.inf)
        best_i = np.full(k, np.int64(2**62))
        for j in range(n):
            if j == i:
                continue
            d = 0.0
            for c in range(dim):
                u = pts[b, i, c] - pts[b, j, c]
                d += u * u
            if d >= best_d[k - 1]:
                continue  # j increases, so equal distance loses the tie
            pos = k - 1
            while pos > 0 and best_d[pos - 1] > d:
                best_d[pos] = best_d[pos - 1]
                best_i[pos] = best_i[pos - 1]
                pos -= 1
            best_d[pos] = d
            best_i[pos] = j
        out[b, i] = best_i
    return out
