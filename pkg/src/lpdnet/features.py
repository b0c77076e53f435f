"""Adaptive per-point geometric features.

Each point's neighbourhood is itself plus its k nearest other points, with k
chosen from a grid by minimising the eigen-entropy of the local structure
tensor. Ten features are then read off that neighbourhood.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ._accel import njit, prange, use_numba
from .pointcloud import PointCloud
from .spatial import KdTree

FEATURE_NAMES = ("C", "O", "L", "A", "D", "S2D", "L2D", "V", "dZmax", "sZvar")
N_FEATURES = len(FEATURE_NAMES)

# eigenvalues below this fraction of the largest are numerically zero
REL_ZERO = 1e-12
DENSITY_FLOOR = 1e-12


class DegenerateNeighborhoodError(ValueError):
    def __init__(self, msg, point_index=None):
        super().__init__(msg if point_index is None else f"{msg} (point {point_index})")
        self.point_index = point_index


class EigenTriple(NamedTuple):
    l1: float
    l2: float
    l3: float


@dataclass(frozen=True)
class AdaptiveNeighborhoodConfig:
    k_min: int = 10
    k_max: int = 100
    k_step: int = 10

    def __post_init__(self):
        if self.k_min < 3:
            raise ValueError("k_min must be >= 3")
        if self.k_max < self.k_min:
            raise ValueError("k_max must be >= k_min")
        if self.k_step < 1:
            raise ValueError("k_step must be >= 1")

    @property
    def grid(self) -> np.ndarray:
        return np.arange(self.k_min, self.k_max + 1, self.k_step, dtype=np.int64)


def _clamp_sorted(w):
    """Descending, non-negative, relative-zero-clamped eigenvalues."""
    w = np.sort(np.asarray(w, dtype=np.float64))[::-1].copy()
    w[w < 0] = 0.0
    if w[0] > 0:
        w[w <= REL_ZERO * w[0]] = 0.0
    return w


def covariance_eigen(neighborhood) -> EigenTriple:
    """Eigenvalues of the biased covariance of ``neighborhood`` (>= 3 points)."""
    x = np.asarray(neighborhood, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 3:
        raise ValueError("neighborhood must be M x 3")
    if x.shape[0] < 3:
        raise DegenerateNeighborhoodError("covariance needs at least 3 points")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / x.shape[0]
    return EigenTriple(*_clamp_sorted(np.linalg.eigvalsh(cov)))


def _xlogx(p):
    return p * np.log(p) if p > 0 else 0.0


def shannon_entropy(e) -> float:
    l1, l2, l3 = e
    if not l1 > 0:
        raise DegenerateNeighborhoodError("undefined entropy: largest eigenvalue is zero")
    lin, pla, sca = (l1 - l2) / l1, (l2 - l3) / l1, l3 / l1
    return float(-_xlogx(lin) - _xlogx(pla) - _xlogx(sca))


def optimal_k(point_index: int, tree: KdTree, cloud: PointCloud, cfg: AdaptiveNeighborhoodConfig) -> int:
    """Entropy-minimising neighbour count for one point (ties -> smallest k)."""
    pts = cloud.points
    if len(pts) <= cfg.k_max:
        raise ValueError(f"cloud needs more than k_max={cfg.k_max} points")
    nbr = tree.query(pts[point_index], cfg.k_max, exclude=np.array([point_index]))[0][0]
    best_k, best_e = -1, np.inf
    for k in cfg.grid:
        hood = np.vstack([pts[point_index], pts[nbr[:k]]])
        e = covariance_eigen(hood)
        if e.l1 <= 0:
            continue
        ent = shannon_entropy(e)
        if ent < best_e:
            best_k, best_e = int(k), ent
    if best_k < 0:
        raise DegenerateNeighborhoodError("all candidate neighborhoods are degenerate", point_index)
    return best_k


def compute_local_features(cloud: PointCloud, cfg: AdaptiveNeighborhoodConfig | None = None,
                           return_kopt: bool = False):
    """N x 10 matrix in ``FEATURE_NAMES`` order (and optionally k_opt per point)."""
    cfg = cfg or AdaptiveNeighborhoodConfig()
    pts = cloud.points
    n = len(pts)
    if n <= cfg.k_max:
        raise ValueError(f"cloud has {n} points; local features need more than k_max={cfg.k_max}")
    tree = KdTree(pts)
    nbr, _ = tree.query(pts, cfg.k_max, exclude=np.arange(n))
    grid = cfg.grid
    if use_numba():
        feats, kopt, bad = _features_kernel(pts, nbr, grid)
        if bad >= 0:
            raise DegenerateNeighborhoodError("all candidate neighborhoods are degenerate", int(bad))
    else:
        feats, kopt = features_numpy(pts, nbr, grid)
    return (feats, kopt) if return_kopt else feats


def write_feature_csv(path, feats: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("index",) + FEATURE_NAMES)
        for i, row in enumerate(feats):
            w.writerow([i] + [repr(float(v)) for v in row])


# ---------------------------------------------------------------------------
# numpy fallback


def _batched_cov(h):
    c = h - h.mean(axis=1, keepdims=True)
    return np.einsum("nki,nkj->nij", c, c) / h.shape[1]


def _entropy_rows(w):
    """w: (M, 3) descending clamped eigenvalues -> (M,) entropy, inf where degenerate."""
    l1 = w[:, 0]
    ok = l1 > 0
    safe = np.where(ok, l1, 1.0)
    comps = np.stack([(w[:, 0] - w[:, 1]) / safe, (w[:, 1] - w[:, 2]) / safe, w[:, 2] / safe], axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(comps > 0, comps * np.log(np.where(comps > 0, comps, 1.0)), 0.0)
    e = -t.sum(axis=1)
    return np.where(ok, e, np.inf)


def _clamp_rows(w_asc):
    w = w_asc[:, ::-1].copy()
    w[w < 0] = 0.0
    tiny = w <= REL_ZERO * w[:, :1]
    w[tiny & (w[:, :1] > 0)] = 0.0
    return w


def features_numpy(pts, nbr, grid):
    n = pts.shape[0]
    self_idx = np.arange(n)[:, None]
    ent = np.empty((n, len(grid)))
    for gi, k in enumerate(grid):
        hood = pts[np.hstack([self_idx, nbr[:, :k]])]
        ent[:, gi] = _entropy_rows(_clamp_rows(np.linalg.eigvalsh(_batched_cov(hood))))
    if np.any(np.all(np.isinf(ent), axis=1)):
        bad = int(np.nonzero(np.all(np.isinf(ent), axis=1))[0][0])
        raise DegenerateNeighborhoodError("all candidate neighborhoods are degenerate", bad)
    kopt = grid[np.argmin(ent, axis=1)]
    feats = np.empty((n, 10))
    for k in np.unique(kopt):
        rows = np.nonzero(kopt == k)[0]
        hood = pts[np.hstack([rows[:, None], nbr[rows, :k]])]
        feats[rows] = _features_from_hoods(hood, k)
    return feats, kopt


def _features_from_hoods(hood, k):
    w_asc, vecs = np.linalg.eigh(_batched_cov(hood))
    w = _clamp_rows(w_asc)
    l1, l2, l3 = w[:, 0], w[:, 1], w[:, 2]
    tot = w.sum(axis=1)
    lam = w / tot[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        a = -np.where(lam > 0, lam * np.log(np.where(lam > 0, lam, 1.0)), 0.0).sum(axis=1)
    xy = hood[:, :, :2]
    c2 = xy - xy.mean(axis=1, keepdims=True)
    cov2 = np.einsum("nki,nkj->nij", c2, c2) / hood.shape[1]
    w2 = np.linalg.eigvalsh(cov2)[:, ::-1].copy()
    w2[w2 < 0] = 0.0
    w2[w2 <= REL_ZERO * w2[:, :1]] = 0.0
    s1 = np.where(w2[:, 0] > 0, w2[:, 0], 1.0)
    z = hood[:, :, 2]
    out = np.empty((hood.shape[0], 10))
    out[:, 0] = l3 / tot
    out[:, 1] = np.cbrt(l1 * l2 * l3) / tot
    out[:, 2] = (l1 - l2) / l1
    out[:, 3] = a
    out[:, 4] = k / ((4.0 / 3.0) * np.maximum(l1 * l2 * l3, DENSITY_FLOOR))
    out[:, 5] = w2[:, 0] + w2[:, 1]
    out[:, 6] = np.where(w2[:, 0] > 0, w2[:, 1] / s1, 0.0)
    out[:, 7] = np.abs(vecs[:, 2, 0])  # eigh is ascending: column 0 belongs to the smallest
    out[:, 8] = z.max(axis=1) - z.min(axis=1)
    out[:, 9] = z.var(axis=1)
    return out


# ---------------------------------------------------------------------------
# numba kernel


@njit(cache=True)
def _cov3(pts, hood, m):
    mx = 0.0
    my = 0.0
    mz = 0.0
    for t in range(m):
        j = hood[t]
        mx += pts[j, 0]
        my += pts[j, 1]
        mz += pts[j, 2]
    mx /= m
    my /= m
    mz /= m
    c = np.zeros((3, 3))
    for t in range(m):
        j = hood[t]
        dx = pts[j, 0] - mx
        dy = pts[j, 1] - my
        dz = pts[j, 2] - mz
        c[0, 0] += dx * dx
        c[0, 1] += dx * dy
        c[0, 2] += dx * dz
        c[1, 1] += dy * dy
        c[1, 2] += dy * dz
        c[2, 2] += dz * dz
    c[1, 0] = c[0, 1]
    c[2, 0] = c[0, 2]
    c[2, 1] = c[1, 2]
    return c / m


@njit(cache=True)
def _clamp_desc(w_asc):
    l1 = max(w_asc[2], 0.0)
    l2 = max(w_asc[1], 0.0)
    l3 = max(w_asc[0], 0.0)
    if l1 > 0:
        if l2 <= REL_ZERO * l1:
            l2 = 0.0
        if l3 <= REL_ZERO * l1:
            l3 = 0.0
    return l1, l2, l3


@njit(cache=True)
def _xlnx(p):
    return p * np.log(p) if p > 0 else 0.0


@njit(cache=True, parallel=True)
def _features_kernel(pts, nbr, grid):
    n = pts.shape[0]
    feats = np.empty((n, 10))
    kopt = np.empty(n, dtype=np.int64)
    bad = np.full(n, -1, dtype=np.int64)
    kmax = nbr.shape[1]
    for i in prange(n):
        hood = np.empty(kmax + 1, dtype=np.int64)
        hood[0] = i
        hood[1:] = nbr[i]
        best_k = -1
        best_e = np.inf
        for g in range(grid.shape[0]):
            k = grid[g]
            l1, l2, l3 = _clamp_desc(np.linalg.eigvalsh(_cov3(pts, hood, k + 1)))
            if l1 <= 0:
                continue
            e = -_xlnx((l1 - l2) / l1) - _xlnx((l2 - l3) / l1) - _xlnx(l3 / l1)
            if e < best_e:
                best_e = e
                best_k = k
        if best_k < 0:
            bad[i] = i
            feats[i, :] = 0.0
            kopt[i] = 0
            continue
        k = best_k
        kopt[i] = k
        w_asc, vecs = np.linalg.eigh(_cov3(pts, hood, k + 1))
        l1, l2, l3 = _clamp_desc(w_asc)
        tot = l1 + l2 + l3
        feats[i, 0] = l3 / tot
        feats[i, 1] = np.cbrt(l1 * l2 * l3) / tot
        feats[i, 2] = (l1 - l2) / l1
        feats[i, 3] = -_xlnx(l1 / tot) - _xlnx(l2 / tot) - _xlnx(l3 / tot)
        feats[i, 4] = k / ((4.0 / 3.0) * max(l1 * l2 * l3, DENSITY_FLOOR))
        m = k + 1
        mx = 0.0
        my = 0.0
        zmax = -np.inf
        zmin = np.inf
        mz = 0.0
        for t in range(m):
            j = hood[t]
            mx += pts[j, 0]
            my += pts[j, 1]
            mz += pts[j, 2]
            zmax = max(zmax, pts[j, 2])
            zmin = min(zmin, pts[j, 2])
        mx /= m
        my /= m
        mz /= m
        sxx = 0.0
        sxy = 0.0
        syy = 0.0
        szz = 0.0
        for t in range(m):
            j = hood[t]
            dx = pts[j, 0] - mx
            dy = pts[j, 1] - my
            dz = pts[j, 2] - mz
            sxx += dx * dx
            sxy += dx * dy
            syy += dy * dy
            szz += dz * dz
        c2 = np.empty((2, 2))
        c2[0, 0] = sxx / m
        c2[0, 1] = sxy / m
        c2[1, 0] = sxy / m
        c2[1, 1] = syy / m
        w2 = np.linalg.eigvalsh(c2)
        a1 = max(w2[1], 0.0)
        a2 = max(w2[0], 0.0)
        if a2 <= REL_ZERO * a1:
            a2 = 0.0
        feats[i, 5] = a1 + a2
        feats[i, 6] = a2 / a1 if a1 > 0 else 0.0
        feats[i, 7] = abs(vecs[2, 0])
        feats[i, 8] = zmax - zmin
        feats[i, 9] = szz / m
    first_bad = -1
    for i in range(n):
        if bad[i] >= 0:
            first_bad = i
            break
    return feats, kopt, first_bad
