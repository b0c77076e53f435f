"""Environment analysis over a descriptor index: similarity, uniqueness, clustering.

Similarity is reported as raw L2 distance, so smaller means more similar.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .retrieval import DescriptorIndex, RetrievalError


@dataclass
class SimilarityMap:
    reference: str
    entries: list[tuple[str, float]]


def similarity_map(index: DescriptorIndex, id_) -> SimilarityMap:
    r = index.row(id_)
    d = index.distances(index.descriptors[r])
    return SimilarityMap(str(id_), [(index.ids[i], float(d[i])) for i in range(len(index)) if i != r])


def pairwise_distances(desc: np.ndarray) -> np.ndarray:
    diff = desc[:, None, :] - desc[None, :, :]
    return np.sqrt((diff ** 2).sum(axis=-1))


def uniqueness(index: DescriptorIndex) -> list[tuple[str, float]]:
    """Sum of distances to all other places, min-max scaled to [0, 1]."""
    if len(index) < 2:
        raise RetrievalError("uniqueness needs at least 2 places")
    raw = pairwise_distances(index.descriptors).sum(axis=1)
    lo, hi = raw.min(), raw.max()
    scores = np.zeros_like(raw) if hi == lo else (raw - lo) / (hi - lo)
    return list(zip(index.ids, scores.tolist()))


@dataclass
class ClusterResult:
    labels: np.ndarray
    centroids: np.ndarray
    wcss: float
    history: list[float]


def _farthest_point_init(x: np.ndarray, k: int, rng) -> np.ndarray:
    chosen = [int(rng.integers(len(x)))]
    d = ((x - x[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        nxt = int(np.argmax(d))
        chosen.append(nxt)
        d = np.minimum(d, ((x - x[nxt]) ** 2).sum(axis=1))
    return x[chosen].copy()


def _assign(x, c):
    d = ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=-1)
    lab = np.argmin(d, axis=1)
    return lab, float(d[np.arange(len(x)), lab].sum())


def cluster_descriptors(index: DescriptorIndex, k: int, seed: int = 42, max_iter: int = 100) -> ClusterResult:
    """Lloyd iterations from a seeded farthest-point start."""
    x = index.descriptors
    if not 1 <= k <= len(x):
        raise RetrievalError(f"k={k} out of range 1..{len(x)}")
    rng = np.random.default_rng(seed)
    c = _farthest_point_init(x, k, rng)
    lab, wcss = _assign(x, c)
    history = [wcss]
    for _ in range(max_iter):
        new_c = c.copy()
        for j in range(k):
            members = x[lab == j]
            if len(members):
                new_c[j] = members.mean(axis=0)
        new_lab, new_wcss = _assign(x, new_c)
        c = new_c
        history.append(new_wcss)
        if np.array_equal(new_lab, lab):
            lab, wcss = new_lab, new_wcss
            break
        lab, wcss = new_lab, new_wcss
    return ClusterResult(lab, c, wcss, history)


def _write(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_similarity_csv(path, sm: SimilarityMap) -> None:
    _write(path, ("id", "distance"), [(i, repr(d)) for i, d in sm.entries])


def write_uniqueness_csv(path, scores) -> None:
    _write(path, ("id", "score"), [(i, repr(float(s))) for i, s in scores])


def write_cluster_csv(path, index: DescriptorIndex, labels) -> None:
    _write(path, ("id", "label"), [(i, int(l)) for i, l in zip(index.ids, labels)])
