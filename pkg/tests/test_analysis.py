import itertools
import math

import numpy as np
import pytest

from lpdnet import analysis as A
from lpdnet.retrieval import DescriptorIndex, RetrievalError


def index_of(x, prefix="p"):
    x = np.asarray(x, dtype=float)
    x = x / np.linalg.norm(x, axis=1, keepdims=True)
    return DescriptorIndex([f"{prefix}{i}" for i in range(len(x))], x)


def test_similarity_two_entries():
    idx = index_of([[1, 0], [0, 1]])
    a = A.similarity_map(idx, "p0")
    b = A.similarity_map(idx, "p1")
    assert a.entries == [("p1", math.sqrt(2.0))]
    assert a.entries[0][1] == b.entries[0][1]
    with pytest.raises(RetrievalError):
        A.similarity_map(idx, "nope")


def test_similarity_duplicates_and_oracle(rng):
    idx = index_of([[1, 0, 0], [1, 0, 0], [0, 1, 0]])
    assert dict(A.similarity_map(idx, "p0").entries)["p1"] == 0.0
    idx = index_of(rng.normal(size=(10, 6)))
    x = idx.descriptors
    for r in range(10):
        sm = A.similarity_map(idx, f"p{r}")
        assert len(sm.entries) == 9 and all(i != f"p{r}" for i, _ in sm.entries)
        for i, d in sm.entries:
            j = int(i[1:])
            ref = math.sqrt(sum((x[r, c] - x[j, c]) ** 2 for c in range(6)))
            assert abs(d - ref) < 1e-12
    dm = A.pairwise_distances(x)
    assert np.abs(dm - dm.T).max() <= 1e-12
    for a, b, c in itertools.islice(itertools.permutations(range(10), 3), 200):
        assert dm[a, c] <= dm[a, b] + dm[b, c] + 1e-12


def test_uniqueness(rng):
    same = index_of(np.ones((4, 3)))
    assert [s for _, s in A.uniqueness(same)] == [0.0] * 4
    blob = np.array([1.0, 0, 0]) + rng.normal(scale=0.01, size=(6, 3))
    x = np.vstack([blob, [[-1.0, 0.2, 0.1]]])
    scores = dict(A.uniqueness(index_of(x)))
    assert scores["p6"] == 1.0
    idx = index_of(rng.normal(size=(20, 5)))
    raw = [sum(np.linalg.norm(idx.descriptors[i] - idx.descriptors[j]) for j in range(20) if j != i)
           for i in range(20)]
    lo, hi = min(raw), max(raw)
    for (_, s), r in zip(A.uniqueness(idx), raw):
        assert abs(s - (r - lo) / (hi - lo)) < 1e-12
    with pytest.raises(RetrievalError):
        A.uniqueness(index_of([[1.0, 0]]))


def test_cluster_edge_cases(rng):
    idx = index_of(rng.normal(size=(7, 4)))
    res = A.cluster_descriptors(idx, 7)
    assert sorted(res.labels.tolist()) == list(range(7)) and res.wcss == 0.0
    res = A.cluster_descriptors(idx, 1)
    np.testing.assert_allclose(res.centroids[0], idx.descriptors.mean(axis=0), atol=1e-15)
    for k in (0, 8):
        with pytest.raises(RetrievalError):
            A.cluster_descriptors(idx, k)


def test_cluster_recovers_blobs(rng):
    a = np.array([1.0, 0, 0, 0]) + rng.normal(scale=0.05, size=(15, 4))
    b = np.array([0, 0, 1.0, 0]) + rng.normal(scale=0.05, size=(12, 4))
    truth = np.r_[np.zeros(15), np.ones(12)]
    res = A.cluster_descriptors(index_of(np.vstack([a, b])), 2, seed=3)
    lab = res.labels
    assert np.array_equal(lab == lab[0], truth == 0)
    assert all(x >= y - 1e-12 for x, y in zip(res.history, res.history[1:]))


def test_cluster_deterministic(rng):
    idx = index_of(rng.normal(size=(30, 5)))
    a, b = A.cluster_descriptors(idx, 4, seed=9), A.cluster_descriptors(idx, 4, seed=9)
    assert np.array_equal(a.labels, b.labels) and a.wcss == b.wcss


def test_csv_writers(tmp_path, rng):
    idx = index_of(rng.normal(size=(5, 3)))
    A.write_similarity_csv(tmp_path / "s.csv", A.similarity_map(idx, "p0"))
    A.write_uniqueness_csv(tmp_path / "u.csv", A.uniqueness(idx))
    A.write_cluster_csv(tmp_path / "c.csv", idx, A.cluster_descriptors(idx, 2).labels)
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "id,distance"
    assert (tmp_path / "u.csv").read_text().splitlines()[0] == "id,score"
    c = (tmp_path / "c.csv").read_text()
    assert c.splitlines()[0] == "id,label" and "\r" not in c
