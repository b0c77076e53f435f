"""Descriptor index, exact L2 retrieval, Recall@N and the robustness protocol."""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

INDEX_MAGIC = b"LPDINDEX"
INDEX_VERSION = 1


class RetrievalError(ValueError):
    pass


@dataclass
class DescriptorIndex:
    ids: list[str]
    descriptors: np.ndarray
    positions: np.ndarray | None = None

    def __post_init__(self):
        self.ids = [str(i) for i in self.ids]
        desc = np.ascontiguousarray(self.descriptors, dtype=np.float64)
        if desc.ndim != 2 or desc.shape[0] != len(self.ids):
            raise RetrievalError(f"descriptors {desc.shape} do not match {len(self.ids)} ids")
        self.descriptors = desc
        if len(set(self.ids)) != len(self.ids):
            raise RetrievalError("index ids must be unique")
        if self.positions is not None:
            self.positions = np.asarray(self.positions, dtype=np.float64).reshape(len(self.ids), 2)
        if len(self.ids) and not np.allclose(np.linalg.norm(self.descriptors, axis=1), 1.0, atol=1e-6):
            raise RetrievalError("index descriptors must be unit-norm")
        self._row = {k: i for i, k in enumerate(self.ids)}

    def __len__(self):
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]

    def row(self, id_) -> int:
        try:
            return self._row[str(id_)]
        except KeyError:
            raise RetrievalError(f"unknown id {id_!r}") from None

    def distances(self, q) -> np.ndarray:
        """Exact L2 distance from ``q`` to every stored descriptor."""
        q = np.asarray(q, dtype=np.float64).reshape(-1)
        if q.shape[0] != self.dim:
            raise RetrievalError(f"query dimension {q.shape[0]} != index dimension {self.dim}")
        return np.sqrt(((self.descriptors - q) ** 2).sum(axis=1))


def query_topn(index: DescriptorIndex, q, n: int, exclude: set | None = None) -> list[tuple[str, float]]:
    """The ``n`` nearest entries, ascending; equal distances keep index order."""
    if len(index) == 0:
        raise RetrievalError("empty index")
    d = index.distances(q)
    order = np.argsort(d, kind="stable")
    if exclude:
        order = np.array([i for i in order if index.ids[i] not in exclude], dtype=np.int64)
    if n > len(order):
        raise RetrievalError(f"n={n} exceeds index size {len(order)}")
    return [(index.ids[i], float(d[i])) for i in order[:n]]


@dataclass
class RecallReport:
    recall_at: dict[int, float]
    recall_at_1pct: float
    one_pct_n: int
    num_queries: int
    hits: np.ndarray = field(repr=False, default=None)  # first hit rank per query (inf = none)

    def summary(self) -> str:
        r1 = self.recall_at.get(1, float("nan"))
        return (f"queries={self.num_queries} recall@1={r1:.4f} "
                f"recall@1%={self.recall_at_1pct:.4f} (N={self.one_pct_n})")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("N", "recall"))
            for n in sorted(self.recall_at):
                w.writerow((n, repr(float(self.recall_at[n]))))


def _positive_mask(index, q_labels, i_labels, q_pos, radius):
    if q_labels is not None:
        if i_labels is None:
            raise RetrievalError("index labels required with query labels")
        return np.asarray(q_labels)[:, None] == np.asarray(i_labels)[None, :]
    if q_pos is None or index.positions is None:
        raise RetrievalError("every query needs ground truth: labels or positions")
    qp = np.asarray(q_pos, dtype=np.float64).reshape(-1, 2)
    d2 = ((qp[:, None, :] - index.positions[None, :, :]) ** 2).sum(axis=-1)
    return d2 <= radius * radius


def recall_at_n(query_desc, index: DescriptorIndex, ns=tuple(range(1, 26)), *, query_ids=None,
                query_labels=None, index_labels=None, query_positions=None, positive_radius: float = 25.0,
                exclude_self: bool = False, allow_self: bool = False) -> RecallReport:
    """Fraction of queries with a true positive among their top-N results.

    A query whose id is stored in the index must either be excluded from its
    own results (``exclude_self``) or be explicitly allowed (``allow_self``).
    """
    qd = np.asarray(query_desc, dtype=np.float64).reshape(-1, index.dim)
    nq = qd.shape[0]
    if len(index) == 0:
        raise RetrievalError("empty index")
    pos = _positive_mask(index, query_labels, index_labels, query_positions, positive_radius)
    if pos.shape[0] != nq:
        raise RetrievalError("ground truth does not match the number of queries")
    self_rows = np.full(nq, -1)
    if query_ids is not None:
        for qi, qid in enumerate(query_ids):
            if str(qid) in index._row:
                if not (exclude_self or allow_self):
                    raise RetrievalError(f"query {qid!r} is in the index; pass exclude_self or allow_self")
                if exclude_self:
                    self_rows[qi] = index._row[str(qid)]
    ns = sorted(set(int(n) for n in ns))
    one_pct = max(1, math.ceil(len(index) / 100))
    first_hit = np.full(nq, np.inf)
    for qi in range(nq):
        d = np.sqrt(((index.descriptors - qd[qi]) ** 2).sum(axis=1))
        order = np.argsort(d, kind="stable")
        if self_rows[qi] >= 0:
            order = order[order != self_rows[qi]]
            pos[qi, self_rows[qi]] = False
        hit = np.nonzero(pos[qi, order])[0]
        if len(hit):
            first_hit[qi] = hit[0] + 1
    recall = {n: float(np.mean(first_hit <= n)) if nq else 0.0 for n in ns}
    r1p = float(np.mean(first_hit <= one_pct)) if nq else 0.0
    return RecallReport(recall, r1p, one_pct, nq, first_hit)


# ---------------------------------------------------------------------------
# index files


def save_index(path, index: DescriptorIndex) -> None:
    flags = 1 if index.positions is not None else 0
    parts = [INDEX_MAGIC, struct.pack("<IIII", INDEX_VERSION, len(index), index.dim, flags)]
    for i in index.ids:
        b = i.encode("utf-8")
        parts.append(struct.pack("<I", len(b)))
        parts.append(b)
    if flags & 1:
        parts.append(np.ascontiguousarray(index.positions, dtype="<f8").tobytes())
    parts.append(np.ascontiguousarray(index.descriptors, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_index(path) -> DescriptorIndex:
    raw = Path(path).read_bytes()
    if raw[:8] != INDEX_MAGIC:
        raise RetrievalError(f"{path}: not an index file")
    version, n, dim, flags = struct.unpack_from("<IIII", raw, 8)
    if version != INDEX_VERSION:
        raise RetrievalError(f"{path}: unsupported index version {version}")
    off = 24
    ids = []
    for _ in range(n):
        (ln,) = struct.unpack_from("<I", raw, off)
        off += 4
        ids.append(raw[off:off + ln].decode("utf-8"))
        off += ln
    positions = None
    if flags & 1:
        positions = np.frombuffer(raw, "<f8", count=2 * n, offset=off).reshape(n, 2).astype(np.float64)
        off += 16 * n
    desc = np.frombuffer(raw, "<f8", count=n * dim, offset=off).reshape(n, dim).astype(np.float64)
    return DescriptorIndex(ids, desc, positions)


# ---------------------------------------------------------------------------
# robustness


@dataclass
class RobustnessRow:
    angle_deg: float
    mean_mistakes: float
    max_mistakes: int
    per_repeat: list[int]


def robustness_eval(store, net_cfg, places, angles, noise_frac: float = 0.1, repeats: int = 8,
                    seed: int = 42, observation_seed: int = 0, index: DescriptorIndex | None = None,
                    chunk: int = 32) -> list[RobustnessRow]:
    """Top-1 place mistakes for rotated, noisy re-observations of indexed places.

    The index holds each place's unrotated, noise-free observation
    ``observation_seed``. Queries are the same observation rotated about z by
    each angle with ``noise_frac`` of its points replaced, the noise draw
    varying over ``repeats`` seeded runs.
    """
    from . import network as N
    from .pointcloud import generate_synthetic_place

    if store is None:
        raise RetrievalError("robustness evaluation needs trained parameters")
    places = [int(p) for p in places]
    n_pts = net_cfg.n_points
    if index is None:
        prep = [N.prepare_cloud(generate_synthetic_place(p, observation_seed, n_pts), net_cfg) for p in places]
        index = DescriptorIndex([str(p) for p in places], N.describe(prep, store, net_cfg, chunk))
    truth = np.array([index.row(str(p)) for p in places])
    rows = []
    for angle in angles:
        counts = []
        for r in range(repeats):
            noise_seed = int(np.random.default_rng([seed, r]).integers(2**31))
            prep = [N.prepare_cloud(generate_synthetic_place(p, observation_seed, n_pts, rotation_deg=angle,
                                                             noise_frac=noise_frac, noise_seed=noise_seed),
                                    net_cfg) for p in places]
            q = N.describe(prep, store, net_cfg, chunk)
            d = ((q[:, None, :] - index.descriptors[None, :, :]) ** 2).sum(axis=-1)
            top = np.argmin(d, axis=1)
            counts.append(int(np.sum(top != truth)))
        rows.append(RobustnessRow(float(angle), float(np.mean(counts)), int(max(counts)), counts))
    return rows


def write_robustness_csv(path, rows: list[RobustnessRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("angle_deg", "mean_mistakes", "max_mistakes"))
        for r in rows:
            w.writerow((repr(r.angle_deg), repr(r.mean_mistakes), r.max_mistakes))
