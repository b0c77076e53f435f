"""Quadruplet sampling, lazy quadruplet loss and the Adam training loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import network as N
from . import tensor as T
from .tensor import ParamStore, Tensor

log = logging.getLogger(__name__)


class SamplingError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.5
    beta: float = 0.2

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError("loss margins must be > 0")


@dataclass(frozen=True)
class Quadruplet:
    anchor: int
    positives: tuple
    negatives: tuple
    other_negative: int

    @property
    def members(self) -> tuple:
        return (self.anchor,) + self.positives + self.negatives + (self.other_negative,)


class PlaceRegistry:
    """Items with a symmetric "same place" relation.

    Synthetic data uses integer place labels; manifest data uses positions and
    a radius. ``places`` groups items for pool construction in both cases.
    """

    def __init__(self, positive: np.ndarray, places: np.ndarray):
        self.positive = np.asarray(positive, dtype=bool)
        np.fill_diagonal(self.positive, False)
        self.places = np.asarray(places, dtype=np.int64)

    def __len__(self):
        return len(self.places)

    @classmethod
    def from_labels(cls, labels) -> "PlaceRegistry":
        labels = np.asarray(labels)
        _, places = np.unique(labels, return_inverse=True)
        return cls(labels[:, None] == labels[None, :], places)

    @classmethod
    def from_positions(cls, positions, radius: float) -> "PlaceRegistry":
        pos = np.asarray(positions, dtype=np.float64)
        d2 = ((pos[:, None, :] - pos[None, :, :]) ** 2).sum(axis=-1)
        adj = d2 <= radius * radius
        # connected components of the radius graph stand in for place ids
        places = np.full(len(pos), -1, dtype=np.int64)
        nxt = 0
        for s in range(len(pos)):
            if places[s] >= 0:
                continue
            stack = [s]
            places[s] = nxt
            while stack:
                i = stack.pop()
                for j in np.nonzero(adj[i] & (places < 0))[0]:
                    places[j] = nxt
                    stack.append(j)
            nxt += 1
        return cls(adj, places)

    def subset(self, items) -> "PlaceRegistry":
        items = np.asarray(items)
        return PlaceRegistry(self.positive[np.ix_(items, items)], self.places[items])


def _sample_one(reg: PlaceRegistry, a: int, rng, p_pos: int, p_neg: int, pool=None) -> Quadruplet:
    pool = np.arange(len(reg)) if pool is None else np.asarray(pool)
    pos_c = pool[reg.positive[a, pool]]
    if len(pos_c) < p_pos:
        raise SamplingError(f"insufficient positives for item {a}")
    positives = tuple(int(x) for x in rng.choice(pos_c, size=p_pos, replace=False))
    blocked = reg.positive[a].copy()
    blocked[a] = True
    for p in positives:
        blocked |= reg.positive[p]
        blocked[p] = True
    cand = pool[~blocked[pool]]
    negatives = []
    for c in rng.permutation(cand):
        if len(negatives) == p_neg:
            break
        # negatives come from mutually distinct places
        if not any(reg.positive[c, n] for n in negatives):
            negatives.append(int(c))
    if len(negatives) < p_neg:
        raise SamplingError("insufficient negatives")
    members = [a, *positives, *negatives]
    ok = ~(reg.positive[pool][:, members].any(axis=1)) & ~np.isin(pool, members)
    other = pool[ok]
    if len(other) == 0:
        raise SamplingError("no other-negative disjoint from the quadruplet")
    return Quadruplet(a, positives, tuple(negatives), int(rng.choice(other)))


def sample_quadruplets(reg: PlaceRegistry, batch: int, seed: int, p_pos: int = 2, p_neg: int = 18,
                       anchors=None, pool=None) -> list[Quadruplet]:
    """Deterministic quadruplets; anchors default to ``batch`` random items."""
    rng = np.random.default_rng(seed)
    pool_arr = np.arange(len(reg)) if pool is None else np.asarray(pool)
    if anchors is None:
        eligible = pool_arr[reg.positive[np.ix_(pool_arr, pool_arr)].sum(axis=1) >= p_pos]
        if len(eligible) == 0:
            raise SamplingError("insufficient observations per place")
        anchors = rng.choice(eligible, size=min(batch, len(eligible)), replace=False)
    return [_sample_one(reg, int(a), rng, p_pos, p_neg, pool_arr) for a in anchors]


# ---------------------------------------------------------------------------
# loss


def lazy_quadruplet_loss(d_pos, d_neg, d_other, cfg: LossConfig = LossConfig()) -> float:
    d_pos, d_neg, d_other = (np.asarray(x, dtype=np.float64) for x in (d_pos, d_neg, d_other))
    if d_pos.size == 0 or d_neg.size == 0 or d_other.size == 0:
        raise ValueError("distance lists must be non-empty")
    best = d_pos.min()
    return float(max(np.max(cfg.alpha + best - d_neg), 0.0) + max(np.max(cfg.beta + best - d_other), 0.0))


def _sq_dist(desc: Tensor, a_idx: np.ndarray, b_idx: np.ndarray) -> Tensor:
    """Squared L2 between rows a_idx[q] and each of b_idx[q, :] -> (Q, m)."""
    x = T.reshape(desc, (1,) + desc.shape)
    a = T.gather_neighbors(x, a_idx[None, :, None])
    b = T.gather_neighbors(x, b_idx[None])
    diff = T.sub(a, b)
    return T.reshape(T.tsum(T.mul(diff, diff), axis=-1), b_idx.shape)


def _neg(x: Tensor) -> Tensor:
    return T.mul(x, -1.0)


def quadruplet_loss_tensor(desc: Tensor, quads: list[Quadruplet], slot: dict[int, int],
                           cfg: LossConfig = LossConfig()) -> Tensor:
    """Mean lazy quadruplet loss over ``quads``; ``slot`` maps item id -> row of ``desc``."""
    anc = np.array([slot[q.anchor] for q in quads])
    pos = np.array([[slot[p] for p in q.positives] for q in quads])
    neg = np.array([[slot[n] for n in q.negatives] for q in quads])
    oth = np.array([slot[q.other_negative] for q in quads])
    d_pos = _sq_dist(desc, anc, pos)
    d_neg = _sq_dist(desc, anc, neg)
    d_oth = _sq_dist(desc, oth, neg)
    best = T.reshape(_neg(T.maxpool(_neg(d_pos), axis=-1)), (len(quads), 1))
    t1 = T.maxpool(T.relu(T.add(T.sub(best, d_neg), cfg.alpha)), axis=-1)
    t2 = T.maxpool(T.relu(T.add(T.sub(best, d_oth), cfg.beta)), axis=-1)
    return T.mul(T.tsum(T.add(t1, t2)), 1.0 / len(quads))


# ---------------------------------------------------------------------------
# optimisation


class Adam:
    def __init__(self, store: ParamStore, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        if not lr >= 0:
            raise ValueError("learning rate must be >= 0")
        self.store, self.lr, self.b1, self.b2, self.eps = store, lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(t.data) for k, t in store.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in store.items()}
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in self.store.items():
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            p.data -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 30
    steps_per_epoch: int = 0      # 0: enough pools to cover every item once
    pool_places: int = 20         # places per step; every pool item anchors a quadruplet
    batch: int = 0                # max quadruplets per step, 0 = whole pool
    p_pos: int = 2
    p_neg: int = 18
    alpha: float = 0.5
    beta: float = 0.2
    seed: int = 42
    beta1: float = 0.9
    beta2: float = 0.999
    augment_yaw: float = 0.0      # max random z-rotation (deg) applied per cloud and step
    vlad_init: str = "random"     # "kmeans": seed fresh NetVLAD centers from the data; "random": keep init

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.vlad_init not in ("kmeans", "random"):
            raise ValueError("vlad_init must be 'kmeans' or 'random'")
        if self.pool_places < self.p_neg + 2:
            raise ValueError("pool_places must be >= p_neg + 2")


@dataclass
class TrainResult:
    store: ParamStore
    trace: list = field(default_factory=list)   # (epoch, step, loss)

    def epoch_means(self) -> list[float]:
        out: dict[int, list[float]] = {}
        for e, _, l in self.trace:
            out.setdefault(e, []).append(l)
        return [float(np.mean(out[e])) for e in sorted(out)]


def write_trace(path, trace) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "batch", "loss"))
        for e, b, l in trace:
            w.writerow((e, b, repr(float(l))))


def _pools(reg: PlaceRegistry, cfg: TrainConfig, rng) -> list[np.ndarray]:
    places = np.unique(reg.places)
    if len(places) < cfg.p_neg + 2:
        raise SamplingError("insufficient negatives: need at least p_neg + 2 places")
    n_items = len(reg)
    per_pool = max(1, int(np.mean([np.sum(reg.places == p) for p in places])) * cfg.pool_places)
    steps = cfg.steps_per_epoch or max(1, math.ceil(n_items / per_pool))
    out = []
    for _ in range(steps):
        chosen = rng.choice(places, size=min(cfg.pool_places, len(places)), replace=False)
        out.append(np.nonzero(np.isin(reg.places, chosen))[0])
    return out


def rotate_prepared(p: N.PreparedCloud, angle_deg: float) -> N.PreparedCloud:
    """The same cloud turned about z. Local features and kNN indices are z-rotation invariant."""
    t = math.radians(angle_deg)
    c, s = math.cos(t), math.sin(t)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return N.PreparedCloud(p.coords @ rot.T, p.local_feats, p.cart_idx, p.order)


def train_step(store: ParamStore, opt: Adam, prepared: list, quads: list[Quadruplet],
               net_cfg: N.NetworkConfig, loss_cfg: LossConfig, angles: dict | None = None) -> float:
    items = sorted({m for q in quads for m in q.members})
    slot = {it: s for s, it in enumerate(items)}
    store.zero_grad()
    batch = [prepared[i] if not angles else rotate_prepared(prepared[i], angles[i]) for i in items]
    desc = N.forward_batch(batch, store, net_cfg)
    loss = quadruplet_loss_tensor(desc, quads, slot, loss_cfg)
    value = float(loss.data)
    if not math.isfinite(value):
        raise T.NumericError("non-finite loss")
    T.backward(loss)
    opt.step()
    return value


def train(prepared: list, reg: PlaceRegistry, net_cfg: N.NetworkConfig, cfg: TrainConfig,
          store: ParamStore | None = None, checkpoint: str | Path | None = None) -> TrainResult:
    """Adam on the lazy quadruplet loss; deterministic for a fixed ``cfg.seed``."""
    if store is None:
        store = N.init_params(net_cfg, cfg.seed)
        if cfg.vlad_init == "kmeans":
            N.init_vlad_from_data(store, prepared, net_cfg, seed=cfg.seed)
    if not np.any(reg.positive.sum(axis=1) >= cfg.p_pos):
        raise TrainingError(f"no item has p_pos={cfg.p_pos} positives; lower p_pos or add observations")
    opt = Adam(store, cfg.lr, cfg.beta1, cfg.beta2)
    loss_cfg = LossConfig(cfg.alpha, cfg.beta)
    rng = np.random.default_rng([cfg.seed, 0x7A1])
    result = TrainResult(store)
    for epoch in range(cfg.epochs):
        for step, pool in enumerate(_pools(reg, cfg, rng)):
            sub = reg.subset(pool)
            eligible = np.nonzero(sub.positive.sum(axis=1) >= cfg.p_pos)[0]
            anchors = rng.permutation(eligible)
            if cfg.batch:
                anchors = anchors[:cfg.batch]
            seed = int(rng.integers(2**31))
            local = sample_quadruplets(sub, len(anchors), seed, cfg.p_pos, cfg.p_neg, anchors=anchors)
            quads = [Quadruplet(int(pool[q.anchor]), tuple(int(pool[i]) for i in q.positives),
                                tuple(int(pool[i]) for i in q.negatives), int(pool[q.other_negative]))
                     for q in local]
            angles = None
            if cfg.augment_yaw:
                items = sorted({m for q in quads for m in q.members})
                draws = rng.uniform(-cfg.augment_yaw, cfg.augment_yaw, size=len(items))
                angles = dict(zip(items, draws.tolist()))
            try:
                value = train_step(store, opt, prepared, quads, net_cfg, loss_cfg, angles)
            except (T.NumericError, N.NetworkError) as exc:
                raise TrainingError(f"epoch {epoch} batch {step}: {exc}") from exc
            result.trace.append((epoch, step, value))
            log.info("epoch %d batch %d loss %.6f", epoch, step, value)
        if checkpoint is not None:
            T.save_checkpoint(checkpoint, store)
    return result
