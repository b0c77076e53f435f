"""Finite-difference verification of every primitive and of the full network loss."""
from __future__ import annotations

import numpy as np

from . import network as N
from . import tensor as T
from .pointcloud import downsample_random, generate_synthetic_place
from .tensor import GradCheckResult, ParamStore
from .training import LossConfig, Quadruplet, quadruplet_loss_tensor


def toy_config(**overrides) -> N.NetworkConfig:
    """32-point, narrow network for end-to-end gradient checks."""
    base = dict(n_points=32, width_scale=1.0, tnet_mlp=(8, 8, 16), tnet_fc=(8, 8), fn_mlp=(8, 8),
                edge_mlp=(8, 8), merge_width=8, head_fc=(8, 8, 16), kf=4, kc=4, vlad_clusters=4,
                output_dim=8, k_min=4, k_max=16, k_step=4)
    base.update(overrides)
    return N.NetworkConfig(**base)


def toy_clouds(cfg: N.NetworkConfig, seed: int = 0, n_pos: int = 2, n_neg: int = 3):
    """Anchor, positives, negatives and an other-negative as prepared clouds."""
    def obs(place, o):
        big = generate_synthetic_place(place, o, max(64, cfg.n_points), noise_frac=0.0)
        return N.prepare_cloud(downsample_random(big, cfg.n_points, seed + o), cfg)

    prepared = [obs(seed, 0)] + [obs(seed, 1 + i) for i in range(n_pos)]
    prepared += [obs(seed + 100 + i, 0) for i in range(n_neg)]
    prepared.append(obs(seed + 200, 0))
    quad = Quadruplet(0, tuple(range(1, 1 + n_pos)), tuple(range(1 + n_pos, 1 + n_pos + n_neg)),
                      1 + n_pos + n_neg)
    return prepared, quad


def jitter_params(store: ParamStore, scale: float = 0.05, seed: int = 1) -> None:
    """Move parameters off their structured init so every path carries gradient."""
    rng = np.random.default_rng(seed)
    for _, t in store.items():
        t.data += rng.normal(scale=scale, size=t.data.shape)


def check_network(cfg: N.NetworkConfig | None = None, seed: int = 0, eps: float = 1e-6,
                  max_entries: int | None = None) -> GradCheckResult:
    """Central differences of forward_full + lazy quadruplet loss w.r.t. every parameter."""
    cfg = cfg or toy_config()
    prepared, quad = toy_clouds(cfg, seed)
    store = N.init_params(cfg, seed)
    jitter_params(store, seed=seed + 1)
    slot = {i: i for i in range(len(prepared))}
    # small margins keep the hinges active so the loss depends on every descriptor
    loss_cfg = LossConfig(alpha=2.0, beta=2.0)

    def f(s):
        return quadruplet_loss_tensor(N.forward_batch(prepared, s, cfg), [quad], slot, loss_cfg)

    return T.finite_difference_check(f, store, eps=eps, max_entries=max_entries, seed=seed)


def check_primitives(seed: int = 0, eps: float = 1e-6) -> dict[str, float]:
    """Max relative gradient error of each primitive on a random instance."""
    rng = np.random.default_rng(seed)
    out = {}

    def run(name, build, params):
        store = ParamStore(seed)
        for k, v in params.items():
            store.add(k, v)
        weights = rng.normal(size=build(store).shape)

        def f(s):
            return T.tsum(T.mul(build(s), weights))
        out[name] = T.finite_difference_check(f, store, eps=eps).max_rel_err

    n, cin, cout = 6, 5, 4
    run("shared_mlp", lambda s: T.shared_mlp(s["x"], s["w"], s["b"]),
        dict(x=rng.normal(size=(n, cin)), w=rng.normal(size=(cin, cout)), b=rng.normal(size=cout)))
    run("relu", lambda s: T.relu(s["x"]), dict(x=rng.normal(size=(n, cin))))
    run("softmax_rows", lambda s: T.softmax_rows(s["x"]), dict(x=rng.normal(size=(n, cin))))
    run("maxpool_points", lambda s: T.maxpool(s["x"], axis=0), dict(x=rng.normal(size=(n, cin))))
    run("l2_normalize", lambda s: T.l2_normalize(s["x"]), dict(x=rng.normal(size=(n, cin))))
    run("concat", lambda s: T.concat([s["x"], s["y"]]),
        dict(x=rng.normal(size=(n, 2)), y=rng.normal(size=(n, 3))))
    run("matmul_apply", lambda s: T.matmul_apply(s["x"], s["t"]),
        dict(x=rng.normal(size=(2, n, 3)), t=rng.normal(size=(2, 3, 3))))
    idx = rng.integers(0, n, size=(2, n, 3))
    run("gather_neighbors", lambda s: T.gather_neighbors(s["x"], idx), dict(x=rng.normal(size=(2, n, cin))))
    run("vlad_aggregate", lambda s: T.vlad_aggregate(T.softmax_rows(s["a"]), s["x"], s["c"]),
        dict(a=rng.normal(size=(2, n, 3)), x=rng.normal(size=(2, n, cin)), c=rng.normal(size=(3, cin))))
    run("edge_diff", lambda s: T.edge_diff(s["x"], s["y"], idx),
        dict(x=rng.normal(size=(2, n, cin)), y=rng.normal(size=(2, n, cin))))
    run("slice_rows", lambda s: T.slice_rows(s["x"], 1, 4), dict(x=rng.normal(size=(n, cin))))
    run("expand", lambda s: T.expand(s["x"], 1, 3), dict(x=rng.normal(size=(n, cin))))
    return out
