"""Synthetic end-to-end benchmark.

Each synthetic place is observed several times; every observation resamples
the scene and sees it from its own heading. The first ``train_obs``
observations of every place train the network, the rest are held-out queries
against a database of the training observations.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import network as N
from . import training as TR
from .pointcloud import PointCloud, generate_synthetic_place
from .retrieval import DescriptorIndex, recall_at_n
from .tensor import ParamStore

# every observation has its own heading anywhere in [-180, 180]: without heading
# variation raw coordinates alone separate the places and local features add nothing
BENCHMARK = dict(places=50, obs=5, train_obs=3, n_points=256, yaw=180.0, noise=0.0, seed=42,
                 epochs=30, steps_per_epoch=16, lr=3e-3, augment_yaw=180.0, width_scale=0.5)


def observation_yaw(place: int, obs: int, max_yaw: float) -> float:
    """Seeded sensor heading offset of one synthetic observation, uniform in [-max_yaw, max_yaw]."""
    if max_yaw == 0:
        return 0.0
    return float(np.random.default_rng([0x7A3, place, obs]).uniform(-max_yaw, max_yaw))


def observe(place: int, obs: int, n_points: int, max_yaw: float = 0.0, noise: float = 0.0) -> PointCloud:
    return generate_synthetic_place(place, obs, n_points, rotation_deg=observation_yaw(place, obs, max_yaw),
                                    noise_frac=noise)


@dataclass
class BenchmarkResult:
    recall_at_1: float
    store: ParamStore
    net_cfg: N.NetworkConfig
    epochs: int
    seconds: float
    trace: list = field(default_factory=list, repr=False)


def run_benchmark(use_local_features: bool = True, net_cfg: N.NetworkConfig | None = None,
                  **overrides) -> BenchmarkResult:
    """Train on the training observations and return held-out recall@1.

    ``overrides`` replace entries of ``BENCHMARK``; ``use_local_features=False``
    is the coordinates-only ablation with identical seeds and schedule.
    """
    b = dict(BENCHMARK, **overrides)
    unknown = set(b) - set(BENCHMARK)
    if unknown:
        raise KeyError(f"unknown benchmark keys {sorted(unknown)}")
    t0 = time.perf_counter()
    cfg = net_cfg or N.desk_config(n_points=b["n_points"], width_scale=b["width_scale"],
                                        use_local_features=use_local_features)
    train_items = [(p, o) for p in range(b["places"]) for o in range(b["train_obs"])]
    test_items = [(p, o) for p in range(b["places"]) for o in range(b["train_obs"], b["obs"])]

    def prepare(items):
        return [N.prepare_cloud(observe(p, o, cfg.n_points, b["yaw"], b["noise"]), cfg) for p, o in items]

    train_prep, test_prep = prepare(train_items), prepare(test_items)
    reg = TR.PlaceRegistry.from_labels([p for p, _ in train_items])
    tcfg = TR.TrainConfig(lr=b["lr"], epochs=b["epochs"], steps_per_epoch=b["steps_per_epoch"], seed=b["seed"],
                          augment_yaw=b["augment_yaw"])
    result = TR.train(train_prep, reg, cfg, tcfg)

    index = DescriptorIndex([f"p{p}_o{o}" for p, o in train_items], N.describe(train_prep, result.store, cfg))
    report = recall_at_n(N.describe(test_prep, result.store, cfg), index, ns=(1,),
                         query_labels=np.array([p for p, _ in test_items]),
                         index_labels=np.array([p for p, _ in train_items]))
    return BenchmarkResult(report.recall_at[1], result.store, cfg, b["epochs"], time.perf_counter() - t0,
                           result.trace)
