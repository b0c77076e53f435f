"""Compiled vs pure-numpy kernels: kd-tree kNN, local features, kNN graph, autograd scatter and max-pool.

Run with ``python3 benchmarks/bench_kernels.py [--repeats R]``. Each kernel runs
once per backend to warm up (numba compiles on first call), then the best of R
timings is reported together with a check that both backends agree.
"""
import argparse
import os
import time

import numpy as np

from lpdnet import features, spatial
from lpdnet import tensor as T
from lpdnet.pointcloud import generate_synthetic_place


def _timed(fn, repeats):
    out = fn()
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def _backend(flag):
    os.environ["LPDNET_DISABLE_NUMBA"] = flag


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--points", type=int, default=4096)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(0)
    pts = rng.uniform(-1, 1, size=(args.points, 3))
    queries = rng.uniform(-1, 1, size=(1000, 3))
    tree = spatial.build(pts)
    cloud = generate_synthetic_place(3, 0, 1024)
    feats = rng.normal(size=(8, 256, 64))
    edges = rng.normal(size=(60, 256, 10, 32))
    flat = rng.integers(0, 60 * 256, size=60 * 256 * 10)
    grads = rng.normal(size=(len(flat), 32))

    cases = [
        ("kdtree knn k=20", lambda: tree.query(queries, 20)[0]),
        ("local features (1024 pts)", lambda: features.compute_local_features(cloud)),
        ("knn_graph 8x256x64 k=20", lambda: spatial.knn_graph(feats, 20)),
        ("scatter-add 153600x32", lambda: T.scatter_rows(flat, grads, 60 * 256)),
        ("max-pool over k=10", lambda: T.maxpool(edges, axis=-2).data),
    ]
    print(f"{'kernel':28s} {'numba [s]':>10s} {'numpy [s]':>10s} {'speedup':>8s}  agree")
    for name, fn in cases:
        _backend("0")
        t_nb, out_nb = _timed(fn, args.repeats)
        _backend("1")
        t_np, out_np = _timed(fn, args.repeats)
        agree = np.array_equal(out_nb, out_np) or np.allclose(out_nb, out_np, rtol=1e-9, atol=1e-12)
        print(f"{name:28s} {t_nb:10.4f} {t_np:10.4f} {t_np / t_nb:8.1f}x  {agree}")
    _backend("0")


if __name__ == "__main__":
    main()
