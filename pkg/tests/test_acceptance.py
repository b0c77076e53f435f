"""Acceptance criteria, each at its stated tolerance and time budget.

Every criterion prints one ``PASS``/``FAIL`` line; the lines are printed
again in an "acceptance criteria" section at the end of the run. Tolerances are pinned
below and must not be edited to make a run pass.
"""
import filecmp
import math
import time

import numpy as np
import pytest

from lpdnet import cli
from lpdnet import network as N
from lpdnet import tensor as T
from lpdnet import training as TR
from lpdnet.benchmark import BENCHMARK, run_benchmark
from lpdnet.features import AdaptiveNeighborhoodConfig, compute_local_features, optimal_k
from lpdnet.gradcheck import check_network, check_primitives, jitter_params, toy_config
from lpdnet.pointcloud import PointCloud, generate_synthetic_place
from lpdnet.retrieval import robustness_eval
from lpdnet.spatial import KdTree

from conftest import ACCEPTANCE_LINES
from oracles import exhaustive_kopt, lazy_quadruplet, netvlad_mp, point_features

# pinned tolerances and budgets
KNN_BUDGET_S = 5.0
FEATURE_ATOL = 1e-9
PARTITION_TOL = 1e-12
ROTATION_ATOL = 1e-9
FEATURE_BUDGET_S = 10.0
KOPT_BUDGET_S = 10.0
NETWORK_GRAD_TOL = 1e-4
PRIMITIVE_GRAD_TOL = 1e-6
GRAD_BUDGET_S = 60.0
PERMUTATIONS = 20
PERMUTATION_TOL = 1e-6
PERMUTATION_BUDGET_S = 10.0
VLAD_NORM_TOL = 1e-9
VLAD_MP_TOL = 1e-10
VLAD_BUDGET_S = 1.0
LOSS_DRAWS = 1000
LOSS_BUDGET_S = 5.0
RECALL_MIN = 0.90
BENCHMARK_BUDGET_S = 15 * 60.0
ROBUSTNESS_ANGLES = (1, 2, 3, 4, 5, 10, 20, 30)
ROBUSTNESS_NOISE = 0.1
ROBUSTNESS_BUDGET_S = 5 * 60.0


def report(num, ok, detail):
    line = f"criterion {num}: {'PASS' if ok else 'FAIL'}  {detail}"
    print("\n" + line, flush=True)
    ACCEPTANCE_LINES.append(line)
    return ok


# ---------------------------------------------------------------------------
# 1. kNN oracle equivalence


def _linear_scan(data, queries, k):
    d2 = ((queries[:, None, :] - data[None, :, :]) ** 2).sum(axis=-1)
    order = np.lexsort((np.broadcast_to(np.arange(len(data)), d2.shape), d2), axis=-1)[:, :k]
    return order, np.take_along_axis(d2, order, axis=1)


@pytest.mark.parametrize("backend_flag", ["0", "1"])
def test_criterion_1_knn(monkeypatch, backend_flag):
    monkeypatch.setenv("LPDNET_DISABLE_NUMBA", backend_flag)
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    ok = True
    for n, dim, nq in ((1000, 3, 100), (200, 64, 20)):
        data = rng.uniform(-1, 1, size=(n, dim))
        queries = rng.uniform(-1, 1, size=(nq, dim))
        tree = KdTree(data)
        for k in (1, 5, 20):
            idx, d2 = tree.query(queries, k)
            ref_idx, ref_d2 = _linear_scan(data, queries, k)
            ok &= np.array_equal(idx, ref_idx) and np.allclose(d2, ref_d2, rtol=1e-12, atol=0)
    elapsed = time.perf_counter() - t0
    ok &= elapsed < KNN_BUDGET_S
    assert report(1, ok, f"numba={'off' if backend_flag == '1' else 'on'} identical to linear scan, {elapsed:.2f}s")


# ---------------------------------------------------------------------------
# 2. local-feature oracle


def _rotate_z(pts, deg):
    t = math.radians(deg)
    rot = np.array([[math.cos(t), -math.sin(t), 0], [math.sin(t), math.cos(t), 0], [0, 0, 1]])
    return pts @ rot.T


def _criterion_2():
    t0 = time.perf_counter()
    cloud = generate_synthetic_place(0, 0, 256)
    feats, kopt = compute_local_features(cloud, return_kopt=True)
    oracle_err, partition_err = 0.0, 0.0
    for i in range(len(cloud)):
        ref, (l1, l2, l3) = point_features(cloud.points, i, int(kopt[i]))
        oracle_err = max(oracle_err, float(np.max(np.abs(feats[i] - ref))))
        partition_err = max(partition_err, abs((l1 - l2) / l1 + (l2 - l3) / l1 + l3 / l1 - 1))
    rot_err = np.zeros(10)
    for deg in (17.0, 90.0, 233.0):
        other = compute_local_features(PointCloud(_rotate_z(cloud.points, deg)))
        rot_err = np.maximum(rot_err, np.max(np.abs(other - feats), axis=0))
    return oracle_err, partition_err, rot_err, time.perf_counter() - t0


@pytest.fixture(scope="module")
def criterion_2():
    return _criterion_2()


def test_criterion_2_local_features(criterion_2):
    oracle_err, partition_err, rot_err, elapsed = criterion_2
    d = 4  # density column
    rest = float(np.max(np.delete(rot_err, d)))
    ok = (oracle_err <= FEATURE_ATOL and partition_err <= PARTITION_TOL and float(rot_err.max()) <= ROTATION_ATOL
          and elapsed < FEATURE_BUDGET_S)
    report(2, ok, f"oracle {oracle_err:.1e}, L+P+S {partition_err:.1e}, rotation: nine features "
                  f"{rest:.1e}, D {rot_err[d]:.1e} absolute, {elapsed:.2f}s")
    # the attainable clauses must hold; D is checked separately below
    assert oracle_err <= FEATURE_ATOL and partition_err <= PARTITION_TOL
    assert rest <= ROTATION_ATOL and elapsed < FEATURE_BUDGET_S


@pytest.mark.xfail(strict=True, reason="density D reaches ~3e13, where 1e-9 absolute is below float64 resolution")
def test_criterion_2_density_rotation_absolute(criterion_2):
    _, _, rot_err, _ = criterion_2
    assert rot_err[4] <= ROTATION_ATOL


# ---------------------------------------------------------------------------
# 3. adaptive k


def test_criterion_3_optimal_k():
    t0 = time.perf_counter()
    cfg = AdaptiveNeighborhoodConfig()
    cloud = generate_synthetic_place(3, 0, 256)
    tree = KdTree(cloud.points)
    grid = list(cfg.grid)
    ok = all(optimal_k(i, tree, cloud, cfg) == exhaustive_kopt(cloud.points, i, grid) for i in range(len(cloud)))
    line = np.c_[np.linspace(-1, 1, 120), np.zeros(120), np.zeros(120)]
    lcloud = PointCloud(line)
    ltree = KdTree(line)
    ok_line = all(optimal_k(i, ltree, lcloud, cfg) == cfg.k_min for i in range(0, 120, 7))
    elapsed = time.perf_counter() - t0
    ok = ok and ok_line and elapsed < KOPT_BUDGET_S
    assert report(3, ok, f"256/256 points match exhaustive search, collinear -> k_min={cfg.k_min}, {elapsed:.2f}s")


# ---------------------------------------------------------------------------
# 4. gradients


def test_criterion_4_gradients():
    t0 = time.perf_counter()
    net = check_network(toy_config())
    prims = check_primitives()
    elapsed = time.perf_counter() - t0
    worst_prim = max(prims, key=prims.get)
    ok = net.max_rel_err < NETWORK_GRAD_TOL and prims[worst_prim] < PRIMITIVE_GRAD_TOL and elapsed < GRAD_BUDGET_S
    assert report(4, ok, f"network {net.max_rel_err:.2e} ({net.worst_param}), worst primitive "
                         f"{worst_prim} {prims[worst_prim]:.2e}, {elapsed:.2f}s")


# ---------------------------------------------------------------------------
# 5. permutation invariance


def test_criterion_5_permutation():
    t0 = time.perf_counter()
    cfg = N.desk_config()
    store = N.init_params(cfg, 5)
    jitter_params(store, seed=6)
    cloud = generate_synthetic_place(4, 1, cfg.n_points)
    ref = N.forward_full(cloud, store, cfg)
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(PERMUTATIONS):
        perm = rng.permutation(cfg.n_points)
        out = N.forward_full(PointCloud(cloud.points[perm], True), store, cfg)
        worst = max(worst, float(np.max(np.abs(out - ref))))
    elapsed = time.perf_counter() - t0
    ok = worst < PERMUTATION_TOL and elapsed < PERMUTATION_BUDGET_S
    assert report(5, ok, f"{PERMUTATIONS} permutations, max |diff| {worst:.1e}, {elapsed:.2f}s")


# ---------------------------------------------------------------------------
# 6. NetVLAD


def _vlad_store(w, b, c, proj):
    s = T.ParamStore(0)
    s.add("vlad.assign_w", np.array(w, float))
    s.add("vlad.assign_b", np.array(b, float))
    s.add("vlad.centers", np.array(c, float))
    s.add("vlad.proj_w", np.array(proj, float))
    return s


def test_criterion_6_netvlad():
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    s = _vlad_store(rng.normal(size=(6, 4)), rng.normal(size=4), rng.normal(size=(4, 6)), rng.normal(size=(24, 5)))
    out = N.netvlad_forward(rng.normal(size=(16, 30, 6)), s).data
    norm_err = float(np.max(np.abs(np.linalg.norm(out, axis=1) - 1)))
    k1 = N.netvlad_forward(np.array([[1.0, 0.0], [0.0, 1.0]]),
                           _vlad_store([[0.3], [-0.2]], [0.1], [[0.0, 0.0]], np.eye(2))).data
    k1_err = float(np.max(np.abs(k1 - 1 / math.sqrt(2))))
    x = [[0.6, 0.8], [1.0, 0.0], [-0.28, 0.96]]
    w = [[1.5, -0.5], [0.25, 2.0]]
    b = [0.1, -0.3]
    c = [[0.2, 0.1], [-0.4, 0.3]]
    proj = [[1.0, 0.5, -0.2], [0.3, -1.0, 0.4], [0.0, 0.7, 1.1], [-0.6, 0.2, 0.9]]
    t_mp = time.perf_counter()
    ref = netvlad_mp(x, w, b, c, proj)
    t_mp = time.perf_counter() - t_mp
    k2_err = float(np.max(np.abs(N.netvlad_forward(np.array(x), _vlad_store(w, b, c, proj)).data - ref)))
    # the high-precision oracle's own runtime is not part of the component budget
    elapsed = time.perf_counter() - t0 - t_mp
    ok = norm_err <= VLAD_NORM_TOL and k1_err <= 1e-15 and k2_err <= VLAD_MP_TOL and elapsed < VLAD_BUDGET_S
    assert report(6, ok, f"norm {norm_err:.1e}, K=1 {k1_err:.1e}, K=2 vs mpmath {k2_err:.1e}, {elapsed:.3f}s")


# ---------------------------------------------------------------------------
# 7. loss


def test_criterion_7_loss():
    t0 = time.perf_counter()
    cfg = TR.LossConfig(0.5, 0.2)
    zero = TR.lazy_quadruplet_loss([0.1, 0.1], [2.0] * 18, [2.0] * 18, cfg)
    four = TR.lazy_quadruplet_loss([0.5, 0.8], [0.6, 1.2], [0.7, 0.9], cfg)
    rng = np.random.default_rng(9)
    ok_draws = True
    for _ in range(LOSS_DRAWS):
        dp, dn, do = rng.uniform(0, 4, 2), rng.uniform(0, 4, 18), rng.uniform(0, 4, 18)
        v = TR.lazy_quadruplet_loss(dp, dn, do, cfg)
        perm = rng.permutation(18)
        ok_draws &= v >= 0 and v == TR.lazy_quadruplet_loss(dp, dn[perm], do[perm], cfg)
        ok_draws &= abs(v - lazy_quadruplet(dp, dn, do, 0.5, 0.2)) <= 1e-15
    elapsed = time.perf_counter() - t0
    ok = zero == 0.0 and four == 0.4 and ok_draws and elapsed < LOSS_BUDGET_S
    assert report(7, ok, f"zero case {zero!r}, hand case {four!r}, {LOSS_DRAWS} draws non-negative and "
                         f"permutation invariant, {elapsed:.2f}s")


# ---------------------------------------------------------------------------
# 8 and 9. synthetic benchmark and robustness


@pytest.fixture(scope="module")
def benchmark():
    t0 = time.perf_counter()
    full = run_benchmark(use_local_features=True)
    xyz = run_benchmark(use_local_features=False)
    return full, xyz, time.perf_counter() - t0


@pytest.mark.slow
def test_criterion_8_synthetic_benchmark(benchmark):
    full, xyz, elapsed = benchmark
    ok = full.recall_at_1 >= RECALL_MIN and xyz.recall_at_1 < full.recall_at_1 and elapsed <= BENCHMARK_BUDGET_S
    assert report(8, ok, f"held-out recall@1 {full.recall_at_1:.2f} (xyz-only {xyz.recall_at_1:.2f}), "
                         f"{BENCHMARK['places']} places, {full.epochs} epochs, {elapsed:.0f}s for both runs")


@pytest.mark.slow
def test_criterion_9_robustness(benchmark):
    full, _, _ = benchmark
    t0 = time.perf_counter()
    rows = robustness_eval(full.store, full.net_cfg, range(BENCHMARK["places"]), ROBUSTNESS_ANGLES,
                           noise_frac=ROBUSTNESS_NOISE, repeats=8, seed=BENCHMARK["seed"])
    elapsed = time.perf_counter() - t0
    means = [r.mean_mistakes for r in rows]
    strict = any(b > a for a, b in zip(means, means[1:]))
    ok = means[0] <= means[-1] and strict and elapsed <= ROBUSTNESS_BUDGET_S
    trend = " ".join(f"{a:g}:{m:.2f}" for a, m in zip(ROBUSTNESS_ANGLES, means))
    assert report(9, ok, f"mean mistakes by angle {trend}, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 10. determinism


TOY = "profile=toy\nn_points=64\nepochs=2\nsteps_per_epoch=2\npool_places=8\np_pos=1\np_neg=4\n"


def _pipeline(root, threads):
    """Every CLI artifact of the criteria, at reduced scale, into ``root``."""
    root.mkdir()
    (root / "toy.cfg").write_text(TOY)
    common = ["--seed", "7", "--threads", str(threads)]
    steps = [
        ["synth", "--out", str(root / "data"), "--places", "12", "--obs", "3", "--train-obs", "2",
         "--points", "64", "--yaw", "30"],
        ["extract", "--cloud", str(root / "data" / "clouds" / "p0000_o0.bin"), "--out", str(root / "feats.csv"),
         "--k-max", "40"],
        ["train", "--synthetic", "places=12", "obs=3", "train_obs=2", "--config", str(root / "toy.cfg"),
         "--out", str(root / "m.ckpt"), "--trace", str(root / "trace.csv")],
        ["index", "--ckpt", str(root / "m.ckpt"), "--manifest", str(root / "data" / "train.csv"),
         "--out", str(root / "db.idx")],
        ["eval", "--manifest", str(root / "data" / "train.csv"), "--queries", str(root / "data" / "test.csv"),
         "--ckpt", str(root / "m.ckpt"), "--out", str(root / "recall.csv")],
        ["robustness", "--ckpt", str(root / "m.ckpt"), "--places", "12", "--repeats", "2",
         "--out", str(root / "robust.csv")],
        ["analyze", "--index", str(root / "db.idx"), "--out-dir", str(root / "analysis"), "--uniqueness",
         "--clusters", "3", "--similarity", "p0000_o0"],
    ]
    for argv in steps:
        assert cli.run(argv + common) == 0, argv


def _files(root):
    return sorted(p.relative_to(root) for p in root.rglob("*") if p.is_file() and p.suffix != ".meta")


def test_criterion_10_determinism(tmp_path):
    for name, threads in (("a", 1), ("b", 1), ("c", 4)):
        _pipeline(tmp_path / name, threads)
    files = _files(tmp_path / "a")
    same = all(_files(tmp_path / other) == files for other in ("b", "c"))
    same &= all(filecmp.cmp(tmp_path / "a" / f, tmp_path / other / f, shallow=False)
                for f in files for other in ("b", "c"))
    assert report(10, same, f"{len(files)} output files byte-identical across two runs and --threads 1/4")
