"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import _accel
from . import analysis as A
from . import network as N
from . import retrieval as R
from . import tensor as T
from . import training as TR
from .benchmark import BENCHMARK, observe
from .features import AdaptiveNeighborhoodConfig, compute_local_features, write_feature_csv
from .gradcheck import check_network, check_primitives, toy_config
from .pointcloud import (CloudError, ManifestError, SubmapRecord, load_cloud,
                         load_manifest, normalize_cloud, save_cloud, write_manifest)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
PLACE_SPACING = 100.0
GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _default_seed() -> int:
    try:
        return int(os.environ.get("LPD_SEED", "42"))
    except ValueError:
        return 42


# ---------------------------------------------------------------------------
# config files: one key=value file may hold network and training keys


def _split_config(path: str | None) -> tuple[N.NetworkConfig, dict]:
    kv = N.parse_kv(Path(path).read_text(encoding="utf-8")) if path else {}
    profile = kv.pop("profile", "full")
    net_keys = {f.name for f in fields(N.NetworkConfig)}
    train_keys = {f.name for f in fields(TR.TrainConfig)}
    unknown = set(kv) - net_keys - train_keys
    if unknown:
        raise DataError(f"unknown config keys: {', '.join(sorted(unknown))}")
    net_kv = N.parse_config_values(N.NetworkConfig, {k: v for k, v in kv.items() if k in net_keys})
    train_kv = N.parse_config_values(TR.TrainConfig, {k: v for k, v in kv.items() if k in train_keys})
    if profile == "desk":
        net = N.desk_config(**net_kv)
    elif profile == "toy":
        net = toy_config(**net_kv)
    elif profile == "full":
        net = N.NetworkConfig(**net_kv)
    else:
        raise DataError(f"unknown profile {profile!r}")
    return net, train_kv


def _parse_synthetic(items: list[str]) -> dict:
    synth = dict(places=BENCHMARK["places"], obs=BENCHMARK["obs"], train_obs=None, yaw=BENCHMARK["yaw"],
                 noise=BENCHMARK["noise"])
    for it in items:
        if "=" not in it:
            raise UsageError(f"--synthetic expects key=value pairs, got {it!r}")
        k, v = it.split("=", 1)
        if k not in synth:
            raise UsageError(f"unknown --synthetic key {k!r}")
        synth[k] = float(v) if k in ("yaw", "noise") else int(v)
    if synth["train_obs"] is None:
        synth["train_obs"] = min(3, synth["obs"])
    if not 1 <= synth["train_obs"] <= synth["obs"]:
        raise UsageError("--synthetic needs 1 <= train_obs <= obs")
    return synth


def _ckpt_cfg_path(ckpt) -> Path:
    return Path(str(ckpt) + ".cfg")


def _load_model(ckpt) -> tuple[T.ParamStore, N.NetworkConfig]:
    cfg_path = _ckpt_cfg_path(ckpt)
    if not Path(ckpt).is_file() or not cfg_path.is_file():
        raise DataError(f"checkpoint {ckpt} or its config {cfg_path} is missing")
    cfg = N.NetworkConfig.load(cfg_path)
    store = N.init_params(cfg, 0)
    store.load_values(T.load_checkpoint(ckpt))
    return store, cfg


def _load_input_cloud(path, cfg: N.NetworkConfig):
    cloud = load_cloud(path)
    if not cloud.normalized:
        cloud = normalize_cloud(cloud)
    if len(cloud) != cfg.n_points:
        raise DataError(f"{path}: expected {cfg.n_points} points, found {len(cloud)}")
    return cloud


def _describe_manifest(manifest, store, cfg):
    prepared = [N.prepare_cloud(_load_input_cloud(r.cloud_path, cfg), cfg) for r in manifest.records]
    return N.describe(prepared, store, cfg)


# ---------------------------------------------------------------------------
# commands


def cmd_extract(args):
    cloud = load_cloud(args.cloud)
    if not args.raw:
        cloud = normalize_cloud(cloud)
    cfg = AdaptiveNeighborhoodConfig(args.k_min, args.k_max, args.k_step)
    write_feature_csv(args.out, compute_local_features(cloud, cfg))


def cmd_synth(args):
    out = Path(args.out)
    (out / "clouds").mkdir(parents=True, exist_ok=True)
    train, test = [], []
    for p in range(args.places):
        for o in range(args.obs):
            c = observe(p, o, args.points, args.yaw, args.noise)
            cp = out / "clouds" / f"p{p:04d}_o{o}.bin"
            save_cloud(cp, c)
            rec = SubmapRecord(f"p{p:04d}_o{o}", p * PLACE_SPACING, 0.0, str(cp))
            (train if o < args.train_obs else test).append(rec)
    write_manifest(out / "train.csv", train)
    if test:
        write_manifest(out / "test.csv", test)
    print(f"wrote {len(train) + len(test)} clouds to {out}")


def cmd_train(args):
    net_cfg, train_kv = _split_config(args.config)
    train_kv.setdefault("seed", args.seed)
    if args.epochs is not None:
        train_kv["epochs"] = args.epochs
    tcfg = TR.TrainConfig(**train_kv)
    if args.synthetic is not None:
        synth = _parse_synthetic(args.synthetic)
        items = [(p, o) for p in range(synth["places"]) for o in range(synth["train_obs"])]
        clouds = [observe(p, o, net_cfg.n_points, synth["yaw"], synth["noise"]) for p, o in items]
        reg = TR.PlaceRegistry.from_labels([p for p, _ in items])
    elif args.manifest:
        manifest = load_manifest(args.manifest, args.radius)
        clouds = [_load_input_cloud(r.cloud_path, net_cfg) for r in manifest.records]
        reg = TR.PlaceRegistry.from_positions(manifest.positions, manifest.positive_radius)
    else:
        raise UsageError("train needs --synthetic or --manifest")
    prepared = [N.prepare_cloud(c, net_cfg) for c in clouds]
    net_cfg.save(_ckpt_cfg_path(args.out))
    result = TR.train(prepared, reg, net_cfg, tcfg, checkpoint=args.out)
    T.save_checkpoint(args.out, result.store)
    if args.trace:
        TR.write_trace(args.trace, result.trace)
    means = result.epoch_means()
    if means:
        print(f"epochs={len(means)} first_loss={means[0]:.6f} final_loss={means[-1]:.6f}")


def cmd_index(args):
    store, cfg = _load_model(args.ckpt)
    manifest = load_manifest(args.manifest)
    desc = _describe_manifest(manifest, store, cfg)
    R.save_index(args.out, R.DescriptorIndex(manifest.ids, desc, manifest.positions))
    Path(str(args.out) + ".meta").write_text(f"ckpt={Path(args.ckpt).resolve()}\n", encoding="utf-8")
    print(f"indexed {len(manifest)} submaps")


def cmd_query(args):
    index = R.load_index(args.index)
    ckpt = args.ckpt
    if ckpt is None:
        meta = Path(str(args.index) + ".meta")
        if not meta.is_file():
            raise DataError("no --ckpt given and the index has no checkpoint record")
        ckpt = N.parse_kv(meta.read_text(encoding="utf-8"))["ckpt"]
    store, cfg = _load_model(ckpt)
    desc = N.forward_full(_load_input_cloud(args.cloud, cfg), store, cfg)
    rows = R.query_topn(index, desc, args.n)
    lines = ["id,distance"] + [f"{i},{d!r}" for i, d in rows]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _parse_ns(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"bad --ns list {text!r}") from None


def cmd_eval(args):
    store, cfg = _load_model(args.ckpt)
    db = load_manifest(args.manifest, args.radius)
    index = R.DescriptorIndex(db.ids, _describe_manifest(db, store, cfg), db.positions)
    if args.queries:
        qm = load_manifest(args.queries, args.radius)
        qdesc = _describe_manifest(qm, store, cfg)
        report = R.recall_at_n(qdesc, index, _parse_ns(args.ns), query_ids=qm.ids,
                               query_positions=qm.positions, positive_radius=args.radius, exclude_self=True)
    else:
        report = R.recall_at_n(index.descriptors, index, _parse_ns(args.ns), query_ids=db.ids,
                               query_positions=db.positions, positive_radius=args.radius, exclude_self=True)
    report.write_csv(args.out)
    print(report.summary())


def cmd_robustness(args):
    store, cfg = _load_model(args.ckpt)
    try:
        angles = [float(a) for a in args.angles.split(",") if a.strip()]
    except ValueError:
        raise UsageError(f"bad --angles list {args.angles!r}") from None
    rows = R.robustness_eval(store, cfg, range(args.places), angles, args.noise, args.repeats, args.seed,
                             observation_seed=args.obs_seed)
    if args.out:
        R.write_robustness_csv(args.out, rows)
    print("angle_deg,mean_mistakes,max_mistakes")
    for r in rows:
        print(f"{r.angle_deg!r},{r.mean_mistakes!r},{r.max_mistakes}")


def cmd_analyze(args):
    index = R.load_index(args.index)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.similarity:
        A.write_similarity_csv(out / "similarity.csv", A.similarity_map(index, args.similarity))
    if args.uniqueness:
        A.write_uniqueness_csv(out / "uniqueness.csv", A.uniqueness(index))
    if args.clusters:
        res = A.cluster_descriptors(index, args.clusters, seed=args.seed)
        A.write_cluster_csv(out / "clusters.csv", index, res.labels)
        print(f"clusters={args.clusters} wcss={res.wcss!r}")


def cmd_gradcheck(args):
    net_cfg, _ = _split_config(args.config) if args.config else (toy_config(), {})
    prim = check_primitives(seed=args.seed)
    for name, err in prim.items():
        print(f"primitive {name} rel_err={err:.3e}")
    res = check_network(net_cfg, seed=args.seed, max_entries=args.max_entries)
    print(f"network worst={res.worst_param} max_rel_err={res.max_rel_err:.3e}")
    worst = max([res.max_rel_err, *prim.values()])
    print(f"max relative error {worst:.3e}")
    if worst >= GRADCHECK_TOL:
        raise T.NumericError(f"gradient check failed: {worst:.3e} >= {GRADCHECK_TOL:g}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lpdnet", description="Point cloud place description pipeline.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--seed", type=int, default=_default_seed(), help="global seed (env LPD_SEED, default 42)")
        sp.add_argument("--threads", type=int, default=None, help="worker threads for feature extraction")
        sp.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        return sp

    sp = common(sub.add_parser("extract", help="dump the 10 local features of a cloud"))
    sp.add_argument("--cloud", required=True, help="binary float64 x,y,z cloud file")
    sp.add_argument("--out", required=True, help="feature CSV to write")
    sp.add_argument("--raw", action="store_true", help="skip normalization to [-1, 1]")
    sp.add_argument("--k-min", type=int, default=10, help="smallest neighbour count in the grid")
    sp.add_argument("--k-max", type=int, default=100, help="largest neighbour count in the grid")
    sp.add_argument("--k-step", type=int, default=10, help="grid step")
    sp.set_defaults(func=cmd_extract)

    sp = common(sub.add_parser("synth", help="write a synthetic dataset with train/test manifests"))
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--places", type=int, default=50, help="number of places")
    sp.add_argument("--obs", type=int, default=5, help="observations per place")
    sp.add_argument("--train-obs", type=int, default=3, help="observations per place in train.csv")
    sp.add_argument("--points", type=int, default=256, help="points per cloud")
    sp.add_argument("--yaw", type=float, default=BENCHMARK["yaw"], help="max random heading offset per observation (deg)")
    sp.add_argument("--noise", type=float, default=BENCHMARK["noise"], help="fraction of points replaced by noise")
    sp.set_defaults(func=cmd_synth)

    sp = common(sub.add_parser("train", help="train with the lazy quadruplet loss"))
    sp.add_argument("--synthetic", nargs="+", metavar="KEY=VALUE",
                    help="synthetic data: places=, obs=, train_obs=, yaw=, noise=")
    sp.add_argument("--manifest", help="training manifest CSV")
    sp.add_argument("--radius", type=float, default=25.0, help="positive radius in meters (manifest data)")
    sp.add_argument("--config", help="key=value file with network and training keys (profile=desk|toy|full)")
    sp.add_argument("--epochs", type=int, default=None, help="override the configured epoch count")
    sp.add_argument("--out", required=True, help="checkpoint path (config written to <out>.cfg)")
    sp.add_argument("--trace", help="loss trace CSV (epoch,batch,loss)")
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("index", help="describe a manifest into an index file"))
    sp.add_argument("--ckpt", required=True, help="trained checkpoint")
    sp.add_argument("--manifest", required=True, help="manifest CSV of database submaps")
    sp.add_argument("--out", required=True, help="index file to write")
    sp.set_defaults(func=cmd_index)

    sp = common(sub.add_parser("query", help="top-N retrieval for one cloud"))
    sp.add_argument("--index", required=True, help="index file")
    sp.add_argument("--cloud", required=True, help="query cloud file")
    sp.add_argument("--n", type=int, default=5, help="number of results")
    sp.add_argument("--ckpt", help="checkpoint (defaults to the one recorded with the index)")
    sp.add_argument("--out", help="CSV output (default stdout)")
    sp.set_defaults(func=cmd_query)

    sp = common(sub.add_parser("eval", help="Recall@N and Recall@1%% report"))
    sp.add_argument("--manifest", required=True, help="database manifest")
    sp.add_argument("--queries", help="query manifest (default: leave-one-out over the database)")
    sp.add_argument("--ckpt", required=True, help="trained checkpoint")
    sp.add_argument("--out", required=True, help="recall CSV (N,recall)")
    sp.add_argument("--radius", type=float, default=25.0, help="true-positive radius in meters")
    sp.add_argument("--ns", default=",".join(str(i) for i in range(1, 26)), help="comma-separated N values")
    sp.set_defaults(func=cmd_eval)

    sp = common(sub.add_parser("robustness", help="rotation + noise mistake counts"))
    sp.add_argument("--ckpt", required=True, help="trained checkpoint")
    sp.add_argument("--angles", default="1,2,3,4,5,10,20,30", help="comma-separated rotation angles (deg)")
    sp.add_argument("--noise", type=float, default=0.1, help="fraction of points replaced by noise")
    sp.add_argument("--repeats", type=int, default=8, help="seeded repetitions per angle")
    sp.add_argument("--places", type=int, default=50, help="synthetic places 0..places-1")
    sp.add_argument("--obs-seed", type=int, default=0, help="observation indexed for each place")
    sp.add_argument("--out", help="robustness CSV (angle_deg,mean_mistakes,max_mistakes)")
    sp.set_defaults(func=cmd_robustness)

    sp = common(sub.add_parser("analyze", help="similarity, uniqueness and clustering of an index"))
    sp.add_argument("--index", required=True, help="index file")
    sp.add_argument("--out-dir", required=True, help="directory for the CSV outputs")
    sp.add_argument("--similarity", metavar="ID", help="write distances from this place to all others")
    sp.add_argument("--uniqueness", action="store_true", help="write normalized uniqueness scores")
    sp.add_argument("--clusters", type=int, metavar="K", help="cluster descriptors into K groups")
    sp.set_defaults(func=cmd_analyze)

    sp = common(sub.add_parser("gradcheck", help="finite-difference gradient verification"))
    sp.add_argument("--config", help="key=value network config (default: 32-point toy profile)")
    sp.add_argument("--max-entries", type=int, default=None, help="sample this many entries per parameter")
    sp.set_defaults(func=cmd_gradcheck)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            raise UsageError("a command is required")
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    _accel.set_threads(args.threads)
    try:
        args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (T.NumericError, TR.TrainingError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CloudError, ManifestError, R.RetrievalError, N.NetworkError, TR.SamplingError,
            OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
