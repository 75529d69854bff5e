"""``flowguide`` command line: benchmark experiments and data utilities."""

import argparse
import json
import logging
import os
import sys

import numpy as np

from ..policies import GmmPolicy, save_policy, train_flow_policy, write_dataset_csv, read_dataset_csv
from ..sdf import build_occupancy, compute_sdf, export_grid, read_cloud
from ..sim import generate_dataset
from .config import load_config
from .experiments import ResultsConflict, run_experiment, run_latency

EXPERIMENTS = ("sweep-lambda", "ablation", "synergy", "posthoc", "latency", "demo-follow")


def _add_common(p):
    p.add_argument("--config", help="TOML or JSON experiment config")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--trials", type=int, help="trials per cell (overrides the config)")
    p.add_argument("--parallel", type=int, default=1, help="worker processes")


def build_parser():
    parser = argparse.ArgumentParser(prog="flowguide", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        _add_common(sub.add_parser(name, help=f"run the {name} experiment"))

    tp = sub.add_parser("train-policy", help="fit a policy to a chunk dataset")
    _add_common(tp)
    tp.add_argument("--data", help="dataset CSV (generated from --family when omitted)")
    tp.add_argument("--family", default="cluttered", help="scene family for generated data")
    tp.add_argument("--episodes", type=int, default=200)
    tp.add_argument("--kind", choices=("gmm", "mlp"), default="gmm")
    tp.add_argument("--components", type=int, default=3)
    tp.add_argument("--epochs", type=int, default=200)
    tp.add_argument("--reg-covar", type=float, default=0.01,
                    help="GMM variance floor (scripted data is near-deterministic)")

    bg = sub.add_parser("build-grid", help="voxelise a point cloud and export its distance grid")
    _add_common(bg)
    bg.add_argument("--cloud", required=True, help="ASCII PLY or CSV point cloud")
    bg.add_argument("--voxel-size", type=float, default=0.02)
    bg.add_argument("--bounds", type=float, nargs=6, metavar=("X0", "Y0", "Z0", "X1", "Y1", "Z1"))
    bg.add_argument("--barrier-d", type=float, default=0.15)
    return parser


def _train(args):
    out = args.out or "policy"
    os.makedirs(out, exist_ok=True)
    seed = 0 if args.seed is None else args.seed
    if args.data:
        data = read_dataset_csv(args.data)
    else:
        data = generate_dataset(args.family, args.episodes, seed=seed)
        write_dataset_csv(os.path.join(out, "dataset.csv"), data)
    if args.kind == "gmm":
        X = np.stack([c for _, c in data])
        y = [o.rsplit("/", 1)[-1] for o, _ in data]
        policy = GmmPolicy(n_components=args.components, random_state=seed,
                           reg_covar=args.reg_covar).fit(X, y)
    else:
        policy = train_flow_policy(data, epochs=args.epochs, seed=seed)
    path = os.path.join(out, "policy.json")
    save_policy(policy, path)
    print(f"wrote {path} ({len(data)} chunks)")
    return 0


def _build_grid(args):
    cloud = read_cloud(args.cloud)
    if args.bounds:
        bounds = (np.array(args.bounds[:3]), np.array(args.bounds[3:]))
    else:
        if len(cloud) == 0:
            raise SystemExit("--bounds is required for an empty cloud")
        pad = args.barrier_d
        bounds = (cloud.points.min(0) - pad, cloud.points.max(0) + pad)
    occ = build_occupancy(cloud, args.voxel_size, bounds)
    sdf = compute_sdf(occ, args.barrier_d)
    out = args.out or "grid"
    os.makedirs(out, exist_ok=True)
    meta = export_grid(sdf, os.path.join(out, "grid"))
    meta["dropped_points"] = occ.dropped
    print(json.dumps(meta))
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "train-policy":
        return _train(args)
    if args.command == "build-grid":
        return _build_grid(args)
    try:
        cfg = load_config(args.command, args.config, seed=args.seed, trials=args.trials, out=args.out)
    except (ValueError, KeyError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if args.command == "latency":
        report = run_latency(cfg)
        print(json.dumps({k: report[k] for k in ("ratio_inference", "ratio_loop",
                                                  "grid_rebuild_64_seconds")}, indent=2))
        return 0
    try:
        table = run_experiment(cfg, parallel=args.parallel)
    except ResultsConflict as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(table.format())
    print(f"results in {cfg.out}/ (episodes.jsonl, summary.csv, meta.json)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
