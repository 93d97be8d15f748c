"""Command-line entry point: ``livingarch <subcommand> [--seed] [--config] [--out]``."""
import argparse
import dataclasses
import json
import logging
import math
import os
import sys

from .agent import DDPGConfig
from .analysis import ActionKMeans, write_cluster_csvs
from .harness import RunConfig, action_rows, bench_simplified, load_manifest, report, run

logger = logging.getLogger("livingarch")


def _load_config(args, modes=None):
    if args.config:
        cfg = RunConfig.from_yaml(args.config)
    else:
        cfg = RunConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seeds"] = {k: args.seed for k in ("sim", "agent", "visitors")}
    if args.out:
        overrides["output_dir"] = os.path.abspath(args.out)
    if modes:
        overrides["modes"] = modes
        overrides["slot_durations"] = cfg.slot_durations[:len(modes)]
    if overrides:
        fields = {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg)}
        fields.update(overrides)
        # overridden runs hash their effective settings, not the file bytes
        fields["source_bytes"] = b""
        cfg = RunConfig(**fields)
    return cfg


def cmd_simulate(args):
    cfg = _load_config(args, modes=("PB",))
    manifest = run(cfg)
    print(f"wrote {len(manifest['slots'])} PB slot log(s) to {os.path.join(cfg.resolve(cfg.output_dir), cfg.run_id)}")
    return 0


def cmd_train(args):
    cfg = _load_config(args)
    manifest = run(cfg)
    for lin in manifest["lineage"]:
        print(f"day {lin['day']}: {lin['loaded'] or 'fresh'} -> {lin['saved']}")
    return 0


def cmd_bench(args):
    seeds = list(range(args.seed or 0, (args.seed or 0) + args.seeds))
    passed = 0
    results = []

    def progress(seed, ep, r, oracle, sigma):
        if args.verbose:
            print(f"seed {seed} episode {ep:3d} reward {r:.3f} oracle {oracle:.3f} sigma {sigma:.4g}", flush=True)

    for seed in seeds:
        res = bench_simplified(seed, episodes=args.episodes, episode_length=args.episode_length,
                               config=DDPGConfig(tau=args.tau), progress=progress)
        passed += res.passed
        results.append(dataclasses.asdict(res))
        print(f"seed {seed}: final ratio {res.final_ratio:.3f} {'PASS' if res.passed else 'FAIL'}", flush=True)
    need = args.required if args.required is not None else math.ceil(0.6 * len(seeds))
    ok = passed >= need
    print(f"{passed}/{len(seeds)} seeds reached the threshold (need {need}): {'PASS' if ok else 'FAIL'}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "bench_simplified.json"), "w") as fh:
            json.dump(results, fh, indent=2)
    return 0 if ok else 1


def cmd_analyze(args):
    manifests = [load_manifest(p) for p in args.runs]
    bundle = report(manifests, args.out or "report", calibration_window=args.calibration_window)
    for mode, s in sorted(bundle["summary"].items()):
        print(f"{mode}: e = {s['e_mean']:.4f} +/- {s['e_se']:.4f}, n_active = {s['n_active_mean']:.3f}")
    for (metric, a, b), (u, p) in sorted(bundle["mann_whitney"].items()):
        print(f"Mann-Whitney {metric} {a} vs {b}: U = {u:g}, p = {p:.4g}")
    return 0


def cmd_cluster(args):
    X, t, day = action_rows(args.runs)
    if len(X) < args.k:
        print(f"only {len(X)} actions logged, need at least k={args.k}", file=sys.stderr)
        return 1
    model = ActionKMeans(n_clusters=args.k, random_state=args.seed or 0).fit(X)
    out = args.out or "clusters"
    os.makedirs(out, exist_ok=True)
    write_cluster_csvs(out, X, model, t, day)
    print(f"{len(X)} actions in {args.k} clusters, inertia {model.inertia_:.4f}; CSVs in {out}")
    return 0


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="seed for every random stream")
    common.add_argument("--config", help="run configuration (YAML)")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="livingarch", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("simulate", parents=[common], help="behaviour-engine-only rollouts")
    p.set_defaults(func=cmd_simulate)
    p = sub.add_parser("train", parents=[common], help="scheduled PB/PLA runs with checkpoints")
    p.set_defaults(func=cmd_train)
    p = sub.add_parser("bench-simplified", parents=[common], help="convergence benchmark on the brightest-LED task")
    p.add_argument("--seeds", type=int, default=5, help="number of consecutive seeds")
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--episode-length", type=int, default=1000)
    p.add_argument("--tau", type=float, default=DDPGConfig.tau)
    p.add_argument("--required", type=int, default=None, help="seeds that must pass (default: 3 of 5)")
    p.set_defaults(func=cmd_bench)
    p = sub.add_parser("analyze", parents=[common], help="engagement report over run directories")
    p.add_argument("runs", nargs="+", help="run directories or manifest files")
    p.add_argument("--calibration-window", nargs=2, type=float, metavar=("START", "END"),
                   help="visitor-free window (s) for a calibrated variant of every table")
    p.set_defaults(func=cmd_analyze)
    p = sub.add_parser("cluster", parents=[common], help="K-Means over logged learner actions")
    p.add_argument("runs", nargs="+", help="run directories or manifest files")
    p.add_argument("-k", type=int, default=6)
    p.set_defaults(func=cmd_cluster)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, RuntimeError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
