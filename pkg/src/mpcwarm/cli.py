"""Command-line front end for the warm-start pipeline.

Subcommands cover the full workflow: generate synthetic tracks, collect
expert demonstrations, behavior-clone the warm-start policy, fine-tune
it online, evaluate warm-start variants, and dump the curvature-vs-xte
scatter.  Every run writes a manifest with the fully resolved
configuration next to its outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench, learn, mpc, policy as policy_mod, synth, trackgeom
from .mpc import WarmStartSource

logger = logging.getLogger(__name__)

_SOURCES = {s.value: s for s in WarmStartSource}


def _load_config(path):
    if path is None:
        return {}
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ValueError("config file must hold a JSON object")
    return doc


def _mpc_config(doc, profile: str) -> mpc.MpcConfig:
    overrides = dict(doc.get("mpc", {}))
    overrides.update(doc.get(profile, {}))
    factory = mpc.expert_config if profile == "expert" else mpc.realtime_config
    return factory(**overrides)


def _finetune_config(doc) -> learn.FinetuneConfig:
    return learn.FinetuneConfig(**doc.get("finetune", {}))


def _load_tracks(paths, scale):
    tracks = {}
    for p in paths:
        path = Path(p)
        tracks[path.stem] = trackgeom.load_track(path, scale=scale)
    return tracks


def _write_manifest(out_dir: Path, command: str, args: argparse.Namespace,
                    extra=None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = {k: (str(v) if isinstance(v, Path) else v)
                for k, v in vars(args).items() if k != "func"}
    doc = {"command": command, "arguments": resolved}
    if extra:
        doc.update(extra)
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(doc, fh, indent=2)


def _cmd_gen_tracks(args) -> int:
    paths = synth.write_tracks(args.out_dir, half_width=args.half_width)
    _write_manifest(args.out_dir, "gen-tracks", args,
                    {"written": [str(p) for p in paths]})
    for p in paths:
        print(p)
    return 0


def _cmd_collect(args) -> int:
    doc = _load_config(args.config)
    expert = _mpc_config(doc, "expert")
    if args.tracks:
        tracks = list(_load_tracks(args.tracks, args.scale).values())
    else:
        tracks = [synth.make_track("hairpin")]
    start_indices = None
    if args.start_indices:
        start_indices = [int(s) for s in args.start_indices.split(",")]
    args.out_dir.mkdir(parents=True, exist_ok=True)
    demos = learn.collect_demos(
        tracks, expert, args.n, expert.vehicle,
        lookahead=args.lookahead, episode_steps=args.episode_steps,
        start_indices=start_indices, start_jitter=args.start_jitter,
        seed=args.seed, progress=True)
    out = args.out_dir / "demos.json"
    learn.save_demos(demos, out)
    _write_manifest(args.out_dir, "collect", args,
                    {"demonstrations": len(demos), "output": str(out)})
    print(out)
    return 0


def _cmd_train_bc(args) -> int:
    doc = _load_config(args.config)
    bc = doc.get("bc", {})
    demos = learn.load_demos(args.demos)
    rng = np.random.default_rng(args.seed)
    obs_dim = len(demos[0].obs)
    horizon = len(demos[0].target) // 2
    params = policy_mod.init_policy(obs_dim, horizon, rng)
    schedule = bc.get("schedule")  # [[epochs, learning_rate], ...]
    if schedule is None:
        schedule = [[bc.get("epochs", args.epochs),
                     bc.get("learning_rate", 1e-3)]]
    for stage_epochs, stage_lr in schedule:
        params, history = learn.train_bc(
            params, demos,
            epochs=int(stage_epochs),
            batch_size=bc.get("batch_size", 64),
            learning_rate=float(stage_lr),
            seed=args.seed)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    out = args.out_dir / "policy_bc.json"
    policy_mod.save(params, out)
    _write_manifest(args.out_dir, "train-bc", args, {
        "output": str(out),
        "final_train_loss": history[-1]["train_loss"],
        "final_val_loss": history[-1]["val_loss"],
    })
    print(out)
    return 0


def _cmd_finetune(args) -> int:
    doc = _load_config(args.config)
    realtime = _mpc_config(doc, "realtime")
    cfg = _finetune_config(doc)
    params = policy_mod.load(args.policy)
    rng = np.random.default_rng(args.seed)
    value_net = policy_mod.init_value(params.input_dim, rng)
    if args.tracks:
        tracks = list(_load_tracks(args.tracks, args.scale).values())
    else:
        tracks = [synth.make_track("hairpin")]
    teacher = _mpc_config(doc, "expert") if args.teacher == "expert" else None
    params, value_net, metrics = learn.finetune(
        params, value_net, tracks, realtime, cfg, args.steps,
        seed=args.seed, time_mode=args.time_mode, teacher=teacher,
        progress=True)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    out = args.out_dir / "policy_finetuned.json"
    policy_mod.save(params, out)
    metrics_path = args.out_dir / "metrics.csv"
    learn.write_metrics_csv(metrics, metrics_path)
    _write_manifest(args.out_dir, "finetune", args, {
        "output": str(out), "metrics": str(metrics_path),
        "batches": len(metrics),
    })
    print(out)
    return 0


def _parse_variant(spec: str) -> bench.Variant:
    name, _, rest = spec.partition("=")
    if not rest:
        raise ValueError(f"variant {spec!r} must look like name=source"
                         "[:policy_path]")
    source_name, _, policy_path = rest.partition(":")
    if source_name not in _SOURCES:
        raise ValueError(f"unknown warm-start source {source_name!r}; "
                         f"choose from {sorted(_SOURCES)}")
    source = _SOURCES[source_name]
    params = None
    if source is WarmStartSource.POLICY:
        if not policy_path:
            raise ValueError(f"variant {name!r} uses a policy warm start "
                             "but no policy checkpoint was provided")
        params = policy_mod.load(policy_path)
    return bench.Variant(name, source, params)


def _cmd_evaluate(args) -> int:
    doc = _load_config(args.config)
    realtime = _mpc_config(doc, "realtime")
    tracks = _load_tracks(args.tracks, args.scale)
    variants = tuple(_parse_variant(v) for v in args.variant)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    plan = bench.ExperimentPlan(tracks, variants, seeds,
                                max_steps=args.max_steps)
    report = bench.compare(plan, realtime)
    csv_path = args.out_dir / "report.csv"
    args.out_dir.mkdir(parents=True, exist_ok=True)
    csv_path.write_text(report.csv())
    (args.out_dir / "report.txt").write_text(report.summary)
    _write_manifest(args.out_dir, "evaluate", args, {"report": str(csv_path)})
    print(report.summary, end="")
    return 0


def _cmd_analyze(args) -> int:
    doc = _load_config(args.config)
    realtime = _mpc_config(doc, "realtime")
    track = trackgeom.load_track(args.track, scale=args.scale)
    params = policy_mod.load(args.policy) if args.policy else None
    source = _SOURCES[args.warm_start]
    if source is WarmStartSource.POLICY and params is None:
        raise ValueError("policy warm start requires --policy")
    records = bench.curvature_vs_xte(track, realtime, source, policy=params,
                                     max_steps=args.max_steps)
    out = args.out_dir / "curvature_xte.csv"
    args.out_dir.mkdir(parents=True, exist_ok=True)
    out.write_text(bench.scatter_csv(records))
    _write_manifest(args.out_dir, "analyze", args,
                    {"output": str(out), "records": len(records)})
    print(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mpcwarm",
        description="learned warm starts for gradient-free receding-horizon "
                    "control")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None,
                        help="JSON config overriding built-in defaults")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out-dir", type=Path, default=Path("runs/latest"))
    common.add_argument("--scale", type=float, default=1.0,
                        help="coordinate multiplier applied when loading tracks")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("gen-tracks", parents=[common],
                       help="write the synthetic track files")
    p.add_argument("--half-width", type=float, default=synth.DEFAULT_HALF_WIDTH)
    p.set_defaults(func=_cmd_gen_tracks)

    p = sub.add_parser("collect", parents=[common],
                       help="collect expert demonstrations")
    p.add_argument("--n", type=int, required=True,
                   help="number of demonstrations")
    p.add_argument("--tracks", nargs="*", default=None,
                   help="track CSV files (default: synthetic hairpin)")
    p.add_argument("--episode-steps", type=int, default=200)
    p.add_argument("--lookahead", type=int, default=10)
    p.add_argument("--start-indices", default=None,
                   help="comma-separated episode start waypoints")
    p.add_argument("--start-jitter", type=float, default=0.0,
                   help="scale of the random start-pose perturbation")
    p.set_defaults(func=_cmd_collect)

    p = sub.add_parser("train-bc", parents=[common],
                       help="behavior-clone the warm-start policy")
    p.add_argument("--demos", type=Path, required=True)
    p.add_argument("--epochs", type=int, default=200)
    p.set_defaults(func=_cmd_train_bc)

    p = sub.add_parser("finetune", parents=[common],
                       help="online fine-tuning against the fast solver")
    p.add_argument("--policy", type=Path, required=True)
    p.add_argument("--steps", type=int, default=4096)
    p.add_argument("--tracks", nargs="*", default=None)
    p.add_argument("--time-mode", choices=("iterations_proxy", "wall_clock"),
                   default="iterations_proxy")
    p.add_argument("--teacher", choices=("fast", "expert"), default="fast",
                   help="imitation-target solver: the fast MPC's own "
                        "solution or a high-budget expert solve on the "
                        "visited states")
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("evaluate", parents=[common],
                       help="compare warm-start variants over episodes")
    p.add_argument("--tracks", nargs="+", required=True)
    p.add_argument("--variant", action="append", required=True,
                   help="name=source[:policy_path]; source is one of "
                        f"{sorted(_SOURCES)}")
    p.add_argument("--seeds", default="0")
    p.add_argument("--max-steps", type=int, default=None)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("analyze", parents=[common],
                       help="curvature-vs-xte scatter for one episode")
    p.add_argument("--track", type=Path, required=True)
    p.add_argument("--warm-start", choices=sorted(_SOURCES), default="zeros")
    p.add_argument("--policy", type=Path, default=None)
    p.add_argument("--max-steps", type=int, default=None)
    p.set_defaults(func=_cmd_analyze)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
