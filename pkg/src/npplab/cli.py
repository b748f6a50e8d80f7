"""Operator entry points: train the advisor tree, roll policies on the
plant, serve the session API, run simulated-user fleets, and build
analysis reports.

Exit codes: 0 ok, 2 validation error, 3 training failure, 4 protocol
violation. Every subcommand honors --seed and prints one final JSON
status line on stdout.
"""
from __future__ import annotations

import argparse
import json
import random
import sys
import tempfile
from pathlib import Path

import yaml

from . import analysis as analysis_mod
from .cqi import TrainConfig, TrainingFailedError, train, train_config_from_dict, write_metrics
from .plant import (
    Action,
    ConfigError,
    episode_anomalies,
    episode_energy,
    load_plant_config,
    rollout,
    state_vector,
    write_trace,
)
from .session import Condition, ProtocolError
from .simuser import PolicyKind, run_fleet
from .tree import load_tree, save_tree, serialize

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_TRAINING = 3
EXIT_PROTOCOL = 4


def _status(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


def _load_train_config(path, seed):
    if path:
        doc = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: train config must be a mapping")
        try:
            cfg = train_config_from_dict(doc)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    else:
        cfg = TrainConfig()
    if seed is not None:
        cfg.seed = seed
    return cfg


def cmd_validate_config(args) -> int:
    try:
        plant = load_plant_config(args.config)
        train_cfg = _load_train_config(args.train_config, None)
    except ConfigError as exc:
        _status({"status": "invalid", "error": str(exc)})
        return EXIT_VALIDATION
    _status({
        "status": "ok",
        "plant_schema_version": plant.schema_version,
        "initial_state": state_vector(plant.initial_state),
        "episodes": train_cfg.episodes,
        "seed": train_cfg.seed,
    })
    return EXIT_OK


def cmd_train(args) -> int:
    try:
        plant = load_plant_config(args.config)
        cfg = _load_train_config(args.train_config, args.seed)
    except ConfigError as exc:
        _status({"status": "invalid", "error": str(exc)})
        return EXIT_VALIDATION

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        result = train(plant, cfg)
    except TrainingFailedError as exc:
        _status({"status": "training_failed", "error": str(exc),
                 "episodes_run": exc.episodes_run, "tree_nodes": exc.tree_nodes,
                 "anomaly_step": exc.anomaly_step})
        return EXIT_TRAINING

    # write atomically so a failed run leaves no partial outputs
    tree_path = out_dir / "tree.json"
    metrics_path = out_dir / "metrics.jsonl"
    with tempfile.NamedTemporaryFile("w", dir=out_dir, delete=False, suffix=".tmp") as fh:
        fh.write(serialize(result.tree))
        tmp = Path(fh.name)
    tmp.replace(tree_path)
    write_metrics(metrics_path, result.metrics)

    if cfg.episodes == 0:
        print("warning: episodes=0, wrote an untrained single-leaf tree", file=sys.stderr)
    _status({"status": "ok", "tree": str(tree_path), "metrics": str(metrics_path),
             "nodes": len(result.tree.nodes), "splits": result.total_splits,
             "seed": cfg.seed})
    return EXIT_OK


def cmd_rollout(args) -> int:
    try:
        plant = load_plant_config(args.config)
    except ConfigError as exc:
        _status({"status": "invalid", "error": str(exc)})
        return EXIT_VALIDATION

    if args.policy == "greedy":
        tree = load_tree(args.tree)
        policy = lambda s: tree.best_action(state_vector(s))
    else:
        rng = random.Random(args.seed)
        policy = lambda s: Action(rng.randrange(12))

    trace = rollout(plant, policy, args.steps)
    if args.out:
        write_trace(args.out, trace)
    _status({"status": "ok", "steps": args.steps,
             "energy": episode_energy(trace), "anomalies": episode_anomalies(trace),
             "trace": args.out, "seed": args.seed})
    return EXIT_OK


def cmd_simulate(args) -> int:
    try:
        plant = load_plant_config(args.config)
    except ConfigError as exc:
        _status({"status": "invalid", "error": str(exc)})
        return EXIT_VALIDATION
    condition = Condition(args.condition)
    tree = None
    if condition != Condition.SELF_TAUGHT:
        if not args.tree:
            _status({"status": "invalid", "error": "agent conditions need --tree"})
            return EXIT_VALIDATION
        tree = load_tree(args.tree)
    try:
        logs = run_fleet(
            n=args.fleet_size, condition=condition, policy_kind=PolicyKind(args.policy),
            plant_config=plant, tree=tree, base_seed=args.seed, out_dir=args.out,
            training_duration=args.training_seconds,
            assessment_duration=args.assessment_seconds,
            p_what=args.p_what, p_why=args.p_why, follow_prob=args.follow_prob)
    except ProtocolError as exc:
        _status({"status": "protocol_violation", "error": str(exc)})
        return EXIT_PROTOCOL
    _status({"status": "ok", "sessions": len(logs), "out": args.out,
             "seed": args.seed,
             "total_steps": sum(len(l.records) for l in logs),
             "total_why": sum(analysis_mod.question_counts(l)[1] for l in logs)})
    return EXIT_OK


def cmd_analyze(args) -> int:
    try:
        groups = analysis_mod.load_group_dirs(args.logs)
        report = analysis_mod.group_report(groups, n_slices=args.slices)
    except analysis_mod.AnalysisError as exc:
        _status({"status": "invalid", "error": str(exc)})
        return EXIT_VALIDATION
    analysis_mod.write_report(report, args.out)
    _status({"status": "ok", "out": args.out,
             "groups": {name: g.sessions for name, g in report.groups.items()}})
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .service import build_service

    app = build_service(plant_config_path=args.config, tree_path=args.tree,
                        log_dir=args.log_dir)
    _status({"status": "serving", "host": args.host, "port": args.port})
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="npplab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate-config", help="validate plant/train config files")
    p.add_argument("--config", default=None, help="plant config YAML (default: packaged)")
    p.add_argument("--train-config", default=None, help="train config YAML")
    p.set_defaults(fn=cmd_validate_config)

    p = sub.add_parser("train", help="train the advisor tree")
    p.add_argument("--config", default=None)
    p.add_argument("--train-config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("rollout", help="roll a policy on the plant, write a trace")
    p.add_argument("--config", default=None)
    p.add_argument("--tree", default=None)
    p.add_argument("--policy", choices=["greedy", "random"], default="greedy")
    p.add_argument("--steps", type=int, default=180)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="trace JSONL path")
    p.set_defaults(fn=cmd_rollout)

    p = sub.add_parser("simulate", help="run a simulated-user fleet")
    p.add_argument("--config", default=None)
    p.add_argument("--tree", default=None)
    p.add_argument("--condition", choices=[c.value for c in Condition], required=True)
    p.add_argument("--policy", choices=[k.value for k in PolicyKind],
                   default=PolicyKind.SELF_ANCHORED.value)
    p.add_argument("--fleet-size", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="directory for session logs")
    p.add_argument("--training-seconds", type=float, default=1800.0)
    p.add_argument("--assessment-seconds", type=float, default=600.0)
    p.add_argument("--p-what", type=float, default=1.0)
    p.add_argument("--p-why", type=float, default=0.5)
    p.add_argument("--follow-prob", type=float, default=0.5)
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("analyze", help="reports from session log directories")
    p.add_argument("--logs", nargs="+", required=True, help="one directory per group")
    p.add_argument("--out", required=True)
    p.add_argument("--slices", type=int, default=20)
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("serve", help="serve the session wire API")
    p.add_argument("--config", default=None)
    p.add_argument("--tree", default=None)
    p.add_argument("--log-dir", default=None)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(fn=cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
