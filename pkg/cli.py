"""
Command-line front end.

    python cli.py train --config c.cfg --seed 3 --out runs/
    python cli.py eval --checkpoint runs/final.ckpt --episodes 20
    python cli.py suite --config c.cfg --algorithms MADDPG,MH-MADDPG --out suite/
    python cli.py plot --in suite/ --metric success_rate --scale fifth-root
    python cli.py gradcheck [--corrupt-op tanh]
    python cli.py oracle

Exit status: 0 success, 1 failure, 2 usage error, 3 suite with failed runs.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import List, Optional

from envs import TrajectoryRecorder, make_env
from metrics_store import PLOT_METRICS, PLOT_SCALES, find_metrics_files, plot_curves, read_metrics, write_metrics
from networks import load_checkpoint, save_checkpoint
from oracles import FD_STEP, FD_TOLERANCE, coordination_oracle, corrupted_derivative, loss_value_oracle, run_gradcheck
from run_config import ALGORITHM_PRESETS, TrainConfig, load_config, parse_overrides, preset, suite_configs, write_config
from tensor_autodiff import OP_KINDS
from training_harness import ROLE_EVAL, MultiAgentLearner, RunRecord, evaluate, role_rng, run_suite, train

logger = logging.getLogger("mh_marl")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_SUITE_PARTIAL = 3

RUN_FILES = ("metrics.csv", "final.ckpt", "config.cfg")
LOG_FORMAT = "%(asctime)s--%(levelname)s--%(message)s"


class OutputExists(RuntimeError):
    """Refusing to clobber outputs without --overwrite."""


def setup_logger(level: str = "INFO", log_file: Optional[str] = None):
    formatter = logging.Formatter(LOG_FORMAT)
    root = logging.getLogger()
    root.handlers.clear()
    root.setLevel(level.upper())
    console = logging.StreamHandler()
    console.setFormatter(formatter)
    root.addHandler(console)
    if log_file:
        file_handler = logging.FileHandler(log_file)
        file_handler.setFormatter(formatter)
        root.addHandler(file_handler)


def _guard_outputs(paths: List[str], overwrite: bool):
    existing = [p for p in paths if os.path.exists(p)]
    if existing and not overwrite:
        raise OutputExists(f"refusing to overwrite {', '.join(existing)} (pass --overwrite)")


def _resolve_config(args) -> TrainConfig:
    overrides = parse_overrides(args.set)
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    config = load_config(args.config, overrides)
    if getattr(args, "algorithm", None):
        config = preset(args.algorithm, config)
    return config


def save_run(record: RunRecord, out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    write_metrics(record.rows, os.path.join(out_dir, "metrics.csv"))
    save_checkpoint(record.checkpoint, os.path.join(out_dir, "final.ckpt"))
    write_config(record.config, os.path.join(out_dir, "config.cfg"))


# ----------------------------------------------------------------------------
# Commands
# ----------------------------------------------------------------------------

def cmd_train(args) -> int:
    config = _resolve_config(args)
    _guard_outputs([os.path.join(args.out, name) for name in RUN_FILES], args.overwrite)
    record = train(config)
    save_run(record, args.out)
    last = record.rows[-1]
    print(f"{config.algorithm} seed={config.seed}: success_rate={last.success_rate:.3f} "
          f"mean_return={last.mean_return:.4f} ({record.wall_clock:.1f}s) -> {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    config_path = args.config or os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), "config.cfg")
    args.config = config_path
    config = _resolve_config(args)
    tensors = load_checkpoint(args.checkpoint)
    env = make_env(config.env, config.n_agents)
    learner = MultiAgentLearner.from_checkpoint(env.joint, config, tensors)

    recorder = None
    if args.dump_trajectory:
        _guard_outputs([args.dump_trajectory], args.overwrite)
        recorder = TrajectoryRecorder(args.dump_trajectory)
    episodes = args.episodes or config.eval_episodes
    result = evaluate(learner.actors(), env, episodes, role_rng(config.seed, ROLE_EVAL), recorder)
    if recorder is not None:
        recorder.close()
    per_agent = ", ".join(f"{r:.4f}" for r in result.agent_returns)
    print(f"success_rate={result.success_rate:.3f} mean_return={result.mean_return:.4f} "
          f"agent_returns=[{per_agent}] episodes={episodes}")
    return EXIT_OK


def cmd_suite(args) -> int:
    base = _resolve_config(args)
    algorithms = [a.strip() for a in args.algorithms.split(",") if a.strip()]
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    configs = suite_configs(base, algorithms, seeds)
    run_dirs = [os.path.join(args.out, c.algorithm, f"seed{c.seed}") for c in configs]
    _guard_outputs([os.path.join(d, name) for d in run_dirs for name in RUN_FILES], args.overwrite)

    records = run_suite(configs, args.parallelism)
    failed = 0
    for record, run_dir in zip(records, run_dirs):
        if record.ok:
            save_run(record, run_dir)
            last = record.rows[-1]
            print(f"{record.config.algorithm} seed={record.config.seed}: "
                  f"success_rate={last.success_rate:.3f} mean_return={last.mean_return:.4f}")
        else:
            failed += 1
            print(f"{record.config.algorithm} seed={record.config.seed}: FAILED {record.error}", file=sys.stderr)
    return EXIT_SUITE_PARTIAL if failed else EXIT_OK


def cmd_plot(args) -> int:
    files = find_metrics_files(args.input)
    if not files:
        raise FileNotFoundError(f"no metrics.csv found under {args.input}")
    rows = [row for path in files for row in read_metrics(path)]
    out = args.out or os.path.join(args.input, f"{args.metric}.svg")
    _guard_outputs([out], args.overwrite)
    plot_curves(rows, args.metric, out, args.scale)
    print(f"plotted {len(files)} run(s) -> {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.corrupt_op:
        with corrupted_derivative(args.corrupt_op):
            report = run_gradcheck(args.draws, args.seed, args.step, args.tolerance, args.coords,
                                   full_size_draws=args.full_size_draws)
    else:
        report = run_gradcheck(args.draws, args.seed, args.step, args.tolerance, args.coords,
                               full_size_draws=args.full_size_draws)
    checked = sum(r.checked for r in report.results)
    skipped = sum(r.skipped for r in report.results)
    print(f"gradcheck: {len(report.results)} cases, {checked} coordinates ({skipped} skipped at kinks), "
          f"max relative error {report.max_rel_error:.3e}")
    for failure in report.failures():
        print(f"  FAIL {failure.name}: {failure.max_rel_error:.3e} at {failure.worst}", file=sys.stderr)
    return EXIT_OK if report.passed else EXIT_FAILURE


def cmd_oracle(args) -> int:
    values = loss_value_oracle(args.instances, args.seed)
    coordination = coordination_oracle()
    print(f"loss values: {len(values.checks)} checks, max abs error {values.max_error:.3e}")
    print(f"coordination grid: optimum {coordination.best_joint} total {coordination.best_total:.3e}, "
          f"best response {'ok' if coordination.best_response_ok else 'WRONG'}")
    for mismatch in values.mismatches()[:20]:
        print(f"  MISMATCH {mismatch.name}: graph {mismatch.graph_value!r} vs {mismatch.expected!r}", file=sys.stderr)
    return EXIT_OK if values.passed and coordination.passed else EXIT_FAILURE


# ----------------------------------------------------------------------------
# Parser
# ----------------------------------------------------------------------------

def _add_config_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="key=value config file (keys are TrainConfig fields)")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key; repeatable, wins over --config")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mh-marl", description="Mutual-help multi-agent RL lab.")
    ap.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    ap.add_argument("--log-file", help="also write log records to this file")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one run")
    _add_config_flags(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--algorithm", choices=sorted(ALGORITHM_PRESETS), help="apply a named preset")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--episodes", type=int)
    p.add_argument("--dump-trajectory", metavar="CSV", help="write one row per evaluation step")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("suite", help="train every (algorithm, seed) pair")
    _add_config_flags(p)
    p.add_argument("--algorithms", default="MADDPG,MH-MADDPG,MADDPG-GR",
                   help=f"comma list from {', '.join(ALGORITHM_PRESETS)}")
    p.add_argument("--seeds", help="comma list; defaults to the config's seeds")
    p.add_argument("--parallelism", type=int, default=1)
    p.add_argument("--out", required=True, help="suite directory (one subdirectory per algorithm/seed)")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_suite)

    p = sub.add_parser("plot", help="seed-aggregated convergence curves")
    p.add_argument("--in", dest="input", required=True, help="directory scanned for metrics.csv files")
    p.add_argument("--metric", default="success_rate", choices=PLOT_METRICS)
    p.add_argument("--scale", default="linear", choices=PLOT_SCALES)
    p.add_argument("--out", help="SVG path (default <in>/<metric>.svg)")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("gradcheck", help="finite-difference check of every network and loss")
    p.add_argument("--draws", type=int, default=10)
    p.add_argument("--full-size-draws", type=int, default=1, help="extra draws at the deployed hidden sizes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--coords", type=int, default=16, help="coordinates sampled per parameter tensor")
    p.add_argument("--step", type=float, default=FD_STEP)
    p.add_argument("--tolerance", type=float, default=FD_TOLERANCE)
    p.add_argument("--corrupt-op", choices=sorted(OP_KINDS), help="plant a wrong derivative for this op")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("oracle", help="straight-line loss values and the coordination grid search")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_oracle)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logger(args.log_level, args.log_file)
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError) as exc:
        logger.debug("[CLI] command failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
