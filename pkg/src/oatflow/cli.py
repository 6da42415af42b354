"""``oatflow`` command line: train | refine | eval | bench | export-traj.

Exit codes: 0 success, 1 numeric failure, 2 configuration error, 3 checkpoint error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import bench
from .config import ConfigError, RunConfig, load_config
from .diffcore import NonFiniteError
from .flows import train_phase1
from .model import CheckpointError, load_checkpoint, save_checkpoint
from .oatfm import refine
from .ode import IntegrationError, integrate_rk4, write_trajectory_csv

EXIT_NUMERIC, EXIT_CONFIG, EXIT_CHECKPOINT = 1, 2, 3


class _JsonLines:
    def __init__(self, path: Path):
        self.fh = open(path, "w")

    def __call__(self, record: dict) -> None:
        self.fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self):
        self.fh.close()


def _out_dir(cfg: RunConfig, override) -> Path:
    out = Path(override).resolve() if override else cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_field(path, d: int):
    try:
        field = load_checkpoint(path)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    if field.d != d:
        raise CheckpointError(f"{path}: checkpoint dimension {field.d} does not match task dimension {d}")
    return field


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.seed)
    out = _out_dir(cfg, args.out)
    (out / "config.ini").write_text(cfg.to_text())
    log = _JsonLines(out / "train_log.jsonl")
    try:
        field = train_phase1(
            cfg.phase1, bench.sampler(cfg.task.source), bench.sampler(cfg.task.target), callback=log
        )
    finally:
        log.close()
    save_checkpoint(field, out / "phase1.ckpt")
    print(out / "phase1.ckpt")
    return 0


def cmd_refine(args) -> int:
    cfg = load_config(args.config, args.seed)
    field = _load_field(args.checkpoint, cfg.phase1.d)
    out = _out_dir(cfg, args.out)
    (out / "config.ini").write_text(cfg.to_text())
    log = _JsonLines(out / "refine_log.jsonl")
    try:
        refined = refine(field, cfg.refine, bench.sampler(cfg.task.source), bench.sampler(cfg.task.target), callback=log)
    finally:
        log.close()
    save_checkpoint(refined, out / "refined.ckpt")
    print(out / "refined.ckpt")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config, args.seed)
    field = _load_field(args.checkpoint, cfg.phase1.d)
    out = _out_dir(cfg, args.out)
    metrics = bench.evaluate(field, cfg.task, seed=cfg.seed, config=cfg.eval)
    text = json.dumps(metrics, indent=2, sort_keys=True)
    (out / "metrics.json").write_text(text + "\n")
    print(text)
    return 0


def cmd_bench(args) -> int:
    cfg = load_config(args.config, args.seed)
    if args.workers is not None:
        cfg = replace(cfg, workers=args.workers)
    out = _out_dir(cfg, args.out)
    report = bench.run_benchmark(cfg.bench_tasks, cfg.bench_methods, cfg.bench_trials, cfg.bench_config())
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "report.csv").write_text(report.to_csv())
    print(out / "report.json")
    return 0


def cmd_export_traj(args) -> int:
    cfg = load_config(args.config, args.seed) if args.config else RunConfig()
    task = bench.TaskSpec.parse(args.task) if args.task else cfg.task
    seed = args.seed if args.seed is not None else cfg.seed
    field = _load_field(args.checkpoint, 2)
    X0 = bench.sample_dataset(task.source, args.n, seed)
    traj = integrate_rk4(field, X0, cfg.eval.n_steps, record_velocities=False)
    if args.out and args.out.endswith(".csv"):
        path = Path(args.out).resolve()
        path.parent.mkdir(parents=True, exist_ok=True)
    else:
        path = _out_dir(cfg, args.out) / "trajectory.csv"
    write_trajectory_csv(traj, path)
    print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="oatflow", description="Two-phase flow matching with acceleration-transport refinement")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="run configuration file")
        sp.add_argument("--out", help="output directory (overrides [output] dir)")
        sp.add_argument("--seed", type=int, help="run seed (overrides OATFLOW_SEED and the config)")

    sp = sub.add_parser("train", help="phase-1 flow matching")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("refine", help="phase-2 refinement of a phase-1 checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(func=cmd_refine)

    sp = sub.add_parser("eval", help="W2, NPE and straightness of a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bench", help="run the benchmark table")
    common(sp)
    sp.add_argument("--workers", type=int, help="parallel worker threads")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("export-traj", help="write RK4 trajectories as CSV")
    common(sp, config_required=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--task", help="task such as 8gs->moons (default: config task)")
    sp.add_argument("--n", type=int, default=256, help="number of trajectories")
    sp.set_defaults(func=cmd_export_traj)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"oatflow: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as e:
        print(f"oatflow: checkpoint error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (NonFiniteError, IntegrationError, FloatingPointError) as e:
        print(f"oatflow: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"oatflow: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
