"""Command-line entry point: ``pressman <subcommand> [options]``.

On failure the last line on stderr is a JSON object
``{"error": <kind>, "message": <text>}`` and the exit code is nonzero.
"""
from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, config_hash, default_config, describe_keys, parse_config, serialize
from .evaluate import emit_report, evaluate_ensemble
from .geostats import read_field, write_field
from .multiphase import CFLViolation, dump_trace, gradient_multiphase, simulate_multiphase
from .scenario import EVALUATION, TRAIN, VALIDATION, FieldSampler
from .single_phase import critical_pressure, gradient_steady
from .surrogate import load_checkpoint, save_checkpoint
from .training import finetune, pretrain, train_scratch, write_history

log = logging.getLogger("pressman")

EXIT_CONFIG, EXIT_INPUT, EXIT_SIMULATION, EXIT_CHECK, EXIT_USAGE = 2, 3, 4, 5, 64


class CommandError(Exception):
    def __init__(self, kind: str, message: str, code: int):
        super().__init__(message)
        self.kind, self.code = kind, code


class _Parser(argparse.ArgumentParser):
    """Usage errors go through the same JSON error line as everything else."""

    def error(self, message):
        raise CommandError("usage", f"{self.prog}: {message}", EXIT_USAGE)


def _load_config(args) -> RunConfig:
    cfg = parse_config(args.config) if args.config else default_config()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.threads is not None:
        changes["threads"] = args.threads
    return cfg.replace(**changes) if changes else cfg


def _write_manifest(out: Path, command: str, cfg: RunConfig, extra: Optional[dict] = None) -> None:
    import scipy

    manifest = {
        "command": command,
        "config_sha256": config_hash(cfg),
        "config": serialize(cfg),
        "seed": cfg.seed,
        "versions": {
            "pressman": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "platform": platform.platform(),
    }
    manifest.update(extra or {})
    (out / f"manifest-{command}.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _field_for(args, cfg: RunConfig) -> np.ndarray:
    scenario = cfg.scenario()
    if args.field:
        perm = read_field(args.field)
        if perm.shape != scenario.grid.shape:
            raise CommandError("input", f"field shape {perm.shape} does not match grid {scenario.grid.shape}", EXIT_INPUT)
        return perm
    return FieldSampler(scenario, cfg.seed).evaluation(args.field_index)


def cmd_sample_fields(args, cfg: RunConfig, out: Path) -> int:
    scenario = cfg.scenario()
    purpose = {"train": TRAIN, "validation": VALIDATION, "evaluation": EVALUATION}[args.purpose]
    for i in range(args.count):
        perm = scenario.field((cfg.seed, purpose, i))
        write_field(out / f"{args.purpose}_{i:05d}.field", perm)
    print(f"wrote {args.count} {args.purpose} fields to {out}")
    return 0


def cmd_simulate(args, cfg: RunConfig, out: Path) -> int:
    scenario = cfg.scenario()
    perm = _field_for(args, cfg)
    rate = args.extraction
    if args.physics == "single":
        problem = scenario.single_phase(perm)
        value = critical_pressure(problem, rate)
        grad = gradient_steady(problem, rate)
        steps = 0
    else:
        problem = scenario.multiphase(perm)
        value, trace = simulate_multiphase(problem, rate, scenario.horizon)
        grad = gradient_multiphase(problem, rate, scenario.horizon, trace)
        steps = len(trace.steps)
        if args.dump_trace:
            dump_trace(trace, out / "trace.bin")
    print(json.dumps({"physics": args.physics, "extraction_rate_m3s": rate, "critical_pressure_pa": value, "dp_dq": grad, "steps": steps}))
    return 0


def _relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


def cmd_gradcheck(args, cfg: RunConfig, out: Path) -> int:
    scenario = cfg.scenario()
    rng = np.random.default_rng(cfg.seed)
    tol = args.tolerance if args.tolerance is not None else (1e-6 if args.physics == "single" else 1e-4)
    worst = 0.0
    for case in range(args.cases):
        perm = scenario.field((cfg.seed, TRAIN, 10**9 + case))
        rate = float(rng.uniform(0.0, 0.5) * scenario.wells.injection_rate)
        h = max(1e-6 * abs(rate), 1e-9)
        if args.physics == "single":
            problem = scenario.single_phase(perm)
            grad = gradient_steady(problem, rate)
            fd = (critical_pressure(problem, rate + h) - critical_pressure(problem, rate - h)) / (2 * h)
        else:
            problem = scenario.multiphase(perm)
            _, trace = simulate_multiphase(problem, rate, scenario.horizon)
            schedule = trace.schedule.steps[: args.steps]
            _, trace = simulate_multiphase(problem, rate, schedule=schedule)
            grad = gradient_multiphase(problem, rate, None, trace)
            plus, _ = simulate_multiphase(problem, rate + h, schedule=schedule, keep_factors=False)
            minus, _ = simulate_multiphase(problem, rate - h, schedule=schedule, keep_factors=False)
            fd = (plus - minus) / (2 * h)
        err = _relative_error(grad, fd)
        worst = max(worst, err)
        log.info("case %d: adjoint %.10g, finite difference %.10g, relative error %.3e", case, grad, fd, err)
    print(json.dumps({"physics": args.physics, "cases": args.cases, "max_relative_error": worst, "tolerance": tol}))
    if not worst <= tol:
        raise CommandError("gradcheck", f"max relative error {worst:.3e} exceeds {tol:.1e}", EXIT_CHECK)
    return 0


def _save_run(run, out: Path, name: str) -> None:
    save_checkpoint(out / f"{name}.ckpt", run.params)
    write_history(run.history, out / f"{name}-loss.csv", out / f"{name}-timing.csv")
    last = run.history[-1] if run.history else None
    if last is not None:
        print(json.dumps({"stage": name, "epochs": len(run.history), "final_val_rmse_pa": last.val_rmse, "simulations": last.sim_calls}))


def cmd_pretrain(args, cfg: RunConfig, out: Path) -> int:
    run = pretrain(cfg.scenario(), cfg.training())
    _save_run(run, out, "pretrain")
    return 0


def _checkpoint(args, out: Path, default_name: str):
    path = Path(args.checkpoint) if args.checkpoint else out / default_name
    if not path.exists():
        raise CommandError("missing-checkpoint", f"checkpoint {path} not found", EXIT_INPUT)
    try:
        return load_checkpoint(path)
    except ValueError as exc:
        raise CommandError("bad-checkpoint", str(exc), EXIT_INPUT) from exc


def cmd_finetune(args, cfg: RunConfig, out: Path) -> int:
    params = _checkpoint(args, out, "pretrain.ckpt")
    try:
        run = finetune(cfg.scenario(), cfg.training(), params)
    except ValueError as exc:
        if "incompatible" in str(exc):
            raise CommandError("bad-checkpoint", str(exc), EXIT_INPUT) from exc
        raise
    _save_run(run, out, "finetune")
    return 0


def cmd_train_scratch(args, cfg: RunConfig, out: Path) -> int:
    run = train_scratch(cfg.scenario(), cfg.training(), args.epochs)
    _save_run(run, out, "scratch")
    return 0


def cmd_evaluate(args, cfg: RunConfig, out: Path) -> int:
    params = _checkpoint(args, out, "finetune.ckpt")
    n = args.samples if args.samples is not None else cfg.eval_samples
    report = evaluate_ensemble(
        params, cfg.scenario(), n, args.physics, cfg.seed, cfg.success_threshold, cfg.target_pressure, cfg.thread_count
    )
    emit_report(report, out)
    s = report.summary
    summary = {
        "n_samples": s.n_samples,
        "n_failed": s.n_failed,
        "mean_rate_m3s": s.mean_rate,
        "median_rate_m3s": s.median_rate,
        "p90_rate_m3s": s.p90_rate,
        "mean_rate_fraction_of_injection": s.mean_rate / cfg.injection_rate,
        "pressure_rmse_pa": s.pressure_rmse,
        "fraction_within_threshold": s.fraction_within,
        "threshold_pa": s.threshold,
    }
    (out / "evaluation-summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))
    return 0


COMMANDS = {
    "sample-fields": cmd_sample_fields,
    "simulate": cmd_simulate,
    "gradcheck": cmd_gradcheck,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "train-scratch": cmd_train_scratch,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat key = value config file (omitted keys use defaults)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--threads", type=int, help="worker threads per batch")
    common.add_argument("--out-dir", default=".", help="directory for outputs (default: current)")
    common.add_argument("-q", "--quiet", action="store_true", help="only print results and errors")

    parser = _Parser(
        prog="pressman",
        description="Differentiable reservoir simulators and a CNN extraction-rate controller.",
        epilog="config keys:\n" + describe_keys(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample-fields", parents=[common], help="write permeability realizations")
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--purpose", choices=("train", "validation", "evaluation"), default="evaluation")

    p = sub.add_parser("simulate", parents=[common], help="critical pressure for one field and rate")
    p.add_argument("--physics", choices=("single", "multi"), default="single")
    p.add_argument("--extraction", type=float, default=0.0, help="extraction rate, m^3/s")
    p.add_argument("--field", help="field file (default: evaluation field --field-index)")
    p.add_argument("--field-index", type=int, default=0)
    p.add_argument("--dump-trace", action="store_true", help="write trace.bin (multi only)")

    p = sub.add_parser("gradcheck", parents=[common], help="adjoint vs central finite differences")
    p.add_argument("--physics", choices=("single", "multi"), default="single")
    p.add_argument("--cases", type=int, default=10)
    p.add_argument("--steps", type=int, default=10, help="IMPES steps kept in the frozen schedule (multi)")
    p.add_argument("--tolerance", type=float, help="default 1e-6 single, 1e-4 multi")

    sub.add_parser("pretrain", parents=[common], help="single-phase training from random weights")

    p = sub.add_parser("finetune", parents=[common], help="multiphase training from a pretrained checkpoint")
    p.add_argument("--checkpoint", help="default: <out-dir>/pretrain.ckpt")

    p = sub.add_parser("train-scratch", parents=[common], help="multiphase training from random weights")
    p.add_argument("--epochs", type=int, help="default: epochs_finetune")

    p = sub.add_parser("evaluate", parents=[common], help="ensemble evaluation of a checkpoint")
    p.add_argument("--checkpoint", help="default: <out-dir>/finetune.ckpt")
    p.add_argument("--samples", type=int, help="default: eval_samples")
    p.add_argument("--physics", choices=("single", "multi"), default="multi")
    return parser


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except CommandError as exc:
        return _fail(exc.kind, str(exc), exc.code)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(asctime)s %(levelname)s %(message)s",
        stream=sys.stdout,
    )
    try:
        cfg = _load_config(args)
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_manifest(out, args.command, cfg)
        return COMMANDS[args.command](args, cfg, out)
    except ConfigError as exc:
        return _fail("config", "; ".join(exc.problems), EXIT_CONFIG)
    except CommandError as exc:
        return _fail(exc.kind, str(exc), exc.code)
    except (CFLViolation, RuntimeError, FloatingPointError) as exc:
        return _fail("simulation", f"{type(exc).__name__}: {exc}", EXIT_SIMULATION)
    except (OSError, ValueError) as exc:
        return _fail("input", f"{type(exc).__name__}: {exc}", EXIT_INPUT)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
