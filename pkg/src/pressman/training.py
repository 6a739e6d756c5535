"""Physics-in-the-loop training of the surrogate and the two-stage curriculum.

For a batch of fields ``k_j`` the network proposes rates ``q_j``; each rate
is pushed through a simulator to get the critical pressure ``p_j`` and its
derivative ``dp_j/dq_j``.  The batch loss is ``sum_j (p_j - target)^2`` and
its gradient reaches the network through
``dL/dq_j = 2 (p_j - target) dp_j/dq_j``.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np

from .scenario import FieldSampler, Scenario, parallel_map
from .surrogate import (
    Architecture,
    NetworkParams,
    OptimizerState,
    adam_step,
    backward_raw,
    forward_raw,
    init_params,
    sigmoid,
    softplus,
)

log = logging.getLogger(__name__)

STAGES = ("pretrain", "finetune", "scratch")
STAGE_PHYSICS = {"pretrain": "single", "finetune": "multi", "scratch": "multi"}


@dataclass(frozen=True)
class TrainingConfig:
    lr: float = 1e-4
    n_batches: int = 20
    samples_per_batch: int = 10
    samples_per_epoch: int = 200
    epochs_pretrain: int = 100
    epochs_finetune: int = 30
    target_pressure: float = 0.0
    validation_size: int = 200
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        counts = dict(
            n_batches=self.n_batches,
            samples_per_batch=self.samples_per_batch,
            samples_per_epoch=self.samples_per_epoch,
            validation_size=self.validation_size,
            threads=self.threads,
        )
        for name, value in counts.items():
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be a positive integer")
        for name in ("epochs_pretrain", "epochs_finetune"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.n_batches * self.samples_per_batch != self.samples_per_epoch:
            raise ValueError("n_batches * samples_per_batch must equal samples_per_epoch")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not np.isfinite(self.target_pressure):
            raise ValueError("target_pressure must be finite")


@dataclass(frozen=True)
class LossRecord:
    epoch: int
    stage: str
    train_rmse: float
    val_rmse: float
    sim_calls: int
    multi_calls: int
    wall_s: float


@dataclass
class CallCounter:
    single: int = 0
    multi: int = 0

    def add(self, physics: str, n: int) -> None:
        setattr(self, physics, getattr(self, physics) + n)

    @property
    def total(self) -> int:
        return self.single + self.multi


class SimulationFailure(RuntimeError):
    pass


def loss(pressures: Iterable[float], target: float) -> float:
    p = np.asarray(list(pressures), dtype=float)
    if p.size == 0:
        raise ValueError("empty batch")
    if not np.all(np.isfinite(p)):
        raise FloatingPointError("non-finite simulated pressure")
    return float(np.sum((p - target) ** 2))


def rmse(total_loss: float, n_batches: int, samples_per_batch: int) -> float:
    n = n_batches * samples_per_batch
    if n < 1:
        raise ValueError("need at least one sample")
    return float(np.sqrt(total_loss / n))


def initial_network(scenario: Scenario, seed: int, arch: Architecture = Architecture()) -> NetworkParams:
    if arch.input_size != scenario.grid.nx or scenario.grid.nx != scenario.grid.ny:
        raise ValueError(f"network expects {arch.input_size}x{arch.input_size} fields, grid is {scenario.grid.nx}x{scenario.grid.ny}")
    return init_params(
        arch,
        seed,
        input_mean=scenario.geostat.mean_log_perm,
        input_std=scenario.input_std,
        output_scale=scenario.wells.injection_rate,
    )


def check_compatible(params: NetworkParams, scenario: Scenario) -> None:
    """Raise if a checkpoint was produced for a different scenario."""
    problems = []
    if params.arch.input_size != scenario.grid.nx or scenario.grid.nx != scenario.grid.ny:
        problems.append(f"input size {params.arch.input_size} vs grid {scenario.grid.nx}x{scenario.grid.ny}")
    if params.input_mean != scenario.geostat.mean_log_perm:
        problems.append(f"input_mean {params.input_mean} vs mean_log_perm {scenario.geostat.mean_log_perm}")
    if params.input_std != scenario.input_std:
        problems.append(f"input_std {params.input_std} vs {scenario.input_std}")
    if params.output_scale != scenario.wells.injection_rate:
        problems.append(f"output_scale {params.output_scale} vs injection rate {scenario.wells.injection_rate}")
    if problems:
        raise ValueError("checkpoint incompatible with scenario: " + "; ".join(problems))


def _simulate(scenario: Scenario, physics: str, with_gradient: bool):
    def run(item):
        index, perm, rate = item
        try:
            if with_gradient:
                return scenario.pressure_and_gradient(perm, rate, physics)
            return scenario.critical_pressure(perm, rate, physics), 0.0
        except Exception as exc:
            raise SimulationFailure(f"{physics}-phase simulation of sample {index} at rate {rate:.6g} m^3/s failed: {exc}") from exc

    return run


def batch_gradient(
    params: NetworkParams,
    perms: np.ndarray,
    scenario: Scenario,
    physics: str,
    target: float,
    threads: int = 1,
):
    """Batch loss and its gradient w.r.t. the network parameters."""
    raw, cache = forward_raw(params, params.normalize(perms))
    rates = softplus(raw) * params.output_scale
    results = parallel_map(_simulate(scenario, physics, True), list(zip(range(len(rates)), perms, rates)), threads)
    p = np.array([r[0] for r in results])
    dp_dq = np.array([r[1] for r in results])
    batch_loss = loss(p, target)
    dl_draw = 2.0 * (p - target) * dp_dq * sigmoid(raw) * params.output_scale
    grads, _ = backward_raw(params, cache, dl_draw)
    return batch_loss, grads, p, rates


def validation_rmse(
    params: NetworkParams, perms: np.ndarray, scenario: Scenario, physics: str, target: float, threads: int = 1
) -> float:
    rates = np.atleast_1d(softplus(forward_raw(params, params.normalize(perms))[0]) * params.output_scale)
    results = parallel_map(_simulate(scenario, physics, False), list(zip(range(len(rates)), perms, rates)), threads)
    return rmse(loss([r[0] for r in results], target), 1, len(results))


def train_epoch(
    params: NetworkParams,
    state: OptimizerState,
    config: TrainingConfig,
    physics: str,
    sampler: FieldSampler,
    stage_epoch: int,
    counter: Optional[CallCounter] = None,
):
    """One epoch of ``n_batches`` ADAM steps on fresh fields.

    Returns ``(params, state, train_rmse, val_rmse)``.
    """
    scenario = sampler.scenario
    counter = counter if counter is not None else CallCounter()
    total = 0.0
    for b in range(config.n_batches):
        perms = sampler.training_batch(stage_epoch, b, config.samples_per_batch)
        batch_loss, grads, _, _ = batch_gradient(params, perms, scenario, physics, config.target_pressure, config.threads)
        counter.add(physics, len(perms))
        total += batch_loss
        params, state = adam_step(params, grads, state, config.lr)
    val = validation_rmse(params, sampler.validation, scenario, physics, config.target_pressure, config.threads)
    counter.add(physics, len(sampler.validation))
    return params, state, rmse(total, config.n_batches, config.samples_per_batch), val


@dataclass
class TrainingRun:
    params: NetworkParams
    history: list[LossRecord] = field(default_factory=list)
    counter: CallCounter = field(default_factory=CallCounter)


def run_stage(
    run: TrainingRun,
    stage: str,
    epochs: int,
    config: TrainingConfig,
    sampler: FieldSampler,
    epoch_offset: int = 0,
) -> TrainingRun:
    """Train ``epochs`` epochs of ``stage`` starting from fresh ADAM moments."""
    physics = STAGE_PHYSICS[stage]
    state = OptimizerState.zeros_like(run.params)
    params = run.params
    start = time.perf_counter()
    for epoch in range(1, epochs + 1):
        params, state, train, val = train_epoch(params, state, config, physics, sampler, epoch_offset + epoch - 1, run.counter)
        record = LossRecord(epoch, stage, train, val, run.counter.total, run.counter.multi, time.perf_counter() - start)
        run.history.append(record)
        log.info("%s epoch %d: train RMSE %.4g Pa, validation RMSE %.4g Pa, %d simulations", stage, epoch, train, val, record.sim_calls)
    run.params = params
    return run


def pretrain(scenario: Scenario, config: TrainingConfig, params: Optional[NetworkParams] = None) -> TrainingRun:
    params = params if params is not None else initial_network(scenario, config.seed)
    sampler = FieldSampler(scenario, config.seed, config.samples_per_epoch, config.validation_size)
    return run_stage(TrainingRun(params), "pretrain", config.epochs_pretrain, config, sampler)


def finetune(scenario: Scenario, config: TrainingConfig, params: NetworkParams, run: Optional[TrainingRun] = None) -> TrainingRun:
    check_compatible(params, scenario)
    sampler = FieldSampler(scenario, config.seed, config.samples_per_epoch, config.validation_size)
    run = run if run is not None else TrainingRun(params)
    run.params = params
    return run_stage(run, "finetune", config.epochs_finetune, config, sampler, epoch_offset=config.epochs_pretrain)


def train_scratch(scenario: Scenario, config: TrainingConfig, epochs: Optional[int] = None) -> TrainingRun:
    """Baseline: random initialization trained directly on multiphase physics."""
    sampler = FieldSampler(scenario, config.seed, config.samples_per_epoch, config.validation_size)
    run = TrainingRun(initial_network(scenario, config.seed))
    return run_stage(run, "scratch", config.epochs_finetune if epochs is None else epochs, config, sampler)


def run_curriculum(scenario: Scenario, config: TrainingConfig) -> TrainingRun:
    """Single-phase pretraining, then multiphase fine-tuning of the same weights."""
    run = pretrain(scenario, config)
    return finetune(scenario, config, run.params, run)


def calls_to_threshold(history: Iterable[LossRecord], threshold: float) -> Optional[int]:
    """Multiphase simulations spent when validation RMSE on multiphase physics
    first reaches ``threshold``; ``None`` if it never does."""
    for rec in history:
        if STAGE_PHYSICS[rec.stage] == "multi" and rec.val_rmse <= threshold:
            return rec.multi_calls
    return None


# --- CSV output -----------------------------------------------------------------

LOSS_COLUMNS = ("epoch", "stage", "train_rmse_pa", "val_rmse_pa", "sim_calls", "multiphase_calls")
TIMING_COLUMNS = ("epoch", "stage", "wall_s")


def write_history(history: Iterable[LossRecord], loss_path: Union[str, Path], timing_path: Union[str, Path, None] = None) -> None:
    """Loss history CSV (deterministic) and, optionally, wall-clock timings."""
    history = list(history)
    with open(loss_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOSS_COLUMNS)
        for r in history:
            writer.writerow([r.epoch, r.stage, repr(r.train_rmse), repr(r.val_rmse), r.sim_calls, r.multi_calls])
    if timing_path is not None:
        with open(timing_path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(TIMING_COLUMNS)
            for r in history:
                writer.writerow([r.epoch, r.stage, f"{r.wall_s:.3f}"])


def read_history(loss_path: Union[str, Path]) -> list[LossRecord]:
    with open(loss_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        LossRecord(int(r["epoch"]), r["stage"], float(r["train_rmse_pa"]), float(r["val_rmse_pa"]), int(r["sim_calls"]), int(r["multiphase_calls"]), float("nan"))
        for r in rows
    ]
