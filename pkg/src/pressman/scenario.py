"""Problem setup shared by training and evaluation.

Random fields are drawn from seed tuples ``(run_seed, purpose, index)`` so the
training, validation and evaluation streams never share a seed:

* purpose 0 (training): ``index = stage_epoch * samples_per_epoch + position``
  where ``stage_epoch`` counts pretraining epochs first and continues through
  fine-tuning, so no training field repeats within a run;
* purpose 1 (validation): ``index`` in ``range(validation_size)``;
* purpose 2 (evaluation): ``index`` in ``range(n_samples)``.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterable, Optional, Sequence, TypeVar

import numpy as np

from .geostats import GeostatConfig, KLBasis, build_kl_basis, sample_field
from .grid import BoundarySpec, Grid, build_grid
from .multiphase import FluidProps, MultiPhaseProblem, gradient_multiphase, simulate_multiphase
from .single_phase import SinglePhaseProblem, WellSet, critical_pressure, critical_pressure_and_gradient

TRAIN, VALIDATION, EVALUATION = 0, 1, 2
PHYSICS = ("single", "multi")

T = TypeVar("T")
R = TypeVar("R")


@dataclass(frozen=True)
class Scenario:
    grid: Grid = field(default_factory=lambda: build_grid(24, 24, 1000.0, 1000.0))
    wells: WellSet = field(default_factory=WellSet)
    props: FluidProps = field(default_factory=FluidProps)
    geostat: GeostatConfig = field(default_factory=GeostatConfig)
    bc_pressure: BoundarySpec = 0.0
    horizon: float = 3.15576e7
    cfl_factor: float = 0.9
    max_steps: int = 100_000
    initial_saturation: float = 0.0
    solver: str = "cholesky"

    def __post_init__(self):
        self.wells.validate(self.grid)

    @cached_property
    def basis(self) -> KLBasis:
        return build_kl_basis(self.grid, self.geostat)

    @property
    def input_std(self) -> float:
        return float(np.sqrt(self.geostat.variance)) if self.geostat.variance > 0 else 1.0

    def field(self, seed) -> np.ndarray:
        return sample_field(self.basis, self.geostat, seed)

    def fields(self, seeds: Iterable) -> np.ndarray:
        return np.stack([self.field(s) for s in seeds])

    def single_phase(self, perm: np.ndarray) -> SinglePhaseProblem:
        return SinglePhaseProblem(self.grid, perm, self.wells, self.bc_pressure, self.solver)

    def multiphase(self, perm: np.ndarray) -> MultiPhaseProblem:
        return MultiPhaseProblem(
            self.grid,
            perm,
            self.wells,
            self.props,
            self.bc_pressure,
            self.initial_saturation,
            self.cfl_factor,
            self.max_steps,
            self.solver,
        )

    def critical_pressure(self, perm: np.ndarray, rate: float, physics: str) -> float:
        if physics == "single":
            return critical_pressure(self.single_phase(perm), rate)
        if physics == "multi":
            value, _ = simulate_multiphase(self.multiphase(perm), rate, self.horizon, keep_factors=False)
            return value
        raise ValueError(f"unknown physics {physics!r}")

    def pressure_and_gradient(self, perm: np.ndarray, rate: float, physics: str) -> tuple[float, float]:
        """Critical pressure (Pa) and its derivative in the extraction rate."""
        if physics == "single":
            return critical_pressure_and_gradient(self.single_phase(perm), rate)
        if physics == "multi":
            problem = self.multiphase(perm)
            value, trace = simulate_multiphase(problem, rate, self.horizon)
            return value, gradient_multiphase(problem, rate, self.horizon, trace)
        raise ValueError(f"unknown physics {physics!r}")


@dataclass
class FieldSampler:
    """Deterministic field streams for one run seed."""

    scenario: Scenario
    seed: int
    samples_per_epoch: int = 200
    validation_size: int = 200

    def training_batch(self, stage_epoch: int, batch: int, batch_size: int) -> np.ndarray:
        start = stage_epoch * self.samples_per_epoch + batch * batch_size
        return self.scenario.fields((self.seed, TRAIN, start + j) for j in range(batch_size))

    @cached_property
    def validation(self) -> np.ndarray:
        return self.scenario.fields((self.seed, VALIDATION, i) for i in range(self.validation_size))

    def evaluation(self, index: int) -> np.ndarray:
        return self.scenario.field((self.seed, EVALUATION, index))


def parallel_map(fn: Callable[[T], R], items: Sequence[T], threads: int = 1) -> list[R]:
    """Ordered map; results come back in input order regardless of ``threads``."""
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def default_threads() -> int:
    import os

    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:  # pragma: no cover - non-Linux
        return max(1, os.cpu_count() or 1)
