"""Steady single-phase pressure and its adjoint derivative in the extraction rate."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import (
    BoundarySpec,
    CholeskyFactor,
    Grid,
    SolverError,
    assemble_pressure_system,
    solve_linear,
)

# m^3/s, roughly 1 Mt/year of water
INJECTION_RATE = 0.031688


@dataclass(frozen=True)
class WellSet:
    """Cell positions ``(i, j)`` of the wells and the monitored location."""

    injector: tuple[int, int] = (6, 12)
    extractor: tuple[int, int] = (15, 12)
    critical: tuple[int, int] = (18, 12)
    injection_rate: float = INJECTION_RATE

    def validate(self, grid: Grid) -> None:
        cells = [grid.index(*self.injector), grid.index(*self.extractor), grid.index(*self.critical)]
        if len(set(cells)) != 3:
            raise ValueError("injector, extractor and critical cell must be distinct")
        if not np.isfinite(self.injection_rate):
            raise ValueError("injection rate must be finite")

    def sources(self, grid: Grid, extraction_rate: float) -> np.ndarray:
        q = np.zeros(grid.shape)
        i, j = self.injector
        q[j, i] += self.injection_rate
        i, j = self.extractor
        q[j, i] -= extraction_rate
        return q


@dataclass(frozen=True)
class SinglePhaseProblem:
    grid: Grid
    perm: np.ndarray
    wells: WellSet = field(default_factory=WellSet)
    bc_pressure: BoundarySpec = 0.0
    solver: str = "cholesky"

    def __post_init__(self):
        perm = np.asarray(self.perm, dtype=float)
        if perm.size != self.grid.n_cells:
            raise ValueError("permeability does not match the grid")
        if not np.all(np.isfinite(perm)) or np.any(perm <= 0):
            raise ValueError("permeability must be strictly positive and finite")
        object.__setattr__(self, "perm", perm.reshape(self.grid.shape))
        self.wells.validate(self.grid)


def _system(problem: SinglePhaseProblem, extraction_rate: float):
    if not np.isfinite(extraction_rate):
        raise ValueError("extraction rate must be finite")
    q = problem.wells.sources(problem.grid, extraction_rate)
    return assemble_pressure_system(problem.grid, problem.perm, 1.0, q, problem.bc_pressure)


def solve_steady(problem: SinglePhaseProblem, extraction_rate: float) -> np.ndarray:
    """Pressure field (Pa), shape ``(ny, nx)``, with unit mobility."""
    system = _system(problem, extraction_rate)
    return solve_linear(system, problem.solver).reshape(problem.grid.shape)


def critical_pressure(problem: SinglePhaseProblem, extraction_rate: float) -> float:
    i, j = problem.wells.critical
    return float(solve_steady(problem, extraction_rate)[j, i])


def gradient_steady(problem: SinglePhaseProblem, extraction_rate: float, seed_gradient: float = 1.0) -> float:
    """``seed_gradient * d p_critical / d extraction_rate`` via one adjoint solve.

    The rate enters only the right-hand side (``-rate`` at the extractor),
    so with ``A lam = e_critical`` the derivative is ``-lam[extractor]``.
    """
    system = _system(problem, extraction_rate)
    grid = problem.grid
    e_crit = np.zeros(grid.n_cells)
    e_crit[grid.index(*problem.wells.critical)] = 1.0
    adjoint = solve_linear(system, problem.solver, rhs=e_crit)
    return -seed_gradient * float(adjoint[grid.index(*problem.wells.extractor)])


def critical_pressure_and_gradient(problem: SinglePhaseProblem, extraction_rate: float) -> tuple[float, float]:
    """Forward value and adjoint derivative sharing one factorization."""
    system = _system(problem, extraction_rate)
    grid = problem.grid
    if problem.solver == "cholesky":
        factor = CholeskyFactor(system)
        p = factor.solve(system.rhs)
        e_crit = np.zeros(grid.n_cells)
        e_crit[grid.index(*problem.wells.critical)] = 1.0
        adjoint = factor.solve(e_crit)
        res = np.linalg.norm(system.matvec(p) - system.rhs) / max(np.linalg.norm(system.rhs), 1e-300)
        if not res <= 1e-10:
            raise SolverError(f"direct solve residual {res:.3e} exceeds 1e-10", 1, res)
    else:
        p = solve_linear(system, problem.solver)
        e_crit = np.zeros(grid.n_cells)
        e_crit[grid.index(*problem.wells.critical)] = 1.0
        adjoint = solve_linear(system, problem.solver, rhs=e_crit)
    value = float(p[grid.index(*problem.wells.critical)])
    return value, -float(adjoint[grid.index(*problem.wells.extractor)])
