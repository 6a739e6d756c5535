"""Incompressible, immiscible two-phase flow by IMPES, with a reverse-mode pass.

Each step solves the pressure equation with total mobility frozen at the
current saturation, computes TPFA face fluxes, picks a CFL-limited step and
advances saturation explicitly with donor-cell upwinding.  The reverse pass
replays the recorded steps backwards with the step sizes and upwind
directions held at their forward values.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .grid import (
    BoundarySpec,
    CholeskyFactor,
    FluxField,
    Grid,
    SolverError,
    Transmissibility,
    active_transmissibility,
    assemble_from_transmissibility,
    cell_differences,
    divergence,
    face_transmissibility,
    face_transmissibility_vjp,
    normalize_bc,
    pcg,
    pressure_drops,
)
from .single_phase import WellSet

ONE_YEAR = 3.15576e7  # s
SATURATION_TOL = 1e-12


class CFLViolation(RuntimeError):
    """Explicit saturation update left [0, 1]."""


@dataclass(frozen=True)
class FluidProps:
    mu_w: float = 1.0
    mu_nw: float = 1.0
    s_wc: float = 0.0
    s_nwr: float = 0.0
    porosity: float = 1.0
    rho_w: float = 1.0

    def __post_init__(self):
        if not (self.mu_w > 0 and self.mu_nw > 0):
            raise ValueError("viscosities must be positive")
        if self.s_wc < 0 or self.s_nwr < 0 or self.s_wc + self.s_nwr >= 1:
            raise ValueError("need s_wc, s_nwr >= 0 and s_wc + s_nwr < 1")
        if not 0 < self.porosity <= 1:
            raise ValueError("porosity must lie in (0, 1]")
        if not self.rho_w > 0:
            raise ValueError("rho_w must be positive")

    @property
    def mobile_range(self) -> float:
        return 1.0 - self.s_wc - self.s_nwr


def _check_saturation(s) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    if np.any(s < -SATURATION_TOL) or np.any(s > 1 + SATURATION_TOL) or not np.all(np.isfinite(s)):
        raise ValueError("saturation must lie in [0, 1]")
    return s


def normalized_saturation(s, props: FluidProps) -> np.ndarray:
    return np.clip((np.asarray(s, dtype=float) - props.s_wc) / props.mobile_range, 0.0, 1.0)


def mobility_w(s, props: FluidProps):
    s_star = normalized_saturation(_check_saturation(s), props)
    return s_star**2 / props.mu_w


def mobility_nw(s, props: FluidProps):
    s_star = normalized_saturation(_check_saturation(s), props)
    return (1.0 - s_star) ** 2 / props.mu_nw


def _phase_mobilities(s, props):
    s_star = normalized_saturation(s, props)
    return s_star**2 / props.mu_w, (1.0 - s_star) ** 2 / props.mu_nw, s_star


def total_mobility(s, props: FluidProps):
    lw, lnw, _ = _phase_mobilities(_check_saturation(s), props)
    return lw + lnw


def _total_mobility_derivative(s, props):
    s_star = (s - props.s_wc) / props.mobile_range
    inside = (s_star >= 0.0) & (s_star <= 1.0)
    s_star = np.clip(s_star, 0.0, 1.0)
    d = 2.0 * s_star / props.mu_w - 2.0 * (1.0 - s_star) / props.mu_nw
    return np.where(inside, d / props.mobile_range, 0.0)


def fractional_flow(s, props: FluidProps):
    """Wetting share of the total flux, ``lam_w / (lam_w + lam_nw)``."""
    lw, lnw, _ = _phase_mobilities(_check_saturation(s), props)
    return lw / (lw + lnw)


def _fractional_flow_and_slope(s, props):
    """``f(s)`` and ``df/ds`` (zero outside the mobile range)."""
    raw = (s - props.s_wc) / props.mobile_range
    inside = (raw >= 0.0) & (raw <= 1.0)
    x = np.clip(raw, 0.0, 1.0)
    a = x * x / props.mu_w
    b = (1.0 - x) ** 2 / props.mu_nw
    den = a + b
    f = a / den
    # d/dx [a / (a + b)] = (a' b - a b') / (a + b)^2
    da = 2.0 * x / props.mu_w
    db = -2.0 * (1.0 - x) / props.mu_nw
    df = (da * b - a * db) / den**2
    return f, np.where(inside, df / props.mobile_range, 0.0)


def max_fractional_flow_slope(props: FluidProps) -> float:
    """``max |df/ds*|`` over the normalized saturation range."""
    if props.mu_w == props.mu_nw:
        return 2.0
    x = np.linspace(0.0, 1.0, 1001)
    a = x * x / props.mu_w
    b = (1.0 - x) ** 2 / props.mu_nw
    df = (2.0 * x / props.mu_w * b + a * 2.0 * (1.0 - x) / props.mu_nw) / (a + b) ** 2
    return float(np.max(np.abs(df)))


@dataclass(frozen=True)
class MultiPhaseProblem:
    grid: Grid
    perm: np.ndarray
    wells: WellSet = field(default_factory=WellSet)
    props: FluidProps = field(default_factory=FluidProps)
    bc_pressure: BoundarySpec = 0.0
    initial_saturation: Union[float, np.ndarray] = 0.0
    cfl_factor: float = 0.9
    max_steps: int = 100_000
    solver: str = "cholesky"

    def __post_init__(self):
        perm = np.asarray(self.perm, dtype=float)
        if perm.size != self.grid.n_cells:
            raise ValueError("permeability does not match the grid")
        if not np.all(np.isfinite(perm)) or np.any(perm <= 0):
            raise ValueError("permeability must be strictly positive and finite")
        object.__setattr__(self, "perm", perm.reshape(self.grid.shape))
        if not 0 < self.cfl_factor <= 1:
            raise ValueError("cfl_factor must lie in (0, 1]")
        if self.max_steps < 1:
            raise ValueError("max_steps must be positive")
        self.wells.validate(self.grid)
        s0 = np.broadcast_to(np.asarray(self.initial_saturation, dtype=float), self.grid.shape)
        _check_saturation(s0)

    def initial_state(self) -> np.ndarray:
        return np.array(np.broadcast_to(np.asarray(self.initial_saturation, dtype=float), self.grid.shape))


@dataclass(frozen=True)
class TimeStepSchedule:
    steps: tuple[float, ...]
    cfl_factor: float = 0.9

    def __post_init__(self):
        if any(not dt > 0 for dt in self.steps):
            raise ValueError("all time steps must be positive")

    @property
    def horizon(self) -> float:
        return float(np.sum(self.steps))

    def __len__(self) -> int:
        return len(self.steps)


@dataclass
class StepRecord:
    saturation: np.ndarray
    mobility_perm: np.ndarray
    trans: Transmissibility
    pressure: np.ndarray
    drops: tuple[np.ndarray, np.ndarray]
    fluxes: FluxField
    dt: float
    factor: Optional[CholeskyFactor] = None


@dataclass
class SimulationTrace:
    """Everything the reverse pass needs: one record per completed step plus
    the terminal pressure solve."""

    extraction_rate: float
    horizon: float
    steps: list[StepRecord]
    final: StepRecord
    sources: np.ndarray

    @property
    def schedule(self) -> TimeStepSchedule:
        return TimeStepSchedule(tuple(r.dt for r in self.steps))

    @property
    def final_saturation(self) -> np.ndarray:
        return self.final.saturation


class _PressureSolve:
    """Pressure solve at fixed saturation, keeping what the adjoint needs."""

    def __init__(self, problem: MultiPhaseProblem, bc, s: np.ndarray, sources: np.ndarray, keep_factor: bool):
        grid = problem.grid
        lw, lnw, _ = _phase_mobilities(s, problem.props)
        self.m = problem.perm * (lw + lnw)
        if np.any(self.m <= 0):
            raise SolverError("zero total mobility")
        self.trans = active_transmissibility(face_transmissibility(grid, self.m), bc)
        system = assemble_from_transmissibility(grid, self.trans, sources, bc)
        self.factor = None
        b = system.rhs
        if problem.solver == "cholesky":
            factor = CholeskyFactor(system)
            p = factor.solve(b)
            nb = np.linalg.norm(b)
            res = np.linalg.norm(system.matvec(p) - b) / nb if nb > 0 else np.linalg.norm(p)
            if not res <= 1e-10:
                raise SolverError(f"pressure solve residual {res:.3e} exceeds 1e-10", 1, res)
            if keep_factor:
                self.factor = factor
        else:
            p, _ = pcg(system, b)
            self._system = system
        self.p = p.reshape(grid.shape)
        self.drops = pressure_drops(self.p, bc)
        self.fluxes = FluxField(self.trans.tx * self.drops[0], self.trans.ty * self.drops[1])


def impes_pressure_step(
    grid: Grid,
    perm: np.ndarray,
    saturation: np.ndarray,
    wells: WellSet,
    extraction_rate: float,
    bc_pressure: BoundarySpec = 0.0,
    props: FluidProps = FluidProps(),
    solver: str = "cholesky",
) -> tuple[np.ndarray, FluxField]:
    """Pressure (Pa) and face fluxes (m^3/s) for the current saturation."""
    problem = MultiPhaseProblem(grid, perm, wells, props, bc_pressure, saturation, solver=solver)
    sources = wells.sources(grid, extraction_rate)
    solve = _PressureSolve(problem, normalize_bc(bc_pressure), problem.initial_state(), sources, False)
    return solve.p, solve.fluxes


def cell_influx(fluxes: FluxField, sources: np.ndarray) -> np.ndarray:
    fx, fy = fluxes.fx, fluxes.fy
    inflow = np.maximum(fx[:, :-1], 0.0) + np.maximum(-fx[:, 1:], 0.0)
    inflow += np.maximum(fy[:-1, :], 0.0) + np.maximum(-fy[1:, :], 0.0)
    return inflow + np.maximum(sources, 0.0)


def cfl_timestep(
    grid: Grid,
    fluxes: FluxField,
    sources: np.ndarray,
    props: FluidProps,
    cfl_factor: float = 0.9,
    remaining: float = np.inf,
) -> float:
    """Largest stable explicit step, or ``remaining`` when nothing flows in."""
    influx = cell_influx(fluxes, np.asarray(sources, dtype=float).reshape(grid.shape))
    peak = influx.max()
    if not peak > 0:
        return float(remaining)
    capacity = props.porosity * grid.cell_volume * props.mobile_range
    dt = cfl_factor * capacity / (peak * max_fractional_flow_slope(props))
    return float(min(dt, remaining))


def _upwind(f: np.ndarray, f_ext: float, fluxes: FluxField):
    """Donor-cell face values of ``f``; ghost cells outside carry ``f_ext``."""
    ny, nx = f.shape
    px = np.empty((ny, nx + 2))
    px[:, 1:-1] = f
    px[:, 0] = px[:, -1] = f_ext
    py = np.empty((ny + 2, nx))
    py[1:-1, :] = f
    py[0, :] = py[-1, :] = f_ext
    fx_pos = fluxes.fx > 0
    fy_pos = fluxes.fy > 0
    ux = np.where(fx_pos, px[:, :-1], px[:, 1:])
    uy = np.where(fy_pos, py[:-1, :], py[1:, :])
    return ux, uy, fx_pos, fy_pos


def saturation_step(
    saturation: np.ndarray,
    fluxes: FluxField,
    sources: np.ndarray,
    dt: float,
    grid: Grid,
    props: FluidProps,
    exterior_saturation: float = 0.0,
) -> np.ndarray:
    """Explicit upwind update; raises :class:`CFLViolation` if the result leaves [0, 1]."""
    s = np.asarray(saturation, dtype=float).reshape(grid.shape)
    q = np.asarray(sources, dtype=float).reshape(grid.shape)
    f, _ = _fractional_flow_and_slope(s, props)
    f_ext = float(_fractional_flow_and_slope(np.array(exterior_saturation), props)[0])
    ux, uy, _, _ = _upwind(f, f_ext, fluxes)
    wetting_out = divergence(ux * fluxes.fx, uy * fluxes.fy)
    c = dt / (props.porosity * grid.cell_volume)
    s_new = s + c * (np.maximum(q, 0.0) - wetting_out + f * np.minimum(q, 0.0))
    lo, hi = s_new.min(), s_new.max()
    if lo < -SATURATION_TOL or hi > 1.0 + SATURATION_TOL or not np.isfinite(lo + hi):
        raise CFLViolation(f"saturation left [0, 1] (min {lo:.3e}, max {hi:.3e}); time step {dt:.3e} s too large")
    return s_new


def simulate_multiphase(
    problem: MultiPhaseProblem,
    extraction_rate: float,
    horizon: float = ONE_YEAR,
    initial_saturation: Optional[np.ndarray] = None,
    schedule: Optional[Sequence[float]] = None,
    keep_factors: bool = True,
) -> tuple[float, SimulationTrace]:
    """Run IMPES to ``horizon`` and return the terminal critical-cell pressure.

    If ``schedule`` is given, those step sizes are used verbatim (their sum
    replaces ``horizon``) instead of the CFL choice.
    """
    if not np.isfinite(extraction_rate):
        raise ValueError("extraction rate must be finite")
    grid, props = problem.grid, problem.props
    bc = normalize_bc(problem.bc_pressure)
    sources = problem.wells.sources(grid, extraction_rate)
    s = problem.initial_state() if initial_saturation is None else _check_saturation(initial_saturation).reshape(grid.shape).copy()
    if schedule is not None:
        schedule = [float(dt) for dt in schedule]
        horizon = float(np.sum(schedule))
    if not horizon > 0:
        raise ValueError("horizon must be positive")

    records: list[StepRecord] = []
    t = 0.0
    while True:
        solve = _PressureSolve(problem, bc, s, sources, keep_factors)
        if schedule is not None:
            if len(records) == len(schedule):
                break
            dt = schedule[len(records)]
        else:
            remaining = horizon - t
            if remaining <= 1e-12 * horizon:
                break
            if len(records) >= problem.max_steps:
                raise RuntimeError(f"step cap of {problem.max_steps} reached at t={t:.6g} s of {horizon:.6g} s")
            dt = cfl_timestep(grid, solve.fluxes, sources, props, problem.cfl_factor, remaining)
        record = StepRecord(s, solve.m, solve.trans, solve.p, solve.drops, solve.fluxes, dt, solve.factor)
        records.append(record)
        s = saturation_step(s, solve.fluxes, sources, dt, grid, props)
        t += dt
    final = StepRecord(s, solve.m, solve.trans, solve.p, solve.drops, solve.fluxes, 0.0, solve.factor)
    i, j = problem.wells.critical
    trace = SimulationTrace(float(extraction_rate), horizon, records, final, sources)
    return float(solve.p[j, i]), trace


def _solve_adjoint(problem, record: StepRecord, rhs: np.ndarray, bc) -> np.ndarray:
    if record.factor is not None:
        return record.factor.solve(rhs.ravel()).reshape(rhs.shape)
    system = assemble_from_transmissibility(problem.grid, record.trans, np.zeros(problem.grid.shape), bc)
    x, _ = pcg(system, rhs.ravel())
    return x.reshape(rhs.shape)


def _pressure_solve_vjp(problem, record: StepRecord, p_bar: np.ndarray, bc, s_bar: np.ndarray, q_bar: np.ndarray):
    """Accumulate cotangents of a pressure solve (and its transmissibilities)
    into ``s_bar`` and ``q_bar``; returns the transmissibility cotangent."""
    mu = _solve_adjoint(problem, record, p_bar, bc)
    q_bar += mu
    dmx, dmy = cell_differences(mu)
    gx, gy = record.drops
    return -dmx * gx, -dmy * gy


def _mobility_vjp(problem, record: StepRecord, tx_bar, ty_bar, s_bar):
    m_bar = face_transmissibility_vjp(problem.grid, record.mobility_perm, tx_bar, ty_bar)
    s_bar += m_bar * problem.perm * _total_mobility_derivative(record.saturation, problem.props)


def gradient_multiphase(
    problem: MultiPhaseProblem,
    extraction_rate: float,
    horizon: Optional[float],
    trace: SimulationTrace,
) -> float:
    """``d p_critical(T) / d extraction_rate`` by reverse pass over ``trace``.

    Step sizes and upwind directions are constants of the pass.
    """
    if trace is None or trace.final is None:
        raise ValueError("a completed forward trace is required")
    if trace.extraction_rate != extraction_rate:
        raise ValueError("trace was recorded at a different extraction rate")
    if horizon is not None and abs(trace.horizon - horizon) > 1e-9 * max(horizon, 1.0):
        raise ValueError("trace horizon does not match")
    grid, props = problem.grid, problem.props
    bc = normalize_bc(problem.bc_pressure)
    q = trace.sources
    s_bar = np.zeros(grid.shape)
    q_bar = np.zeros(grid.shape)

    # terminal pressure solve
    p_bar = np.zeros(grid.shape)
    i, j = problem.wells.critical
    p_bar[j, i] = 1.0
    tx_bar, ty_bar = _pressure_solve_vjp(problem, trace.final, p_bar, bc, s_bar, q_bar)
    _mobility_vjp(problem, trace.final, tx_bar, ty_bar, s_bar)

    f_ext = float(_fractional_flow_and_slope(np.array(0.0), props)[0])
    q_pos = q > 0
    q_neg = np.minimum(q, 0.0)
    for record in reversed(trace.steps):
        s = record.saturation
        fluxes = record.fluxes
        f, df = _fractional_flow_and_slope(s, props)
        ux, uy, fx_pos, fy_pos = _upwind(f, f_ext, fluxes)
        w = (record.dt / (props.porosity * grid.cell_volume)) * s_bar
        # s_bar already holds the identity contribution s^{n+1} -> s^n
        q_bar += np.where(q_pos, w, w * f)
        f_bar = w * q_neg
        wx_bar, wy_bar = cell_differences(w)
        wx_bar, wy_bar = -wx_bar, -wy_bar
        fx_bar = wx_bar * ux
        fy_bar = wy_bar * uy
        ux_bar = wx_bar * fluxes.fx
        uy_bar = wy_bar * fluxes.fy
        f_bar += np.where(fx_pos[:, 1:], ux_bar[:, 1:], 0.0) + np.where(fx_pos[:, :-1], 0.0, ux_bar[:, :-1])
        f_bar += np.where(fy_pos[1:, :], uy_bar[1:, :], 0.0) + np.where(fy_pos[:-1, :], 0.0, uy_bar[:-1, :])
        s_bar += f_bar * df

        # fluxes = trans * drops
        gx, gy = record.drops
        tx_bar = fx_bar * gx
        ty_bar = fy_bar * gy
        p_bar = divergence(fx_bar * record.trans.tx, fy_bar * record.trans.ty)
        sx, sy = _pressure_solve_vjp(problem, record, p_bar, bc, s_bar, q_bar)
        _mobility_vjp(problem, record, tx_bar + sx, ty_bar + sy, s_bar)

    ei, ej = problem.wells.extractor
    return -float(q_bar[ej, ei])


def simulate_with_gradient(problem: MultiPhaseProblem, extraction_rate: float, horizon: float) -> tuple[float, float]:
    value, trace = simulate_multiphase(problem, extraction_rate, horizon)
    return value, gradient_multiphase(problem, extraction_rate, horizon, trace)


# --- trace dump ----------------------------------------------------------------
#
# Header line "pressman-trace 1 <ny> <nx> <n_steps>\n", then per step
# (including the terminal solve as a final record with dt = 0) a little-endian
# record: float64 dt, float64[ny*nx] saturation, float64[ny*nx] pressure,
# float64[ny*(nx+1)] x-fluxes, float64[(ny+1)*nx] y-fluxes.


def dump_trace(trace: SimulationTrace, path: Union[str, Path]) -> None:
    ny, nx = trace.final.saturation.shape
    with open(path, "wb") as fh:
        fh.write(f"pressman-trace 1 {ny} {nx} {len(trace.steps)}\n".encode("ascii"))
        for rec in [*trace.steps, trace.final]:
            fh.write(struct.pack("<d", rec.dt))
            for arr in (rec.saturation, rec.pressure, rec.fluxes.fx, rec.fluxes.fy):
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_trace_arrays(path: Union[str, Path]) -> list[dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        if header[:2] != ["pressman-trace", "1"]:
            raise ValueError(f"{path}: not a trace file")
        ny, nx, n = (int(v) for v in header[2:])
        out = []
        for _ in range(n + 1):
            (dt,) = struct.unpack("<d", fh.read(8))
            rec = {"dt": dt}
            for name, shape in (("saturation", (ny, nx)), ("pressure", (ny, nx)), ("fx", (ny, nx + 1)), ("fy", (ny + 1, nx))):
                count = shape[0] * shape[1]
                rec[name] = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape).copy()
            out.append(rec)
    return out
