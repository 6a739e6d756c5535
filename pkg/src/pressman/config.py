"""Run configuration: a flat ``key = value`` text format.

Blank lines and ``#`` comments are ignored.  Every key has a default; each
default carries a provenance tag:

* ``paper``    -- value stated in the source study,
* ``derived``  -- implied by stated values (e.g. grid size from the CNN),
* ``decision`` -- chosen here where the study is silent.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Callable, Union

import numpy as np

from .geostats import COVARIANCE_KINDS, LOG10_VARIANCE_OF_UNIT_LN, GeostatConfig
from .grid import build_grid
from .multiphase import FluidProps
from .scenario import Scenario, default_threads
from .single_phase import INJECTION_RATE, WellSet
from .training import TrainingConfig


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


@dataclass(frozen=True)
class Key:
    name: str
    kind: str  # int | float | choice | threads
    default: Any
    provenance: str
    doc: str
    choices: tuple[str, ...] = ()


KEYS: tuple[Key, ...] = (
    # grid
    Key("nx", "int", 24, "derived", "cells along x; the bundled CNN needs 24"),
    Key("ny", "int", 24, "derived", "cells along y; the bundled CNN needs 24"),
    Key("lx", "float", 1000.0, "paper", "domain length along x, m"),
    Key("ly", "float", 1000.0, "paper", "domain length along y, m"),
    # wells, as (i, j) cell indices
    Key("injector_i", "int", 6, "decision", "injection well column"),
    Key("injector_j", "int", 12, "decision", "injection well row"),
    Key("extractor_i", "int", 15, "decision", "extraction well column"),
    Key("extractor_j", "int", 12, "decision", "extraction well row"),
    Key("critical_i", "int", 18, "decision", "monitored cell column"),
    Key("critical_j", "int", 12, "decision", "monitored cell row"),
    Key("injection_rate", "float", INJECTION_RATE, "paper", "injection rate, m^3/s"),
    # physics
    Key("bc_pressure", "float", 0.0, "paper", "Dirichlet pressure on all outer boundaries, Pa"),
    Key("mu_w", "float", 1.0, "paper", "wetting-phase viscosity, Pa s"),
    Key("mu_nw", "float", 1.0, "paper", "non-wetting-phase viscosity, Pa s"),
    Key("s_wc", "float", 0.0, "paper", "connate wetting saturation"),
    Key("s_nwr", "float", 0.0, "paper", "irreducible non-wetting saturation"),
    Key("porosity", "float", 1.0, "paper", "porosity"),
    Key("rho_w", "float", 1.0, "decision", "wetting density; sources are volumetric so it cancels"),
    Key("horizon", "float", 3.15576e7, "paper", "multiphase simulated time, s (one year)"),
    Key("cfl_factor", "float", 0.9, "decision", "fraction of the CFL-stable step"),
    Key("max_steps", "int", 100_000, "decision", "IMPES step cap"),
    Key("initial_saturation", "float", 0.0, "decision", "uniform initial wetting saturation"),
    Key("linear_solver", "choice", "cholesky", "decision", "pressure solver", ("cholesky", "pcg")),
    # geostatistics
    Key("covariance_kind", "choice", "exponential", "paper", "covariance model", COVARIANCE_KINDS),
    Key("correlation_length", "float", 1000.0 / 24 * 5, "decision", "correlation length, m (5 cells)"),
    Key("variance", "float", LOG10_VARIANCE_OF_UNIT_LN, "decision", "variance of log10 K (unit variance of ln K)"),
    Key("mean_log_perm", "float", -7.5, "decision", "mean of log10 K, K in m^2"),
    Key("n_modes", "int", 200, "paper", "Karhunen-Loeve modes kept"),
    Key("matern_smoothness", "float", 1.5, "decision", "Matern smoothness (matern only)"),
    # training
    Key("lr", "float", 1e-4, "paper", "ADAM learning rate"),
    Key("n_batches", "int", 20, "paper", "batches per epoch"),
    Key("samples_per_batch", "int", 10, "paper", "fields per batch"),
    Key("samples_per_epoch", "int", 200, "paper", "fields per epoch"),
    Key("epochs_pretrain", "int", 100, "decision", "single-phase epochs"),
    Key("epochs_finetune", "int", 30, "decision", "multiphase epochs"),
    Key("target_pressure", "float", 0.0, "decision", "target critical-cell overpressure, Pa"),
    Key("validation_size", "int", 200, "paper", "fixed validation fields"),
    Key("seed", "int", 0, "decision", "run seed for fields and weights"),
    # evaluation
    Key("eval_samples", "int", 10_000, "paper", "evaluation fields"),
    Key("success_threshold", "float", 1e4, "decision", "|overpressure| counted as controlled, Pa"),
    # runtime
    Key("threads", "threads", "auto", "decision", "worker threads per batch; auto = available cores"),
)

KEY_INDEX = {k.name: k for k in KEYS}


def _convert(key: Key, text: str):
    text = text.strip()
    if key.kind == "int":
        value = int(text)
    elif key.kind == "float":
        value = float(text)
        if not np.isfinite(value):
            raise ValueError("must be finite")
    elif key.kind == "choice":
        if text not in key.choices:
            raise ValueError(f"must be one of {', '.join(key.choices)}")
        value = text
    elif key.kind == "threads":
        value = text if text == "auto" else int(text)
        if value != "auto" and value < 1:
            raise ValueError("must be 'auto' or a positive integer")
    else:  # pragma: no cover
        raise AssertionError(key.kind)
    return value


@dataclass(frozen=True)
class RunConfig:
    values: tuple[tuple[str, Any], ...]

    def __getattr__(self, name: str):
        for key, value in object.__getattribute__(self, "values"):
            if key == name:
                return value
        raise AttributeError(name)

    def as_dict(self) -> dict[str, Any]:
        return dict(self.values)

    def replace(self, **changes) -> "RunConfig":
        data = self.as_dict()
        for name, value in changes.items():
            if name not in KEY_INDEX:
                raise ConfigError([f"unknown key {name!r}"])
            data[name] = value
        return from_mapping(data)

    @property
    def thread_count(self) -> int:
        return default_threads() if self.threads == "auto" else int(self.threads)

    # builders ---------------------------------------------------------------

    def grid(self):
        return build_grid(self.nx, self.ny, self.lx, self.ly)

    def wells(self) -> WellSet:
        return WellSet(
            (self.injector_i, self.injector_j),
            (self.extractor_i, self.extractor_j),
            (self.critical_i, self.critical_j),
            self.injection_rate,
        )

    def props(self) -> FluidProps:
        return FluidProps(self.mu_w, self.mu_nw, self.s_wc, self.s_nwr, self.porosity, self.rho_w)

    def geostat(self) -> GeostatConfig:
        return GeostatConfig(
            self.covariance_kind, self.correlation_length, self.variance, self.mean_log_perm, self.n_modes, self.matern_smoothness
        )

    def scenario(self) -> Scenario:
        return Scenario(
            self.grid(),
            self.wells(),
            self.props(),
            self.geostat(),
            self.bc_pressure,
            self.horizon,
            self.cfl_factor,
            self.max_steps,
            self.initial_saturation,
            self.linear_solver,
        )

    def training(self) -> TrainingConfig:
        return TrainingConfig(
            self.lr,
            self.n_batches,
            self.samples_per_batch,
            self.samples_per_epoch,
            self.epochs_pretrain,
            self.epochs_finetune,
            self.target_pressure,
            self.validation_size,
            self.seed,
            self.thread_count,
        )


def _validate(cfg: RunConfig) -> list[str]:
    """Every invariant violation, not just the first."""
    problems = []
    checks: list[tuple[str, Callable[[], Any]]] = [
        ("grid", cfg.grid),
        ("fluid", cfg.props),
        ("geostatistics", cfg.geostat),
        ("training", cfg.training),
    ]
    for label, build in checks:
        try:
            build()
        except (ValueError, TypeError) as exc:
            problems.append(f"{label}: {exc}")
    try:
        cfg.wells().validate(cfg.grid())
    except (ValueError, IndexError) as exc:
        problems.append(f"wells: {exc}")
    if cfg.n_modes > cfg.nx * cfg.ny:
        problems.append(f"geostatistics: n_modes={cfg.n_modes} exceeds {cfg.nx * cfg.ny} cells")
    if not cfg.horizon > 0:
        problems.append("physics: horizon must be positive")
    if not 0 < cfg.cfl_factor <= 1:
        problems.append("physics: cfl_factor must lie in (0, 1]")
    if cfg.max_steps < 1:
        problems.append("physics: max_steps must be positive")
    if not 0 <= cfg.initial_saturation <= 1:
        problems.append("physics: initial_saturation must lie in [0, 1]")
    if cfg.eval_samples < 1:
        problems.append("evaluation: eval_samples must be positive")
    if not cfg.success_threshold > 0:
        problems.append("evaluation: success_threshold must be positive")
    return problems


def from_mapping(data: dict[str, Any]) -> RunConfig:
    unknown = [k for k in data if k not in KEY_INDEX]
    if unknown:
        raise ConfigError([f"unknown key {k!r}" for k in unknown])
    cfg = RunConfig(tuple((k.name, data.get(k.name, k.default)) for k in KEYS))
    problems = _validate(cfg)
    if problems:
        raise ConfigError(problems)
    return cfg


def default_config() -> RunConfig:
    return from_mapping({})


def parse_text(text: str, source: str = "<config>") -> RunConfig:
    data: dict[str, Any] = {}
    problems = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            continue
        name, _, value = line.partition("=")
        name = name.strip()
        key = KEY_INDEX.get(name)
        if key is None:
            problems.append(f"{source}:{lineno}: unknown key {name!r}")
            continue
        if name in data:
            problems.append(f"{source}:{lineno}: duplicate key {name!r}")
            continue
        try:
            data[name] = _convert(key, value)
        except ValueError as exc:
            problems.append(f"{source}:{lineno}: {name}: {exc}")
    if problems:
        # report invariant violations among the keys that did parse, too
        try:
            from_mapping(data)
        except ConfigError as exc:
            problems.extend(exc.problems)
        raise ConfigError(problems)
    return from_mapping(data)


def parse_config(path: Union[str, Path]) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError([f"{path}: {exc.strerror or exc}"]) from exc
    return parse_text(text, str(path))


def serialize(cfg: RunConfig) -> str:
    lines = []
    for key in KEYS:
        value = getattr(cfg, key.name)
        if key.kind == "float":
            text = repr(float(value))
        elif key.kind == "int":
            text = str(int(value))
        else:
            text = str(value)
        lines.append(f"{key.name} = {text}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(serialize(cfg).encode()).hexdigest()


def describe_keys() -> str:
    """Key registry as text, for ``--help`` and the README."""
    width = max(len(k.name) for k in KEYS)
    return "\n".join(f"{k.name:<{width}}  {str(k.default):<18} [{k.provenance}] {k.doc}" for k in KEYS)
