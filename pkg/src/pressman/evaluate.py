"""Ensemble evaluation of a trained surrogate on fresh permeability fields.

CSV schema of ``evaluation.csv`` (one row per field, in sample order)::

    sample                 int    position in the evaluation stream
    seed                   str    "<run_seed>:2:<sample>" seed tuple of the field
    extraction_rate_m3s    float  surrogate rate, m^3/s
    critical_pressure_pa   float  terminal pressure at the critical cell, Pa
    status                 str    "ok" or "failed: <reason>"

Floats are written with ``repr`` so the file round-trips exactly.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .scenario import EVALUATION, FieldSampler, Scenario, parallel_map
from .surrogate import NetworkParams, predict_rates

EVAL_COLUMNS = ("sample", "seed", "extraction_rate_m3s", "critical_pressure_pa", "status")


@dataclass(frozen=True)
class EvalRow:
    sample: int
    seed: str
    extraction_rate: float
    critical_pressure: float
    status: str = "ok"


@dataclass(frozen=True)
class EvalSummary:
    n_samples: int
    n_failed: int
    mean_rate: float
    median_rate: float
    p90_rate: float
    pressure_rmse: float
    fraction_within: float
    threshold: float
    target: float


@dataclass
class EvalReport:
    rows: list[EvalRow]
    threshold: float = 1e4
    target: float = 0.0
    injection_rate: float = 0.031688
    summary: EvalSummary = field(init=False)

    def __post_init__(self):
        self.summary = summarize(self.rows, self.threshold, self.target)


def summarize(rows: list[EvalRow], threshold: float, target: float = 0.0) -> EvalSummary:
    ok = [r for r in rows if r.status == "ok"]
    rates = np.array([r.extraction_rate for r in ok])
    err = np.array([r.critical_pressure for r in ok]) - target
    if not ok:
        nan = float("nan")
        return EvalSummary(len(rows), len(rows), nan, nan, nan, nan, nan, threshold, target)
    return EvalSummary(
        n_samples=len(rows),
        n_failed=len(rows) - len(ok),
        mean_rate=float(np.mean(rates)),
        median_rate=float(np.median(rates)),
        p90_rate=float(np.percentile(rates, 90)),
        pressure_rmse=float(np.sqrt(np.mean(err**2))),
        fraction_within=float(np.mean(np.abs(err) <= threshold)),
        threshold=threshold,
        target=target,
    )


def evaluate_ensemble(
    params: NetworkParams,
    scenario: Scenario,
    n_samples: int,
    physics: str = "multi",
    seed: int = 0,
    threshold: float = 1e4,
    target: float = 0.0,
    threads: int = 1,
) -> EvalReport:
    """Surrogate rate plus full simulation for ``n_samples`` evaluation fields.

    A failing simulation is recorded in its row instead of aborting the run.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    sampler = FieldSampler(scenario, seed)

    def run(i: int) -> EvalRow:
        perm = sampler.evaluation(i)
        label = f"{seed}:{EVALUATION}:{i}"
        rate = float(predict_rates(params, perm[None])[0])
        try:
            pressure = scenario.critical_pressure(perm, rate, physics)
        except Exception as exc:  # recorded per sample
            return EvalRow(i, label, rate, float("nan"), f"failed: {type(exc).__name__}: {exc}".replace("\n", " "))
        return EvalRow(i, label, rate, pressure)

    rows = parallel_map(run, list(range(n_samples)), threads)
    return EvalReport(rows, threshold, target, scenario.wells.injection_rate)


def write_csv(report: EvalReport, path: Union[str, Path]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(EVAL_COLUMNS)
        for r in report.rows:
            writer.writerow([r.sample, r.seed, repr(r.extraction_rate), repr(r.critical_pressure), r.status])


def read_csv(path: Union[str, Path]) -> list[EvalRow]:
    with open(path, newline="") as fh:
        return [
            EvalRow(int(r["sample"]), r["seed"], float(r["extraction_rate_m3s"]), float(r["critical_pressure_pa"]), r["status"])
            for r in csv.DictReader(fh)
        ]


def _histogram(values: np.ndarray, path: Path, xlabel: str, title: str, marker: Optional[float] = None) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    bins = max(10, min(60, int(math.sqrt(max(len(values), 1)))))
    ax.hist(values, bins=bins, color="#4477aa", edgecolor="white")
    if marker is not None:
        ax.axvline(marker, color="#cc3311", linestyle="--", linewidth=1)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("count")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def emit_report(report: EvalReport, out_dir: Union[str, Path]) -> dict[str, Path]:
    """Write ``evaluation.csv`` plus rate and pressure histograms (PNG)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "csv": out / "evaluation.csv",
        "rates": out / "extraction_rates.png",
        "pressures": out / "critical_pressures.png",
    }
    write_csv(report, paths["csv"])
    ok = [r for r in report.rows if r.status == "ok"]
    _histogram(np.array([r.extraction_rate for r in ok]), paths["rates"], "extraction rate (m$^3$/s)", f"{len(ok)} fields")
    _histogram(
        np.array([r.critical_pressure for r in ok]) / 1e6,
        paths["pressures"],
        "critical-cell overpressure (MPa)",
        f"{len(ok)} fields",
        marker=report.target / 1e6,
    )
    return paths
