import numpy as np
import pytest

from pressman.evaluate import EvalReport, EvalRow, emit_report, evaluate_ensemble, read_csv, summarize, write_csv
from pressman.geostats import GeostatConfig
from pressman.grid import build_grid
from pressman.scenario import Scenario
from pressman.single_phase import critical_pressure_and_gradient
from pressman.surrogate import Architecture, NetworkParams

from conftest import small_wells

ARCH = Architecture(input_size=12, kernel=3, channels=(2, 3), hidden=(6, 4))


def constant_rate_params(scenario, rate):
    """A network whose output is ``rate`` for every input."""
    w = {k: np.zeros(s) for k, s in ARCH.shapes().items()}
    scale = scenario.wells.injection_rate
    w["dense3.bias"][:] = np.log(np.expm1(rate / scale))
    return NetworkParams(ARCH, w, scenario.geostat.mean_log_perm, scenario.input_std, scale)


@pytest.fixture
def uniform_scenario():
    return Scenario(
        grid=build_grid(12, 12, 500.0, 500.0),
        wells=small_wells(12),
        geostat=GeostatConfig(variance=0.0, n_modes=10, mean_log_perm=-9.0),
        horizon=2e5,
    )


def test_tuned_rate_controls_pressure(uniform_scenario):
    sc = uniform_scenario
    perm = sc.field(0)
    p0, slope = critical_pressure_and_gradient(sc.single_phase(perm), 0.0)
    params = constant_rate_params(sc, -p0 / slope)
    report = evaluate_ensemble(params, sc, 1, "single")
    assert abs(report.rows[0].critical_pressure) < 1e-6 * abs(p0)
    multi = evaluate_ensemble(params, sc, 1, "multi")
    uncontrolled = sc.critical_pressure(perm, 0.0, "multi")
    assert abs(multi.rows[0].critical_pressure) < 0.1 * abs(uncontrolled)


def test_zero_variance_rows_identical(uniform_scenario):
    report = evaluate_ensemble(constant_rate_params(uniform_scenario, 0.004), uniform_scenario, 4, "multi", seed=3)
    assert len({(r.extraction_rate, r.critical_pressure) for r in report.rows}) == 1
    assert [r.seed for r in report.rows] == [f"3:2:{i}" for i in range(4)]


def test_summary_recomputable_from_csv(small_scenario, tmp_path):
    sc = small_scenario
    w = {k: np.random.default_rng(0).normal(0, 0.3, s) for k, s in ARCH.shapes().items()}
    params = NetworkParams(ARCH, w, sc.geostat.mean_log_perm, sc.input_std, sc.wells.injection_rate)
    report = evaluate_ensemble(params, sc, 12, "multi", seed=1, threshold=5e4, threads=2)
    assert len(report.rows) == 12 and report.summary.n_failed == 0
    paths = emit_report(report, tmp_path / "out")
    rows = read_csv(paths["csv"])
    assert len(rows) == 12
    again = summarize(rows, 5e4)
    for name in ("mean_rate", "median_rate", "p90_rate", "pressure_rmse", "fraction_within"):
        assert getattr(again, name) == pytest.approx(getattr(report.summary, name), rel=1e-12, abs=1e-300)
    rates = np.array([r.extraction_rate for r in rows])
    pressures = np.array([r.critical_pressure for r in rows])
    assert report.summary.mean_rate == pytest.approx(rates.mean(), rel=1e-12)
    assert report.summary.fraction_within == np.mean(np.abs(pressures) <= 5e4)
    serial = evaluate_ensemble(params, sc, 12, "multi", seed=1, threshold=5e4, threads=1)
    assert serial.rows == report.rows


def test_emit_report_files_and_byte_identical_csv(tmp_path):
    rows = [EvalRow(i, f"0:2:{i}", 0.001 * i, 100.0 * (i - 2), "ok") for i in range(5)]
    report = EvalReport(rows)
    out = tmp_path / "empty"
    paths = emit_report(report, out)
    for key in ("csv", "rates", "pressures"):
        assert paths[key].exists() and paths[key].stat().st_size > 0
    first = paths["csv"].read_bytes()
    emit_report(report, out)
    assert paths["csv"].read_bytes() == first
    assert first.decode().splitlines()[0] == "sample,seed,extraction_rate_m3s,critical_pressure_pa,status"
    assert paths["rates"].read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_failures_recorded_not_fatal(small_scenario):
    sc = Scenario(small_scenario.grid, small_scenario.wells, geostat=small_scenario.geostat, horizon=1e8, max_steps=3)
    report = evaluate_ensemble(constant_rate_params(sc, 0.003), sc, 3, "multi")
    assert report.summary.n_failed == 3
    assert all(r.status.startswith("failed: RuntimeError") for r in report.rows)
    assert np.isnan(report.summary.mean_rate)


def test_csv_round_trip_exact(tmp_path):
    rows = [EvalRow(0, "0:2:0", 0.1 + 0.2, -1.0 / 3.0), EvalRow(1, "0:2:1", 1e-17, float("nan"), "failed: boom")]
    write_csv(EvalReport(rows), tmp_path / "e.csv")
    back = read_csv(tmp_path / "e.csv")
    assert back[0] == rows[0]
    assert back[1].status == "failed: boom" and np.isnan(back[1].critical_pressure)


def test_rejects_empty_request(uniform_scenario):
    with pytest.raises(ValueError):
        evaluate_ensemble(constant_rate_params(uniform_scenario, 0.001), uniform_scenario, 0)
