import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from perfcontrol.experiment import (
    ControlSpec,
    ExperimentConfig,
    FlowSpec,
    SweepResult,
    SweepRow,
    build_control,
    fit_rate,
    load_sweep,
    report,
    run_point,
    run_sweep,
    save_sweep,
    scaled_resistance,
)
from perfcontrol.exponents import initial_data_cap, time_exponent
from perfcontrol.io import read_csv
from perfcontrol.spectral import SpectralGrid

TINY = dict(n=16, steps=12, snapshot_every=4, control=ControlSpec(strength=0.02))


@settings(max_examples=50, deadline=None)
@given(st.floats(-2.0, 3.0), st.floats(-5.0, 5.0))
def test_fit_recovers_exact_power_law(rate, log_c):
    eps = np.array([1 / 2, 1 / 3, 1 / 4, 1 / 5])
    fit = fit_rate(eps, np.exp(log_c) * eps**rate)
    assert fit.rate == pytest.approx(rate, abs=1e-9)
    assert fit.ci_high - fit.ci_low < 1e-6
    assert fit.status == "ok"


def test_fit_interval_widens_with_noise():
    eps = np.array([1 / 2, 1 / 3, 1 / 4])
    clean = fit_rate(eps, eps**0.5)
    noisy = fit_rate(eps, eps**0.5 * np.array([1.0, 1.3, 0.8]))
    assert noisy.ci_high - noisy.ci_low > clean.ci_high - clean.ci_low
    assert noisy.ci_low < noisy.rate < noisy.ci_high
    # the 95% t-quantile with one degree of freedom
    res_half = (noisy.ci_high - noisy.ci_low) / 2
    from scipy import stats

    slope = stats.linregress(np.log(eps), np.log(eps**0.5 * np.array([1.0, 1.3, 0.8])))
    assert res_half == pytest.approx(12.7062047 * slope.stderr, rel=1e-6)


def test_fit_degenerate_inputs():
    assert fit_rate([0.5], [0.1]).status == "insufficient points"
    assert fit_rate([0.5, 0.25], [0.1, float("nan")]).status == "insufficient points"
    two = fit_rate([0.5, 0.25], [0.2, 0.1])
    assert two.status == "no interval" and two.rate == pytest.approx(1.0)
    assert not two.excludes_zero


def test_dipole_control_forcing_stays_in_zone():
    spec = ControlSpec()
    for regime, A in (("euler", None), ("darcy", scaled_resistance(0.125))):
        triplet = build_control(spec, regime, A)
        n = 32
        f = triplet.forcing_on_grid(0.5, n)
        x = SpectralGrid(n).points.reshape(-1, 3)
        outside = ~spec.zone.contains(x)
        assert np.abs(f.reshape(3, -1)[:, outside]).max() == 0.0
        assert np.abs(f).max() > 0


def test_darcy_scaled_resistance_is_stokes_drag():
    assert np.allclose(scaled_resistance(0.125), 6 * np.pi * 0.125 * np.eye(3))


@pytest.fixture(scope="module")
def tiny_sweep():
    return run_sweep(ExperimentConfig(N_values=(3, 2), **TINY))


def test_sweep_rows_sorted_and_flagged(tiny_sweep):
    eps = [r.eps for r in tiny_sweep.rows]
    assert eps == sorted(eps, reverse=True) == [0.5, 1 / 3]
    for row in tiny_sweep.rows:
        assert row.note == ""
        assert row.energy_ok
        assert row.admissible
        assert math.isfinite(row.field_error) and row.field_error > 0
    assert tiny_sweep.fit.status == "no interval"


def test_sweep_is_deterministic(tiny_sweep, tmp_path):
    again = run_sweep(ExperimentConfig(N_values=(2, 3), **TINY))
    a = report(tiny_sweep, tmp_path / "a", plots=False)["rows"].read_bytes()
    b = report(again, tmp_path / "b", plots=False)["rows"].read_bytes()
    assert a == b


def test_failed_point_keeps_partial_results():
    # hole-size exponent outside the full-mode range
    cfg = ExperimentConfig(N_values=(2,), alpha=3.5, **TINY)
    result = run_sweep(cfg)
    assert len(result.rows) == 1
    assert "DomainSpecError" in result.rows[0].note
    assert result.fit.status == "insufficient points"


def test_initial_data_clamped_in_theorem_mode():
    cfg = ExperimentConfig(N_values=(2,), initial_norm=10.0, theorem_check=True, **TINY)
    row, _, _ = run_point(cfg, 2)
    cap = initial_data_cap("euler", cfg.alpha, cfg.beta, 0.5) * 0.5 ** time_exponent("euler", cfg.alpha, cfg.beta)
    assert row.initial_norm == pytest.approx(cap, rel=1e-12)
    assert row.initial_within_cap
    loose = ExperimentConfig(N_values=(2,), initial_norm=10.0, **TINY)
    row, _, _ = run_point(loose, 2)
    assert row.initial_norm == 10.0 and not row.initial_within_cap


def _synthetic(count: int) -> SweepResult:
    rows = []
    for i in range(count):
        eps = 1.0 / (i + 2)
        rows.append(SweepRow(eps=eps, N=i + 2, n=32, field_error=0.3 * eps**0.7 * (1 + 0.01 * i),
                             defect=1e-3 * eps, clearance=0.05, poincare_ratio=0.1 * eps**0.5,
                             energy_ok=True, admissible=True))
    fit = fit_rate([r.eps for r in rows], [r.field_error for r in rows])
    curves = {r.N: np.stack([np.linspace(0, 1, 5), 0.05 + 0.01 * np.arange(5)]) for r in rows}
    return SweepResult(ExperimentConfig(N_values=tuple(r.N for r in rows)), rows, fit, 0.3, 1.0, curves)


def test_report_rejects_empty_sweep(tmp_path):
    empty = SweepResult(ExperimentConfig(), [], fit_rate([], []), 0.3)
    with pytest.raises(ValueError):
        report(empty, tmp_path)


def test_report_one_row_tables_only(tmp_path):
    paths = report(_synthetic(1), tmp_path)
    assert set(paths) == {"rows", "fit", "summary"}
    assert read_csv(paths["fit"])[0]["status"] == "insufficient points"


def test_report_three_rows_all_artifacts_round_trip(tmp_path):
    result = _synthetic(3)
    paths = report(result, tmp_path)
    assert {"rows", "fit", "summary", "error_plot", "defect_plot", "clearance_plot"} <= set(paths)
    for p in paths.values():
        assert p.stat().st_size > 0
    back = read_csv(paths["rows"])
    for row, parsed in zip(result.rows, back):
        for key, value in row.as_row().items():
            if isinstance(value, float) and math.isfinite(value):
                assert abs(parsed[key] - value) <= 1e-12 * max(1.0, abs(value))
    summary = paths["summary"].read_text()
    assert "admissible" in summary and "energy inequality holds" in summary


def test_sweep_json_round_trip(tmp_path):
    result = _synthetic(3)
    back = load_sweep(save_sweep(result, tmp_path / "s.json"))
    assert back.config == result.config
    for r, s in zip(back.rows, result.rows):
        for key, value in r.as_row().items():
            other = s.as_row()[key]
            assert value == other or (isinstance(value, float) and math.isnan(value) and math.isnan(other))
    assert back.fit == result.fit


def test_flow_diagnostics_decomposition():
    flow = FlowSpec((0.85, 0.5, 0.5), samples=4000, steps=24)
    row, _, curve = run_point(ExperimentConfig(flow=flow, **TINY), 2)
    assert row.note == ""
    assert row.decomposition_holds
    assert row.clearance > 0
    assert curve.shape == (2, 25)


@pytest.mark.slow
@pytest.mark.xfail(strict=False, reason="viscous damping dominates at desk-scale eps; see the decisions ledger")
def test_euler_sweep_error_strictly_decreasing():
    cfg = ExperimentConfig(alpha=2.0, beta=1.2, n=64, N_values=(2, 3, 4))
    result = run_sweep(cfg)
    print("field errors", result.column("field_error"), "fit", result.fit)
    assert result.strictly_decreasing()
    assert result.fit.rate > 0 and result.fit.excludes_zero
