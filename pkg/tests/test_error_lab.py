"""
Tests for error measurement against the analytic geometric-put solution.
"""
import numpy as np
import pytest

from app.core.exceptions import ConfigError, ReferenceUnavailable
from app.models.market import BlackScholesMarket, OptionStyle, PayoffKind
from app.schemas.study import ErrorRecord, StudyConfig
from app.schemas.training import TrainConfig
from app.services.error_lab import (
    analytic_control,
    count_inversions,
    geometric_mean,
    interval_distance,
    measure_y_z_errors,
    run_convergence_study,
    run_posterior_bound_study,
    summarize_bound_study,
)
from app.services.market_models import geometric_put_value_and_delta, make_geometric_put_problem
from app.services.mlp import ControlStack
from app.services.path_engine import build_partition, simulate_forward_batch

QUICK_TRAIN = TrainConfig(iterations=3, batch_size=32, eval_paths=256)


def _record(h: float, var: float, y: float, z: float) -> ErrorRecord:
    return ErrorRecord(
        n=round(1 / h), h=h, var_y0=var, y_err_sq=y, z_err_sq=z,
        price=1.0, analytic=1.0, rel_err=0.0, seed=0,
    )


def test_geometric_mean_handles_zero() -> None:
    x = np.array([[4.0, 9.0], [0.0, 5.0], [-1.0, 2.0]])
    np.testing.assert_allclose(geometric_mean(x), [6.0, 0.0, 0.0])


def test_analytic_control_matches_chain_rule(put3) -> None:
    """grad_x P(t, geomean(x)) . sigma(x) by finite differences of the composite map."""
    market = put3.market
    x = np.array([[92.0, 104.0, 99.0]])
    t, eps = 0.4, 1e-4
    grad = np.zeros(3)
    for k in range(3):
        up, down = x.copy(), x.copy()
        up[0, k] += eps
        down[0, k] -= eps
        v_up, _ = geometric_put_value_and_delta(market, t, geometric_mean(up))
        v_down, _ = geometric_put_value_and_delta(market, t, geometric_mean(down))
        grad[k] = (v_up[0] - v_down[0]) / (2 * eps)
    expected = grad @ put3.diffusion(t, x)[0]
    np.testing.assert_allclose(analytic_control(market, t, x)[0], expected, rtol=1e-6)


class TestMeasure:
    def test_exact_controls_on_flat_market(self) -> None:
        market = BlackScholesMarket.uniform(2, rate=0.0, vol=0.0, strike=110.0)
        problem = make_geometric_put_problem(market)
        grid = build_partition(5, 1.0)
        controls = ControlStack.initialize(problem, 5, seed=0)
        record = measure_y_z_errors(controls, market, grid, 64, seed=1)
        assert record.y_err_sq == pytest.approx(0.0, abs=1e-20)
        assert record.z_err_sq == 0.0
        assert record.price == pytest.approx(10.0)
        assert record.rel_err == pytest.approx(0.0, abs=1e-12)

    def test_basket_call_has_no_reference(self, market5) -> None:
        problem = make_geometric_put_problem(market5)
        grid = build_partition(2, 1.0)
        controls = ControlStack.initialize(problem, 2, seed=0)
        with pytest.raises(ReferenceUnavailable):
            measure_y_z_errors(controls, market5, grid, 16, seed=0, payoff=PayoffKind.BASKET_CALL)

    def test_zero_controls_measure_full_control_energy(self, market1, put1) -> None:
        grid = build_partition(10, 1.0)
        controls = ControlStack.initialize(put1, 10, seed=0, constant=True)
        record = measure_y_z_errors(controls, market1, grid, 2000, seed=3)

        batch = simulate_forward_batch(put1, grid, 2000, seed=3)
        energy = sum(
            np.mean(np.sum(analytic_control(market1, grid.times[i], batch.states[:, i]) ** 2, axis=1))
            for i in range(10)
        )
        assert record.z_err_sq == pytest.approx(grid.h * energy, rel=1e-12)
        assert record.z_err_sq > 0.0
        assert len(record.z_err_profile) == 10
        assert len(record.y_err_profile) == 11
        assert record.y_err_profile[-1] == 0.0
        assert all(np.isfinite(record.z_err_profile))

    def test_record_is_reproducible(self, market1, put1) -> None:
        grid = build_partition(4, 1.0)
        controls = ControlStack.initialize(put1, 4, seed=2)
        a = measure_y_z_errors(controls, market1, grid, 100, seed=5)
        b = measure_y_z_errors(controls, market1, grid, 100, seed=5)
        assert a == b


class TestBoundSummary:
    def test_identical_points_are_undefined(self) -> None:
        summary = summarize_bound_study([_record(0.1, 0.5, 0.2, 0.3)] * 6)
        assert summary.status == "undefined"
        assert summary.correlation is None

    def test_power_law_is_recovered(self) -> None:
        records = []
        for h in (0.2, 0.1, 0.04, 0.02, 0.01, 0.005):
            bound = h + 0.01
            records.append(_record(h, 0.01, 0.5 * bound**2, 0.5 * bound**2))
        summary = summarize_bound_study(records)
        assert summary.status == "ok"
        assert summary.correlation == pytest.approx(1.0)
        assert summary.slope == pytest.approx(2.0)
        assert summary.intercept == pytest.approx(0.0, abs=1e-12)

    def test_zero_error_is_undefined(self) -> None:
        records = [_record(1 / n, 0.1, 0.0, 0.0) for n in (2, 4, 8)]
        assert summarize_bound_study(records).status == "undefined"


class TestStudies:
    def test_bound_study_needs_six_configs(self, market1) -> None:
        with pytest.raises(ConfigError):
            run_posterior_bound_study(market1, [StudyConfig(n=2, iterations=1)] * 5)

    def test_identical_configs_report_undefined(self, market1) -> None:
        configs = [StudyConfig(n=2, iterations=3, seed=1)] * 6
        records, summary = run_posterior_bound_study(
            market1, configs, train_config=QUICK_TRAIN, eval_paths=128
        )
        assert len(records) == 6
        assert summary.status == "undefined"

    def test_convergence_needs_sorted_ns(self, market1) -> None:
        with pytest.raises(ConfigError):
            run_convergence_study(market1, [5, 2], train_config=QUICK_TRAIN)

    def test_convergence_rows(self, market1) -> None:
        rows = run_convergence_study(market1, [1, 2], train_config=QUICK_TRAIN)
        assert [r.n for r in rows] == [1, 2]
        assert all(r.reference == pytest.approx(6.9359, abs=5e-4) for r in rows)
        assert all(r.rel_err is not None for r in rows)

    def test_bermudan_convergence_rejects_misaligned_n(self, market1) -> None:
        with pytest.raises(ConfigError, match="n=\[2\]"):
            run_convergence_study(
                market1, [2, 10], style=OptionStyle.BERMUDAN, train_config=QUICK_TRAIN
            )

    def test_bermudan_convergence_rows_carry_interval_distance(self, market1) -> None:
        rows = run_convergence_study(
            market1,
            [10, 20],
            style=OptionStyle.BERMUDAN,
            train_config=QUICK_TRAIN,
            interval=(6.9, 7.1),
        )
        assert [r.n for r in rows] == [10, 20]
        assert all(r.reference is None and r.rel_err is None for r in rows)
        assert all(r.interval_distance == interval_distance(r.price, (6.9, 7.1)) for r in rows)


def test_interval_distance() -> None:
    assert interval_distance(1.65, (1.59, 1.72)) == 0.0
    assert interval_distance(1.82, (1.59, 1.72)) == pytest.approx(0.10)
    assert interval_distance(1.50, (1.59, 1.72)) == pytest.approx(0.09)


def test_count_inversions() -> None:
    assert count_inversions([0.03, 0.01, 0.012, 0.005]) == 1
    assert count_inversions([3, 2, 1]) == 0
