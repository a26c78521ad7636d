"""
End-to-end pricing checks against the published benchmark values.

These train full-size networks and take minutes each; run them with
``pytest -m slow``.
"""
import numpy as np
import pytest

from app.models.market import BlackScholesMarket, OptionStyle, PayoffKind
from app.schemas.study import StudyConfig
from app.schemas.training import TrainConfig
from app.services.backward_scheme import train
from app.services.error_lab import (
    count_inversions,
    measure_y_z_errors,
    run_convergence_study,
    run_posterior_bound_study,
)
from app.services.experiment_service import build_config, price_configuration
from app.services.market_models import (
    basket_call_mc_oracle,
    geometric_put_closed_form,
    make_problem,
)
from app.services.mlp import ControlStack
from app.services.path_engine import build_partition

pytestmark = pytest.mark.slow


@pytest.mark.parametrize("d1", [1, 5, 10])
def test_european_geometric_put_within_one_percent(d1: int) -> None:
    row, report, _ = price_configuration(build_config({"market": {"dim": d1}, "n": 100}))
    assert report.iterations_run > 0
    assert row.passed, row.rel_err_or_interval_flag
    assert abs(row.price - geometric_put_closed_form(BlackScholesMarket.uniform(d1))) <= 0.01 * row.reference


def test_bermudan_single_asset() -> None:
    config = build_config({"style": "bermudan", "n": 10, "exercise_dates": 10})
    assert config.resolved()["train"]["batch_size"] == 4096
    row, _, _ = price_configuration(config)
    assert 6.85 <= row.price <= 7.20


def test_basket_call_matches_oracle() -> None:
    market = BlackScholesMarket.uniform(5)
    oracle, _ = basket_call_mc_oracle(market, 1_000_000, seed=0)
    row, _, _ = price_configuration(build_config({"payoff": "basket_call", "market": {"dim": 5}}))
    assert row.reference == oracle
    assert abs(row.price - oracle) / oracle <= 0.01


def test_european_convergence_in_twenty_dimensions() -> None:
    rows = run_convergence_study(
        BlackScholesMarket.uniform(20), [2, 5, 10, 20, 50, 100], train_config=TrainConfig()
    )
    errors = [abs(r.rel_err) for r in rows]
    assert 0.015 <= errors[0] <= 0.035
    assert all(e <= 0.005 for r, e in zip(rows, errors) if r.n >= 50)
    assert count_inversions(errors) <= 1


def test_bermudan_convergence_moves_toward_interval() -> None:
    interval = (1.59, 1.72)
    rows = run_convergence_study(
        BlackScholesMarket.uniform(20),
        [10, 200],
        style=OptionStyle.BERMUDAN,
        train_config=TrainConfig(),
        interval=interval,
    )
    coarse, fine = rows
    assert fine.interval_distance < coarse.interval_distance


def test_posterior_bound_correlation() -> None:
    configs = [
        StudyConfig(n=5, iterations=20),
        StudyConfig(n=5, iterations=1000),
        StudyConfig(n=25, iterations=50),
        StudyConfig(n=25, iterations=1500),
        StudyConfig(n=100, iterations=100),
        StudyConfig(n=100, iterations=2000),
    ]
    records, summary = run_posterior_bound_study(
        BlackScholesMarket.uniform(1), configs, train_config=TrainConfig(plateau_tol=None)
    )
    assert len(records) == 6
    assert summary.status == "ok"
    assert summary.correlation >= 0.8


def test_doubling_budget_does_not_raise_median_variance() -> None:
    problem = make_problem(BlackScholesMarket.uniform(1), PayoffKind.GEOMETRIC_PUT)
    grid = build_partition(10, 1.0)
    variances = {}
    for iterations in (250, 500):
        reports = [
            train(problem, grid, TrainConfig(iterations=iterations, plateau_tol=None, seed=seed))[1]
            for seed in range(5)
        ]
        variances[iterations] = np.array([r.final_variance for r in reports])
    base = variances[250]
    std_err = base.std(ddof=1) / np.sqrt(base.size)
    assert np.median(variances[500]) <= np.median(base) + std_err


def test_training_reduces_y_error_tenfold() -> None:
    market = BlackScholesMarket.uniform(1)
    problem = make_problem(market, PayoffKind.GEOMETRIC_PUT)
    grid = build_partition(100, market.maturity)
    untrained = ControlStack.initialize(problem, 100, seed=0)
    trained, _ = train(problem, grid, TrainConfig(), OptionStyle.EUROPEAN)

    before = measure_y_z_errors(untrained, market, grid, 2**14, seed=11)
    after = measure_y_z_errors(trained, market, grid, 2**14, seed=11)
    assert after.y_err_sq * 10.0 <= before.y_err_sq

