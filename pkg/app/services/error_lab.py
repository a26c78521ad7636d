"""
Error laboratory: measures how far trained controls are from the analytic
solution and checks that the training loss tracks that error.

For geometric-basket puts the value function u(t, x) = P(t, geometric mean of x)
is known in closed form, so Y_{t_i} can be compared with u(t_i, X_{t_i}) and
Z_{t_i} with grad u . sigma along simulated paths. Simulated states stand in for
the exact ones; the difference is the forward discretisation error, of order h.
"""
import math

import numpy as np
from scipy import stats

from app.core.exceptions import ConfigError, ReferenceUnavailable
from app.core.logging import get_logger
from app.models.grid import Partition
from app.models.market import (
    BlackScholesMarket,
    ExerciseSchedule,
    OptionStyle,
    PayoffKind,
    correlation_factor,
)
from app.schemas.study import ConvergenceRow, ErrorRecord, StudyConfig, StudySummary
from app.schemas.training import TrainConfig
from app.services.backward_scheme import rollout_backward_european, train
from app.services.market_models import (
    geometric_put_closed_form,
    geometric_put_value_and_delta,
    make_problem,
)
from app.services.mlp import ControlStack
from app.services.path_engine import (
    StreamDomain,
    build_partition,
    derive_seed,
    simulate_forward_batch,
)
from app.workers.pool import PoolKind, map_ordered

logger = get_logger(__name__)

MIN_STUDY_CONFIGS = 6


def geometric_mean(x: np.ndarray) -> np.ndarray:
    """Geometric mean over the last axis; zero when any coordinate is <= 0."""
    floored = np.maximum(np.asarray(x, dtype=float), 0.0)
    with np.errstate(divide="ignore"):
        return np.exp(np.mean(np.log(floored), axis=-1))


def analytic_control(market: BlackScholesMarket, t: float, x: np.ndarray) -> np.ndarray:
    """
    grad_x u(t, x) . sigma(x) for the geometric put, shape (M, d).

    With S = geometric mean, d_{x_k} u = P_s(t, S) S / (d1 x_k) and
    sigma(x)_{kj} = s_k x_k L_kj, so the x_k cancel and
    Z_j = P_s(t, S) S / d1 * (s^T L)_j.
    """
    s_hat = geometric_mean(x)
    _, delta = geometric_put_value_and_delta(market, t, s_hat)
    loading = market.vol_array @ correlation_factor(market.correlation)
    return (np.asarray(delta) * s_hat / market.dim)[:, None] * loading[None, :]


def measure_y_z_errors(
    controls: ControlStack,
    market: BlackScholesMarket,
    partition: Partition,
    paths: int,
    seed: int,
    payoff: PayoffKind = PayoffKind.GEOMETRIC_PUT,
    iterations: int | None = None,
) -> ErrorRecord:
    """
    Compare rolled-out Y and Z with the analytic solution on fresh paths.

    y_err_sq is the largest per-node mean squared Y deviation and z_err_sq the
    h-weighted sum of per-step mean squared Z deviations; both per-node profiles
    are kept on the record.

    Raises:
        ReferenceUnavailable: For payoffs without a closed-form value function
    """
    if payoff != PayoffKind.GEOMETRIC_PUT:
        raise ReferenceUnavailable(f"no analytic value function for payoff {payoff.value}")

    problem = make_problem(market, payoff)
    batch = simulate_forward_batch(problem, partition, paths, seed)
    result = rollout_backward_european(problem, partition, batch, controls, keep_path=True)
    assert result.y is not None and result.z is not None

    n = partition.n
    y_profile: list[float] = []
    z_profile: list[float] = []
    for i in range(n):
        t = float(partition.times[i])
        x = batch.states[:, i]
        value, _ = geometric_put_value_and_delta(market, t, geometric_mean(x))
        y_profile.append(float(np.mean((result.y[:, i] - value) ** 2)))
        z_ref = analytic_control(market, t, x)
        z_profile.append(float(np.mean(np.sum((result.z[:, i] - z_ref) ** 2, axis=1))))
    # At T the reference is the payoff itself
    terminal = problem.terminal(batch.states[:, n])
    y_profile.append(float(np.mean((result.y[:, n] - terminal) ** 2)))

    price = float(np.mean(result.y0))
    analytic = geometric_put_closed_form(market)
    rel_err = (price - analytic) / analytic if analytic else math.inf
    record = ErrorRecord(
        n=n,
        h=partition.h,
        var_y0=float(np.var(result.y0)),
        y_err_sq=max(y_profile),
        z_err_sq=partition.h * float(np.sum(z_profile)),
        price=price,
        analytic=analytic,
        rel_err=rel_err,
        seed=seed,
        y_err_profile=y_profile,
        z_err_profile=z_profile,
        iterations=iterations,
    )
    logger.debug(
        f"Errors at n={n}: y={record.y_err_sq:.4g}, z={record.z_err_sq:.4g}, "
        f"var={record.var_y0:.4g}"
    )
    return record


def _study_point(item: tuple[BlackScholesMarket, StudyConfig, TrainConfig, int]) -> ErrorRecord:
    market, point, base, paths = item
    problem = make_problem(market, PayoffKind.GEOMETRIC_PUT)
    partition = build_partition(point.n, market.maturity)
    config = base.model_copy(update={"iterations": point.iterations, "seed": point.seed})
    controls, _ = train(problem, partition, config, OptionStyle.EUROPEAN)
    return measure_y_z_errors(
        controls,
        market,
        partition,
        paths,
        derive_seed(point.seed, StreamDomain.EVALUATION, 1),
        iterations=point.iterations,
    )


def summarize_bound_study(records: list[ErrorRecord]) -> StudySummary:
    """
    Log-log fit of total error against h + Var(Y_0).

    Degenerate inputs (constant or non-positive coordinates) give an
    ``undefined`` status rather than NaN statistics.
    """
    points = [(r.bound_proxy, r.total_error) for r in records]
    if len(points) < 2:
        return StudySummary(status="undefined", points=points, note="fewer than two points")
    xs = np.array([p[0] for p in points])
    ys = np.array([p[1] for p in points])
    if np.any(xs <= 0) or np.any(ys <= 0):
        return StudySummary(status="undefined", points=points, note="non-positive error or bound")
    log_x, log_y = np.log(xs), np.log(ys)
    if np.ptp(log_x) == 0.0 or np.ptp(log_y) == 0.0:
        return StudySummary(status="undefined", points=points, note="constant coordinates")
    fit = stats.linregress(log_x, log_y)
    return StudySummary(
        status="ok",
        correlation=float(fit.rvalue),
        slope=float(fit.slope),
        intercept=float(fit.intercept),
        points=points,
    )


def run_posterior_bound_study(
    market: BlackScholesMarket,
    configs: list[StudyConfig],
    train_config: TrainConfig | None = None,
    eval_paths: int = 2**14,
    jobs: int = 1,
) -> tuple[list[ErrorRecord], StudySummary]:
    """
    Train every (n, budget, seed) config, measure its errors and fit
    log(total error) against log(h + Var(Y_0)).

    Configs run in worker processes when jobs > 1; records come back in config order.
    """
    if len(configs) < MIN_STUDY_CONFIGS:
        raise ConfigError(
            f"posterior-bound study needs at least {MIN_STUDY_CONFIGS} configs, got {len(configs)}"
        )
    base = train_config or TrainConfig()
    logger.info(f"Posterior-bound study over {len(configs)} configs, d1={market.dim}")
    items = [(market, point, base, eval_paths) for point in configs]
    records = map_ordered(_study_point, items, jobs=jobs, kind=PoolKind.PROCESS)
    summary = summarize_bound_study(records)
    if summary.status == "ok":
        logger.info(
            f"Posterior-bound fit: correlation={summary.correlation:.3f}, "
            f"slope={summary.slope:.3f}"
        )
    else:
        logger.warning(f"Posterior-bound fit undefined: {summary.note}")
    return records, summary


def interval_distance(price: float, interval: tuple[float, float]) -> float:
    """Distance from price to [lo, hi]; zero inside."""
    lo, hi = interval
    return max(lo - price, 0.0, price - hi)


def count_inversions(values: list[float]) -> int:
    """Number of adjacent pairs where the sequence increases."""
    return sum(1 for a, b in zip(values, values[1:]) if b > a)


def _convergence_point(
    item: tuple[BlackScholesMarket, int, OptionStyle, int, TrainConfig],
) -> tuple[float, float]:
    market, n, style, exercise_dates, config = item
    problem = make_problem(market, PayoffKind.GEOMETRIC_PUT)
    schedule = (
        ExerciseSchedule.uniform(exercise_dates, market.maturity)
        if style == OptionStyle.BERMUDAN
        else None
    )
    partition = build_partition(n, market.maturity, schedule)
    _, report = train(problem, partition, config, style)
    return report.price, report.price_std_error


def run_convergence_study(
    market: BlackScholesMarket,
    ns: list[int],
    style: OptionStyle = OptionStyle.EUROPEAN,
    train_config: TrainConfig | None = None,
    exercise_dates: int = 10,
    interval: tuple[float, float] | None = None,
    jobs: int = 1,
) -> list[ConvergenceRow]:
    """
    One trained geometric-put run per n.

    European rows carry the relative error against the closed form; Bermudan
    rows carry the distance to the benchmark interval when one is given.

    Raises:
        ConfigError: If ``ns`` is empty or not sorted, or a Bermudan n is not a
            multiple of ``exercise_dates``
    """
    if not ns or list(ns) != sorted(ns):
        raise ConfigError(f"n list must be non-empty and sorted, got {ns}")
    if style == OptionStyle.BERMUDAN:
        misaligned = [n for n in ns if n % exercise_dates]
        if misaligned:
            raise ConfigError(
                f"N={exercise_dates} exercise periods must divide every n, got n={misaligned}"
            )
    config = train_config or TrainConfig()
    logger.info(f"Convergence study ({style.value}) over n={ns}, d1={market.dim}")
    items = [(market, n, style, exercise_dates, config) for n in ns]
    results = map_ordered(_convergence_point, items, jobs=jobs, kind=PoolKind.PROCESS)

    reference = geometric_put_closed_form(market) if style == OptionStyle.EUROPEAN else None
    rows = []
    for n, (price, std_err) in zip(ns, results):
        row = ConvergenceRow(n=n, price=price, std_err=std_err, reference=reference)
        if reference:
            row.rel_err = (price - reference) / reference
        if interval is not None:
            row.interval = interval
            row.interval_distance = interval_distance(price, interval)
        rows.append(row)
    return rows
