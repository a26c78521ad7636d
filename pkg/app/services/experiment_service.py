"""
Experiment orchestration: config loading, single runs and benchmark tables.
"""
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

from pydantic import ValidationError

from app.core.config import settings
from app.core.exceptions import BsdeError, ConfigError
from app.core.logging import get_logger
from app.models.grid import Partition
from app.models.market import BlackScholesMarket, ExerciseSchedule, OptionStyle, PayoffKind
from app.schemas.benchmark import BenchmarkFixture, BenchmarkRow, ReferenceKind
from app.schemas.experiment import RESULT_HEADER, ExperimentConfig, ResultRow
from app.schemas.study import ErrorRecord
from app.schemas.training import TrainingReport
from app.services.backward_scheme import evaluate, evaluate_batch, train
from app.services.error_lab import measure_y_z_errors
from app.services.file_storage_service import ResultStore
from app.services.market_models import (
    basket_call_mc_oracle,
    geometric_call_closed_form,
    geometric_put_closed_form,
    geometric_put_value_and_delta,
    make_problem,
    reduce_to_one_dim,
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

LOSS_HEADER = ["iteration", "loss"]
MEASURE_PATHS = 2**14


@dataclass(frozen=True)
class Tolerance:
    """Pass rule for one priced row."""
    rel_tol: Optional[float] = 0.01
    rel_band: Optional[tuple[float, float]] = None
    slack: float = 0.02


def _validation_message(error: ValidationError) -> str:
    first = error.errors()[0]
    field = ".".join(str(part) for part in first["loc"]) or "<root>"
    return f"invalid value for '{field}': {first['msg']}"


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict[str, Any], assignments: list[str]) -> dict[str, Any]:
    """
    Apply ``key=value`` overrides; dotted keys reach into nested blocks
    (``train.iterations=500``). Values are parsed as JSON when possible.

    Raises:
        ConfigError: If an assignment has no '='
    """
    result = json.loads(json.dumps(data))
    for assignment in assignments:
        key, sep, raw = assignment.partition("=")
        if not sep or not key:
            raise ConfigError(f"override '{assignment}' is not of the form key=value")
        target = result
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = target.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override '{key}': '{part}' is not a block")
            target = node
        target[parts[-1]] = _parse_value(raw.strip())
    return result


def build_config(data: dict[str, Any]) -> ExperimentConfig:
    """
    Validate a raw config mapping.

    Raises:
        ConfigError: Naming the first offending field
    """
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(_validation_message(e)) from e
    except BsdeError as e:
        raise ConfigError(str(e)) from e


def load_config(path: str | Path, overrides: Optional[list[str]] = None) -> ExperimentConfig:
    """
    Read and validate a JSON experiment config.

    Raises:
        ConfigError: On a missing file, a JSON syntax error (with line and
            column) or a validation error (naming the field)
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from e
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: line {e.lineno}, column {e.colno}: {e.msg}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    if overrides:
        data = apply_overrides(data, overrides)
    config = build_config(data)
    logger.info(f"Loaded config {path}: {config.payoff.value} {config.style.value}, d1={config.market.dim}")
    return config


def load_fixture(path: Optional[str | Path] = None) -> BenchmarkFixture:
    """Bundled benchmark tables."""
    path = Path(path) if path is not None else settings.benchmarks_path
    try:
        return BenchmarkFixture.model_validate_json(path.read_text())
    except OSError as e:
        raise ConfigError(f"cannot read benchmark fixture {path}: {e.strerror}") from e
    except ValidationError as e:
        raise ConfigError(f"{path}: {_validation_message(e)}") from e


def judge_price(
    price: float,
    reference: Optional[float],
    interval: Optional[tuple[float, float]],
    tolerance: Tolerance,
) -> tuple[str, bool]:
    """
    Flag and pass/fail for a priced row.

    Priced references give a signed relative error; intervals give
    inside/above/below and pass within the slack-widened interval; rows with
    neither are ``no-benchmark`` and pass.
    """
    if reference is not None and reference != 0.0:
        rel = (price - reference) / reference
        if tolerance.rel_band is not None:
            lo, hi = tolerance.rel_band
            passed = lo <= abs(rel) <= hi
        else:
            passed = abs(rel) <= (tolerance.rel_tol or 0.0)
        return f"{rel:+.4%}", passed
    if interval is not None:
        lo, hi = interval
        flag = "inside" if lo <= price <= hi else ("above" if price > hi else "below")
        passed = lo * (1.0 - tolerance.slack) <= price <= hi * (1.0 + tolerance.slack)
        return flag, passed
    return "no-benchmark", True


def _is_benchmark_market(market: BlackScholesMarket) -> bool:
    return market == BlackScholesMarket.uniform(market.dim)


def _reference(
    config: ExperimentConfig, market: BlackScholesMarket, interval: Optional[tuple[float, float]]
) -> tuple[Optional[float], Optional[tuple[float, float]]]:
    if config.style == OptionStyle.BERMUDAN:
        if interval is None and _is_benchmark_market(market):
            interval = load_fixture().find_interval(config.payoff, config.style, market.dim)
        return None, interval
    if config.payoff == PayoffKind.GEOMETRIC_PUT:
        return geometric_put_closed_form(market), None
    price, _ = basket_call_mc_oracle(market, config.oracle_samples, config.seed)
    return price, None


def config_partition(config: ExperimentConfig) -> Partition:
    """Grid of the configured run, with exercise nodes for Bermudan styles."""
    maturity = config.market.maturity
    schedule = (
        ExerciseSchedule.uniform(config.exercise_dates, maturity)
        if config.style == OptionStyle.BERMUDAN
        else None
    )
    return build_partition(config.n, maturity, schedule)


def _judged_row(
    config: ExperimentConfig,
    market: BlackScholesMarket,
    price: float,
    std_err: float,
    tolerance: Tolerance,
) -> ResultRow:
    reference, interval = _reference(config, market, config.interval)
    flag, passed = judge_price(price, reference, interval, tolerance)
    row = ResultRow(
        payoff=config.payoff,
        style=config.style,
        d1=market.dim,
        n=config.n,
        price=price,
        std_err=std_err,
        reference=reference,
        interval=interval,
        rel_err_or_interval_flag=flag,
        passed=passed,
        seed=config.seed,
    )
    level = "info" if passed else "warning"
    getattr(logger, level)(
        f"{config.payoff.value} {config.style.value} d1={market.dim} n={config.n}: "
        f"price={price:.4f} ({flag}) {'pass' if passed else 'fail'}"
    )
    return row


def price_configuration(
    config: ExperimentConfig,
    tolerance: Optional[Tolerance] = None,
    jobs: int = 1,
) -> tuple[ResultRow, TrainingReport, ControlStack]:
    """Train, evaluate and judge one configuration."""
    tolerance = tolerance or Tolerance(rel_tol=config.rel_tol, slack=config.interval_slack)
    market = config.market.to_market()
    problem = make_problem(market, config.payoff)
    partition = config_partition(config)
    controls, report = train(problem, partition, config.train, config.style, jobs=jobs)
    row = _judged_row(config, market, report.price, report.price_std_error, tolerance)
    return row, report, controls


def artifact_stem(config: ExperimentConfig) -> str:
    return f"{config.payoff.value}_{config.style.value}_d{config.market.dim}_n{config.n}_s{config.seed}"


def run_experiment(
    config: ExperimentConfig, store: Optional[ResultStore] = None, jobs: int = 1
) -> ResultRow:
    """
    Price one configuration and write its artifacts: TrainingReport JSON,
    loss CSV, one-row result CSV and the control checkpoint.
    """
    store = store or ResultStore(config.output_dir)
    logger.info(f"Starting experiment {artifact_stem(config)}")
    row, report, controls = price_configuration(config, jobs=jobs)

    resolved = config.resolved()
    stem = artifact_stem(config)
    store.save_json(
        f"{stem}_report.json",
        {"report": report.model_dump(mode="json"), "result": row.model_dump(mode="json")},
        resolved,
        config.seed,
    )
    store.save_csv(
        f"{stem}_loss.csv",
        LOSS_HEADER,
        ([i, repr(loss)] for i, loss in enumerate(report.loss_history)),
        resolved,
        config.seed,
    )
    store.save_csv(f"{stem}_result.csv", RESULT_HEADER, [row.csv_fields()], resolved, config.seed)
    store.save_checkpoint(f"{stem}_controls.json", controls)
    return row


def evaluate_checkpoint(
    config: ExperimentConfig,
    checkpoint: str | Path,
    store: Optional[ResultStore] = None,
    jobs: int = 1,
    paths_file: Optional[str | Path] = None,
    dump_paths: int = 0,
) -> tuple[ResultRow, Optional[ErrorRecord]]:
    """
    Price a saved control stack without training.

    The price comes from ``paths_file`` (a dump written by ``ResultStore.save_paths``)
    when given, otherwise from ``train.eval_paths`` fresh evaluation paths.
    European geometric puts are also measured against the analytic solution.
    ``dump_paths`` > 0 saves that many evaluation paths next to the report.

    Raises:
        ConfigError: If the checkpoint cannot be read or does not fit the config
    """
    store = store or ResultStore(config.output_dir)
    checkpoint = Path(checkpoint)
    if not checkpoint.is_file():
        raise ConfigError(f"checkpoint {checkpoint} does not exist")
    try:
        controls = ResultStore(checkpoint.parent).load_checkpoint(checkpoint.name)
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as e:
        raise ConfigError(f"cannot read checkpoint {checkpoint}: {e}") from e

    market = config.market.to_market()
    problem = make_problem(market, config.payoff)
    partition = config_partition(config)
    if len(controls) != partition.n or controls.dim_x != market.dim:
        raise ConfigError(
            f"checkpoint {checkpoint.name} holds {len(controls)} networks on d1={controls.dim_x}, "
            f"config needs n={partition.n} on d1={market.dim}"
        )

    eval_seed = derive_seed(config.seed, StreamDomain.EVALUATION)
    if paths_file is not None:
        paths_file = Path(paths_file)
        batch = ResultStore(paths_file.parent).load_paths(paths_file.name, partition)
        logger.info(f"Evaluating {checkpoint.name} on {batch.size} dumped paths from {paths_file}")
        price, std_err, _ = evaluate_batch(controls, problem, batch, config.style)
    else:
        price, std_err, _ = evaluate(
            controls, problem, partition, config.train.eval_paths, eval_seed, config.style, jobs
        )
    tolerance = Tolerance(rel_tol=config.rel_tol, slack=config.interval_slack)
    row = _judged_row(config, market, price, std_err, tolerance)

    record = None
    if config.payoff == PayoffKind.GEOMETRIC_PUT and config.style == OptionStyle.EUROPEAN:
        record = measure_y_z_errors(
            controls, market, partition, min(config.train.eval_paths, MEASURE_PATHS), eval_seed
        )

    resolved = {**config.resolved(), "checkpoint": str(checkpoint)}
    stem = artifact_stem(config)
    payload: dict[str, Any] = {"result": row.model_dump(mode="json")}
    if record is not None:
        payload["errors"] = record.model_dump(mode="json")
    store.save_json(f"{stem}_evaluation.json", payload, resolved, config.seed)
    if dump_paths > 0:
        batch = simulate_forward_batch(problem, partition, dump_paths, eval_seed)
        store.save_paths(f"{stem}_paths.bin", batch)
    return row, record


def table_configs(
    fixture: BenchmarkFixture, table_id: str, seed: int, overrides: Optional[list[str]] = None
) -> list[tuple[BenchmarkRow, ExperimentConfig]]:
    """One validated ExperimentConfig per fixture row."""
    if table_id not in fixture.tables:
        raise ConfigError(f"unknown table '{table_id}', available: {sorted(fixture.tables)}")
    out = []
    for bench in fixture.tables[table_id].rows:
        data: dict[str, Any] = {
            "payoff": bench.payoff.value,
            "style": bench.style.value,
            "market": {"dim": bench.d1},
            "n": bench.n,
            "exercise_dates": bench.exercise_dates,
            "seed": seed,
        }
        if bench.interval is not None:
            data["interval"] = list(bench.interval)
        out.append((bench, build_config(apply_overrides(data, overrides or []))))
    return out


def _table_row(item: tuple[BenchmarkRow, ExperimentConfig]) -> ResultRow:
    bench, config = item
    tolerance = Tolerance(rel_tol=bench.rel_tol, rel_band=bench.rel_band, slack=bench.slack)
    row, _, _ = price_configuration(config, tolerance)
    if bench.reference == ReferenceKind.NONE:
        row.rel_err_or_interval_flag = "no-benchmark"
        row.passed = True
    return row


def run_table(
    table_id: str,
    seed: int = 0,
    store: Optional[ResultStore] = None,
    jobs: int = 1,
    overrides: Optional[list[str]] = None,
    fixture: Optional[BenchmarkFixture] = None,
) -> list[ResultRow]:
    """
    Regenerate one benchmark table.

    Rows run in worker processes up to ``jobs``. A failing row is recorded
    with its error and a fail status; the remaining rows still run.
    """
    fixture = fixture or load_fixture()
    items = table_configs(fixture, table_id, seed, overrides)
    logger.info(f"Running table {table_id}: {len(items)} rows, seed={seed}, jobs={jobs}")
    outcomes = map_ordered(_table_row, items, jobs=jobs, kind=PoolKind.PROCESS, return_exceptions=True)

    rows: list[ResultRow] = []
    for (bench, config), outcome in zip(items, outcomes):
        if isinstance(outcome, Exception):
            logger.error(f"Table {table_id} row d1={bench.d1} n={bench.n} failed: {outcome}")
            outcome = ResultRow(
                payoff=bench.payoff,
                style=bench.style,
                d1=bench.d1,
                n=bench.n,
                interval=bench.interval,
                rel_err_or_interval_flag="error",
                passed=False,
                error=str(outcome),
                seed=seed,
            )
        rows.append(outcome)

    store = store or ResultStore()
    resolved = {
        "table": table_id,
        "title": fixture.tables[table_id].title,
        "rows": [config.resolved() for _, config in items],
    }
    store.save_csv(f"table{table_id}.csv", RESULT_HEADER, (r.csv_fields() for r in rows), resolved, seed)
    store.save_json(
        f"table{table_id}.json", {"rows": [r.model_dump(mode="json") for r in rows]}, resolved, seed
    )
    passed = sum(r.passed for r in rows)
    logger.info(f"Table {table_id}: {passed}/{len(rows)} rows pass")
    return rows


def analytic_summary(config: ExperimentConfig) -> dict[str, Any]:
    """Closed-form values for the configured market, no training."""
    market = config.market.to_market()
    out: dict[str, Any] = {"d1": market.dim, "payoff": config.payoff.value}
    if config.payoff == PayoffKind.GEOMETRIC_PUT:
        reduction = reduce_to_one_dim(market)
        _, delta = geometric_put_value_and_delta(market, 0.0, reduction.s_hat0)
        out.update(
            put=geometric_put_closed_form(market),
            call=geometric_call_closed_form(market),
            delta=delta,
            mu_hat=reduction.mu_hat,
            sigma_hat=reduction.sigma_hat,
            s_hat0=reduction.s_hat0,
        )
    else:
        price, std_err = basket_call_mc_oracle(market, config.oracle_samples, config.seed)
        out.update(price=price, std_err=std_err, samples=config.oracle_samples)
    return out
