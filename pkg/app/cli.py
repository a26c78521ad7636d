"""
Command-line entry point.

Exit codes: 0 when every requested row passes its tolerance, 1 when any row
fails, 2 on configuration or solver errors.
"""
import argparse
import json
import sys
from typing import Any, Optional

from app.core.config import settings
from app.core.exceptions import BsdeError, ConfigError
from app.core.logging import get_logger, setup_logging
from app.models.market import OptionStyle
from app.schemas.experiment import RESULT_HEADER, ExperimentConfig
from app.schemas.study import ERROR_RECORD_HEADER, StudyConfig
from app.services.error_lab import (
    count_inversions,
    run_convergence_study,
    run_posterior_bound_study,
)
from app.services.experiment_service import (
    analytic_summary,
    apply_overrides,
    build_config,
    evaluate_checkpoint,
    load_config,
    load_fixture,
    run_experiment,
    run_table,
)
from app.services.file_storage_service import ResultStore

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_TOLERANCE = 1
EXIT_ERROR = 2

CONVERGENCE_NS = [2, 5, 10, 20, 50, 100, 150, 200]
# Multiples of the default 10 exercise periods
BERMUDAN_CONVERGENCE_NS = [10, 20, 50, 100, 150, 200]
STUDY_NS = [5, 10, 25, 50, 100, 200]
MIN_BOUND_CORRELATION = 0.8

EPILOG = f"""\
output files (CSV files start with a '# {{json}}' line holding the resolved config and seed):
  result / table CSV:  {",".join(RESULT_HEADER)}
  loss CSV:            iteration,loss
  posterior-bound CSV: {",".join(ERROR_RECORD_HEADER)}
  convergence CSV:     n,price,std_err,reference,rel_err,interval_distance
JSON reports carry schema_version={settings.REPORT_SCHEMA_VERSION}.

config defaults: payoff=geometric_put style=european n=100 exercise_dates=10
  market: dim=1 rate=0.02 dividend=0 vol=0.2 rho=0 spot=100 strike=100 maturity=1
  train: iterations=4000 learning_rate=1e-3 batch_size=256 (european) / 4096 (bermudan)
         eval_paths=131072 plateau_window=200 plateau_tol=1e-6
environment: BSDE_OUTPUT_DIR sets the default output directory ({settings.OUTPUT_DIR}).
"""


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--seed", type=int, help="Run seed")
    common.add_argument("--out", help="Output directory")
    common.add_argument("--n", type=int, help="Time steps")
    common.add_argument("--dim", type=int, help="Number of assets d1")
    common.add_argument("--style", choices=[s.value for s in OptionStyle])
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Override any config key, dotted for nested blocks (train.iterations=500)",
    )
    common.add_argument("--jobs", type=int, default=settings.DEFAULT_JOBS, help="Parallel workers")
    common.add_argument("--verbose", action="store_true", help="Debug logging")

    parser = argparse.ArgumentParser(
        prog="bsde",
        description="Backward deep BSDE pricer for European and Bermudan basket options.",
        epilog=EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("price", parents=[common], help="Train and price one configuration")
    table = sub.add_parser("table", parents=[common], help="Regenerate a benchmark table")
    table.add_argument("table_id", choices=["1", "2", "3"])
    conv = sub.add_parser("convergence", parents=[common], help="Price over a list of n")
    conv.add_argument(
        "--ns",
        type=int,
        nargs="+",
        help=f"Step counts (default {CONVERGENCE_NS}, bermudan {BERMUDAN_CONVERGENCE_NS})",
    )
    bound = sub.add_parser("posterior-bound", parents=[common], help="Error vs h + Var(Y_0) study")
    bound.add_argument("--ns", type=int, nargs="+", default=STUDY_NS)
    bound.add_argument("--eval-paths", type=int, default=2**14)
    sub.add_parser("analytic", parents=[common], help="Closed-form values only, no training")
    evaluation = sub.add_parser(
        "evaluate", parents=[common], help="Price a saved control checkpoint without training"
    )
    evaluation.add_argument("--checkpoint", required=True, help="Controls JSON written by price")
    evaluation.add_argument("--paths", help="Evaluate on a path dump instead of fresh paths")
    evaluation.add_argument(
        "--dump-paths", type=int, default=0, metavar="M", help="Also save M evaluation paths"
    )
    return parser


def resolve_config(args: argparse.Namespace, default_dim: int = 1) -> ExperimentConfig:
    """Config file (or defaults), then explicit flags, then --set overrides."""
    assignments = []
    if args.dim is not None:
        assignments.append(f"market.dim={args.dim}")
    if args.n is not None:
        assignments.append(f"n={args.n}")
    if args.style is not None:
        assignments.append(f"style={args.style}")
    if args.seed is not None:
        assignments.append(f"seed={args.seed}")
    if args.out is not None:
        assignments.append(f"output_dir={json.dumps(args.out)}")
    assignments.extend(args.overrides)
    if args.config:
        return load_config(args.config, assignments)
    return build_config(apply_overrides({"market": {"dim": default_dim}}, assignments))


def _store(config: ExperimentConfig) -> ResultStore:
    return ResultStore(config.output_dir)


def cmd_price(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    row = run_experiment(config, _store(config), jobs=args.jobs)
    print(",".join(str(v) for v in row.csv_fields()))
    return EXIT_OK if row.passed else EXIT_TOLERANCE


def cmd_table(args: argparse.Namespace) -> int:
    fixed = {"--config": args.config, "--n": args.n, "--dim": args.dim, "--style": args.style}
    rejected = [flag for flag, value in fixed.items() if value is not None]
    if rejected:
        raise ConfigError(
            f"table rows fix their own grid and market, "
            f"{', '.join(rejected)} not allowed (use --set)"
        )
    fixture = load_fixture()
    rows = run_table(
        args.table_id,
        seed=args.seed or 0,
        store=ResultStore(args.out),
        jobs=args.jobs,
        overrides=args.overrides,
        fixture=fixture,
    )
    for row in rows:
        print(",".join(str(v) for v in row.csv_fields()))
    return EXIT_OK if all(r.passed for r in rows) else EXIT_TOLERANCE


def cmd_convergence(args: argparse.Namespace) -> int:
    config = resolve_config(args, default_dim=20)
    interval = config.interval
    if config.style == OptionStyle.BERMUDAN and interval is None:
        interval = load_fixture().find_interval(config.payoff, config.style, config.market.dim)
    ns = args.ns or (
        BERMUDAN_CONVERGENCE_NS if config.style == OptionStyle.BERMUDAN else CONVERGENCE_NS
    )
    rows = run_convergence_study(
        config.market.to_market(),
        ns,
        style=config.style,
        train_config=config.train,
        exercise_dates=config.exercise_dates,
        interval=interval,
        jobs=args.jobs,
    )
    resolved: dict[str, Any] = {**config.resolved(), "ns": ns}
    _store(config).save_csv(
        f"convergence_{config.style.value}_d{config.market.dim}.csv",
        ["n", "price", "std_err", "reference", "rel_err", "interval_distance"],
        (
            [r.n, r.price, r.std_err, r.reference, r.rel_err, r.interval_distance]
            for r in rows
        ),
        resolved,
        config.seed,
    )
    for r in rows:
        print(f"{r.n},{r.price:.6f},{r.std_err:.6f},{r.rel_err},{r.interval_distance}")
    if config.style == OptionStyle.EUROPEAN:
        errors = [abs(r.rel_err or 0.0) for r in rows]
        return EXIT_OK if count_inversions(errors) <= 1 else EXIT_TOLERANCE
    distances = [r.interval_distance or 0.0 for r in rows]
    return EXIT_OK if count_inversions(distances) <= 1 else EXIT_TOLERANCE


def cmd_posterior_bound(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    points = [
        StudyConfig(n=n, iterations=config.train.iterations, seed=config.seed) for n in args.ns
    ]
    records, summary = run_posterior_bound_study(
        config.market.to_market(),
        points,
        train_config=config.train,
        eval_paths=args.eval_paths,
        jobs=args.jobs,
    )
    store = _store(config)
    resolved: dict[str, Any] = {**config.resolved(), "ns": args.ns}
    store.save_csv(
        f"posterior_bound_d{config.market.dim}.csv",
        ERROR_RECORD_HEADER,
        (r.csv_fields() for r in records),
        resolved,
        config.seed,
    )
    store.save_json(
        f"posterior_bound_d{config.market.dim}.json",
        {"summary": summary.model_dump(mode="json")},
        resolved,
        config.seed,
    )
    print(summary.model_dump_json())
    if summary.status != "ok" or (summary.correlation or 0.0) < MIN_BOUND_CORRELATION:
        return EXIT_TOLERANCE
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    row, record = evaluate_checkpoint(
        config,
        args.checkpoint,
        _store(config),
        jobs=args.jobs,
        paths_file=args.paths,
        dump_paths=args.dump_paths,
    )
    print(",".join(str(v) for v in row.csv_fields()))
    if record is not None:
        print(
            f"y_err_sq={record.y_err_sq:.6e} z_err_sq={record.z_err_sq:.6e} "
            f"var_y0={record.var_y0:.6e}"
        )
    return EXIT_OK if row.passed else EXIT_TOLERANCE


def cmd_analytic(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    print(json.dumps(analytic_summary(config), indent=2))
    return EXIT_OK


COMMANDS = {
    "price": cmd_price,
    "table": cmd_table,
    "convergence": cmd_convergence,
    "posterior-bound": cmd_posterior_bound,
    "analytic": cmd_analytic,
    "evaluate": cmd_evaluate,
}


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging("DEBUG" if args.verbose else None)
    try:
        return COMMANDS[args.command](args)
    except BsdeError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
