"""
Tests for config loading, experiment runs, benchmark tables and result storage.
"""
import json
from pathlib import Path

import numpy as np
import pytest

from app.core.exceptions import ConfigError, ShapeError, TrainingAborted
from app.models.market import OptionStyle, PayoffKind
from app.schemas.benchmark import BenchmarkFixture
from app.schemas.experiment import RESULT_HEADER
from app.services import experiment_service
from app.services.experiment_service import (
    Tolerance,
    analytic_summary,
    apply_overrides,
    build_config,
    judge_price,
    load_config,
    load_fixture,
    run_experiment,
    run_table,
)
from app.services.file_storage_service import read_csv_metadata
from app.services.mlp import ControlStack
from app.services.path_engine import build_partition, simulate_forward_batch

CONFIG_DIR = Path(__file__).parent.parent / "config"
TINY = ["train.iterations=2", "train.batch_size=16", "train.eval_paths=256"]


def _write(tmp_path: Path, payload: str) -> Path:
    path = tmp_path / "config.json"
    path.write_text(payload)
    return path


class TestLoadConfig:
    def test_table_fixture_fills_defaults(self) -> None:
        config = load_config(CONFIG_DIR / "table1_d1_european.json")
        assert config.n == 100
        assert config.exercise_dates == 10
        assert config.market.dim == 1
        assert config.resolved()["train"]["batch_size"] == 256

    def test_bermudan_fixture(self) -> None:
        config = load_config(CONFIG_DIR / "table1_d1_bermudan.json")
        assert config.style == OptionStyle.BERMUDAN
        assert config.resolved()["train"]["batch_size"] == 4096

    def test_indivisible_grid_is_rejected(self, tmp_path: Path) -> None:
        path = _write(tmp_path, '{"style": "bermudan", "n": 15, "exercise_dates": 10}')
        with pytest.raises(ConfigError, match="n=15"):
            load_config(path)

    def test_unknown_key_is_named(self, tmp_path: Path) -> None:
        path = _write(tmp_path, '{"market": {"dim": 1, "stirke": 100}}')
        with pytest.raises(ConfigError, match="market.stirke"):
            load_config(path)

    def test_syntax_error_reports_position(self, tmp_path: Path) -> None:
        path = _write(tmp_path, '{\n  "n": 10,\n  "seed": }\n')
        with pytest.raises(ConfigError, match="line 3, column"):
            load_config(path)

    def test_missing_file(self, tmp_path: Path) -> None:
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.json")

    def test_overrides_reach_nested_blocks(self, tmp_path: Path) -> None:
        path = _write(tmp_path, '{"market": {"dim": 2}}')
        config = load_config(path, ["train.iterations=7", "market.vol=[0.1, 0.3]", "seed=4"])
        assert config.train.iterations == 7
        assert config.train.seed == 4
        assert config.market.to_market().vols == (0.1, 0.3)

    def test_malformed_override(self) -> None:
        with pytest.raises(ConfigError):
            apply_overrides({}, ["train.iterations"])

    def test_per_asset_length_is_checked(self) -> None:
        with pytest.raises(ConfigError, match="market"):
            build_config({"market": {"dim": 3, "spot": [100.0, 90.0]}})


class TestJudge:
    def test_relative_tolerance(self) -> None:
        assert judge_price(6.95, 6.9359, None, Tolerance(rel_tol=0.01)) == ("+0.2033%", True)
        assert not judge_price(7.1, 6.9359, None, Tolerance(rel_tol=0.01))[1]

    def test_relative_band(self) -> None:
        band = Tolerance(rel_tol=None, rel_band=(0.015, 0.035))
        assert judge_price(1.7406, 1.7009, None, band)[1]
        assert not judge_price(1.7010, 1.7009, None, band)[1]

    def test_interval_with_slack(self) -> None:
        assert judge_price(7.0, None, (6.92, 7.08), Tolerance()) == ("inside", True)
        assert judge_price(7.12, None, (6.92, 7.08), Tolerance()) == ("above", True)
        assert judge_price(7.3, None, (6.92, 7.08), Tolerance()) == ("above", False)
        assert judge_price(6.5, None, (6.92, 7.08), Tolerance()) == ("below", False)

    def test_no_benchmark_passes(self) -> None:
        assert judge_price(1.1, None, None, Tolerance()) == ("no-benchmark", True)


class TestFixture:
    def test_bundled_tables(self) -> None:
        fixture = load_fixture()
        assert [len(fixture.tables[t].rows) for t in ("1", "2", "3")] == [10, 14, 8]
        assert all(row.source for table in fixture.tables.values() for row in table.rows)

    def test_interval_lookup(self) -> None:
        fixture = load_fixture()
        interval = fixture.find_interval(PayoffKind.GEOMETRIC_PUT, OptionStyle.BERMUDAN, 1)
        assert interval == (6.92, 7.08)
        assert fixture.find_interval(PayoffKind.BASKET_CALL, OptionStyle.BERMUDAN, 20) is None


def test_analytic_summary() -> None:
    summary = analytic_summary(build_config({"market": {"dim": 5}}))
    assert summary["put"] == pytest.approx(3.3105, abs=5e-4)
    assert summary["delta"] < 0.0


def test_run_experiment_writes_artifacts(store) -> None:
    config = build_config(apply_overrides({"n": 2, "seed": 3, "rel_tol": 1.0}, TINY))
    row = run_experiment(config, store)
    assert row.passed
    assert row.reference == pytest.approx(6.9359, abs=5e-4)

    stem = "geometric_put_european_d1_n2_s3"
    report = store.load_json(f"{stem}_report.json")
    assert report is not None
    assert report["seed"] == 3
    assert report["schema_version"] == 1
    assert report["config"]["train"]["batch_size"] == 16
    assert len(report["report"]["loss_history"]) == 2

    result_csv = store.path_for(f"{stem}_result.csv")
    assert read_csv_metadata(result_csv)["config"]["n"] == 2
    lines = result_csv.read_text().splitlines()
    assert lines[1] == ",".join(RESULT_HEADER)
    assert lines[2].startswith("geometric_put,european,1,2,")

    restored = store.load_checkpoint(f"{stem}_controls.json")
    assert len(restored) == 2


def test_bermudan_experiment_reports_interval(store) -> None:
    config = build_config(
        apply_overrides({"style": "bermudan", "n": 10, "exercise_dates": 10}, TINY)
    )
    row = run_experiment(config, store)
    assert row.interval == (6.92, 7.08)
    assert row.reference is None
    assert row.rel_err_or_interval_flag in {"inside", "above", "below"}


def _small_fixture() -> BenchmarkFixture:
    return BenchmarkFixture.model_validate(
        {
            "tables": {
                "9": {
                    "title": "small",
                    "rows": [
                        {"payoff": "geometric_put", "style": "european", "d1": 1, "n": 2,
                         "reference": "closed_form", "rel_tol": 1.0, "source": "test"},
                        {"payoff": "geometric_put", "style": "european", "d1": 2, "n": 2,
                         "reference": "closed_form", "rel_tol": 1.0, "source": "test"},
                        {"payoff": "geometric_put", "style": "bermudan", "d1": 1, "n": 2,
                         "exercise_dates": 2, "reference": "interval", "interval": [50.0, 60.0],
                         "source": "test"},
                        {"payoff": "geometric_put", "style": "bermudan", "d1": 50, "n": 2,
                         "exercise_dates": 2, "reference": "none", "source": "test"},
                    ],
                }
            }
        }
    )


def test_run_table_records_partial_failures(store, monkeypatch: pytest.MonkeyPatch) -> None:
    real_train = experiment_service.train

    def flaky_train(problem, partition, config, style, jobs=1):
        if problem.dim_x == 2:
            raise TrainingAborted(0, "loss")
        return real_train(problem, partition, config, style, jobs=jobs)

    monkeypatch.setattr(experiment_service, "train", flaky_train)
    rows = run_table("9", seed=1, store=store, overrides=TINY, fixture=_small_fixture())

    assert [r.d1 for r in rows] == [1, 2, 1, 50]
    assert rows[0].passed
    assert not rows[1].passed and "non-finite loss" in (rows[1].error or "")
    assert rows[1].rel_err_or_interval_flag == "error"
    assert not rows[2].passed and rows[2].rel_err_or_interval_flag == "below"
    assert rows[3].passed and rows[3].rel_err_or_interval_flag == "no-benchmark"

    table_csv = store.path_for("table9.csv")
    meta = read_csv_metadata(table_csv)
    assert meta["seed"] == 1
    assert len(meta["config"]["rows"]) == 4
    assert len(table_csv.read_text().splitlines()) == 2 + 4


def test_unknown_table() -> None:
    with pytest.raises(ConfigError):
        run_table("7", fixture=_small_fixture())


class TestResultStore:
    def test_path_dump_roundtrip(self, store, put3) -> None:
        grid = build_partition(3, 1.0)
        batch = simulate_forward_batch(put3, grid, 5, seed=12)
        store.save_paths("paths.bin", batch)
        raw = store.path_for("paths.bin").read_bytes()
        assert np.frombuffer(raw[:32], dtype="<i8").tolist() == [5, 3, 3, 12]
        loaded = store.load_paths("paths.bin", grid)
        np.testing.assert_array_equal(loaded.states, batch.states)
        np.testing.assert_array_equal(loaded.increments, batch.increments)
        with pytest.raises(ShapeError):
            store.load_paths("paths.bin", build_partition(4, 1.0))

    def test_checkpoint(self, store, tiny_controls: ControlStack) -> None:
        store.save_checkpoint("controls.json", tiny_controls)
        payload = json.loads(store.path_for("controls.json").read_text())
        assert payload["layer_sizes"] == [3, 5, 4, 3]
        restored = store.load_checkpoint("controls.json")
        np.testing.assert_array_equal(restored.params[2].weights[1], tiny_controls.params[2].weights[1])

    def test_names_cannot_escape(self, store) -> None:
        assert store.path_for("../../etc/x.json").parent == store.base_path

    def test_missing_report(self, store) -> None:
        assert store.load_json("absent.json") is None
