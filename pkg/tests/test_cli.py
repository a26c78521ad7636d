"""
Tests for the bsde command line.
"""
import json
from pathlib import Path

import pytest

import app.cli as cli
from app.cli import (
    BERMUDAN_CONVERGENCE_NS,
    CONVERGENCE_NS,
    EXIT_ERROR,
    EXIT_OK,
    EXIT_TOLERANCE,
    build_parser,
    main,
    resolve_config,
)
from app.schemas.study import ConvergenceRow
from app.schemas.experiment import RESULT_HEADER
from app.services.file_storage_service import read_csv_metadata

TINY = ["--set", "train.iterations=2", "--set", "train.batch_size=16", "--set", "train.eval_paths=256"]


def test_help_documents_output_schema(capsys: pytest.CaptureFixture[str]) -> None:
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    assert ",".join(RESULT_HEADER) in out
    assert "BSDE_OUTPUT_DIR" in out


def test_analytic_prints_closed_form(capsys: pytest.CaptureFixture[str]) -> None:
    assert main(["analytic"]) == EXIT_OK
    summary = json.loads(capsys.readouterr().out)
    assert summary["put"] == pytest.approx(6.9359, abs=5e-4)
    assert summary["d1"] == 1


def test_analytic_reads_config_file(capsys: pytest.CaptureFixture[str]) -> None:
    config = Path(__file__).parent.parent / "config" / "table1_d1_european.json"
    assert main(["analytic", "--config", str(config), "--dim", "5"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["put"] == pytest.approx(3.3105, abs=5e-4)


def test_flags_then_overrides() -> None:
    args = build_parser().parse_args(
        ["price", "--dim", "3", "--n", "20", "--seed", "9", "--set", "n=40"]
    )
    config = resolve_config(args)
    assert config.market.dim == 3
    assert config.n == 40
    assert config.train.seed == 9


def test_invalid_config_exits_with_error(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    path = tmp_path / "bad.json"
    path.write_text('{"style": "bermudan", "n": 15, "exercise_dates": 10}')
    assert main(["price", "--config", str(path)]) == EXIT_ERROR
    assert "n=15" in capsys.readouterr().err


def test_unknown_override_key_exits_with_error(capsys: pytest.CaptureFixture[str]) -> None:
    assert main(["analytic", "--set", "market.stirke=90"]) == EXIT_ERROR
    assert "market.stirke" in capsys.readouterr().err


def test_price_writes_artifacts(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    out_dir = tmp_path / "out"
    code = main(["price", "--n", "2", "--seed", "5", "--out", str(out_dir), "--set", "rel_tol=1.0", *TINY])
    assert code == EXIT_OK
    stem = "geometric_put_european_d1_n2_s5"
    for suffix in ("_report.json", "_loss.csv", "_result.csv", "_controls.json"):
        assert (out_dir / f"{stem}{suffix}").exists()
    assert read_csv_metadata(out_dir / f"{stem}_loss.csv")["seed"] == 5
    assert capsys.readouterr().out.startswith("geometric_put,european,1,2,")


def test_price_outside_tolerance_exits_one(tmp_path: Path) -> None:
    code = main(
        ["price", "--style", "bermudan", "--n", "2", "--out", str(tmp_path),
         "--set", "exercise_dates=2", "--set", "interval=[50.0, 60.0]", *TINY]
    )
    assert code == EXIT_TOLERANCE


def test_unknown_table_is_rejected_by_parser() -> None:
    with pytest.raises(SystemExit) as exc:
        main(["table", "4"])
    assert exc.value.code == 2


@pytest.mark.parametrize("flag", [["--n", "20"], ["--dim", "5"], ["--style", "bermudan"]])
def test_table_rejects_grid_flags(flag: list[str], capsys: pytest.CaptureFixture[str]) -> None:
    assert main(["table", "1", *flag]) == EXIT_ERROR
    assert flag[0] in capsys.readouterr().err


def test_table_rejects_config_file(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    path = tmp_path / "run.json"
    path.write_text("{}")
    assert main(["table", "2", "--config", str(path)]) == EXIT_ERROR
    assert "--config" in capsys.readouterr().err


class TestConvergenceDefaults:
    @staticmethod
    def _capture(monkeypatch: pytest.MonkeyPatch) -> dict:
        seen: dict = {}

        def fake_study(market, ns, **kwargs):
            seen["ns"] = list(ns)
            seen["exercise_dates"] = kwargs["exercise_dates"]
            return [ConvergenceRow(n=n, price=1.65, std_err=0.01) for n in ns]

        monkeypatch.setattr(cli, "run_convergence_study", fake_study)
        return seen

    def test_bermudan_default_ns_align_with_exercise_dates(
        self, monkeypatch: pytest.MonkeyPatch, tmp_path: Path
    ) -> None:
        seen = self._capture(monkeypatch)
        assert main(["convergence", "--style", "bermudan", "--out", str(tmp_path)]) == EXIT_OK
        assert seen["ns"] == BERMUDAN_CONVERGENCE_NS
        assert all(n % seen["exercise_dates"] == 0 for n in seen["ns"])

    def test_european_default_ns(self, monkeypatch: pytest.MonkeyPatch, tmp_path: Path) -> None:
        seen = self._capture(monkeypatch)
        main(["convergence", "--out", str(tmp_path)])
        assert seen["ns"] == CONVERGENCE_NS

    def test_explicit_ns_win(self, monkeypatch: pytest.MonkeyPatch, tmp_path: Path) -> None:
        seen = self._capture(monkeypatch)
        main(["convergence", "--style", "bermudan", "--ns", "20", "40", "--out", str(tmp_path)])
        assert seen["ns"] == [20, 40]


def test_bermudan_convergence_with_misaligned_n_exits_with_error(
    tmp_path: Path, capsys: pytest.CaptureFixture[str]
) -> None:
    code = main(["convergence", "--style", "bermudan", "--ns", "5", "10", "--out", str(tmp_path), *TINY])
    assert code == EXIT_ERROR
    assert "n=[5]" in capsys.readouterr().err


class TestEvaluate:
    STEM = "geometric_put_european_d1_n2_s5"
    RUN = ["--n", "2", "--seed", "5", "--set", "rel_tol=100.0", *TINY]

    @pytest.fixture
    def out_dir(self, tmp_path: Path) -> Path:
        out_dir = tmp_path / "out"
        assert main(["price", "--out", str(out_dir), *self.RUN]) == EXIT_OK
        return out_dir

    def test_checkpoint_is_priced_without_training(
        self, out_dir: Path, monkeypatch: pytest.MonkeyPatch, capsys: pytest.CaptureFixture[str]
    ) -> None:
        def no_training(*args, **kwargs):
            raise AssertionError("evaluate must not train")

        monkeypatch.setattr("app.services.experiment_service.train", no_training)
        checkpoint = out_dir / f"{self.STEM}_controls.json"
        capsys.readouterr()
        code = main(["evaluate", "--checkpoint", str(checkpoint), "--out", str(out_dir), *self.RUN])
        assert code == EXIT_OK
        out = capsys.readouterr().out
        assert out.startswith("geometric_put,european,1,2,")
        assert "y_err_sq=" in out
        report = json.loads((out_dir / f"{self.STEM}_evaluation.json").read_text())
        assert report["config"]["checkpoint"] == str(checkpoint)
        assert report["errors"]["n"] == 2

    def test_dumped_paths_are_reloaded(self, out_dir: Path) -> None:
        checkpoint = str(out_dir / f"{self.STEM}_controls.json")
        code = main(
            ["evaluate", "--checkpoint", checkpoint, "--out", str(out_dir), "--dump-paths", "8", *self.RUN]
        )
        assert code == EXIT_OK
        dump = out_dir / f"{self.STEM}_paths.bin"
        assert dump.stat().st_size == 8 * 4 + 8 * 8 * (3 + 2)
        code = main(["evaluate", "--checkpoint", checkpoint, "--paths", str(dump), *self.RUN, "--out", str(out_dir)])
        assert code == EXIT_OK
        report = json.loads((out_dir / f"{self.STEM}_evaluation.json").read_text())
        assert report["result"]["price"] is not None

    def test_checkpoint_for_another_grid_exits_with_error(
        self, out_dir: Path, capsys: pytest.CaptureFixture[str]
    ) -> None:
        checkpoint = str(out_dir / f"{self.STEM}_controls.json")
        code = main(["evaluate", "--checkpoint", checkpoint, "--n", "4", "--out", str(out_dir), *TINY])
        assert code == EXIT_ERROR
        assert "n=4" in capsys.readouterr().err

    def test_missing_checkpoint_exits_with_error(self, tmp_path: Path) -> None:
        missing = str(tmp_path / "nowhere" / "controls.json")
        assert main(["evaluate", "--checkpoint", missing, "--out", str(tmp_path)]) == EXIT_ERROR
        assert not (tmp_path / "nowhere").exists()
