"""Pydantic schemas for configuration and reports."""

from app.schemas.benchmark import BenchmarkFixture, BenchmarkRow, BenchmarkTable, ReferenceKind
from app.schemas.experiment import ExperimentConfig, MarketConfig, ResultRow
from app.schemas.study import ConvergenceRow, ErrorRecord, StudyConfig, StudySummary
from app.schemas.training import TrainConfig, TrainingReport

__all__ = [
    "BenchmarkFixture",
    "BenchmarkRow",
    "BenchmarkTable",
    "ConvergenceRow",
    "ErrorRecord",
    "ExperimentConfig",
    "MarketConfig",
    "ReferenceKind",
    "ResultRow",
    "StudyConfig",
    "StudySummary",
    "TrainConfig",
    "TrainingReport",
]
