"""Domain models."""

from app.models.grid import PathBatch, Partition
from app.models.market import (
    BlackScholesMarket,
    ExerciseSchedule,
    FbsdeProblem,
    OneDimReduction,
    OptionStyle,
    PayoffKind,
)

__all__ = [
    "BlackScholesMarket",
    "ExerciseSchedule",
    "FbsdeProblem",
    "OneDimReduction",
    "OptionStyle",
    "PathBatch",
    "Partition",
    "PayoffKind",
]
