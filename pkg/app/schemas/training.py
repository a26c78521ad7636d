"""
Training schemas: optimiser/loop configuration and the report a run produces.
"""
import math
from typing import Any, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator

from app.models.market import OptionStyle

EUROPEAN_BATCH = 256
BERMUDAN_BATCH = 4096


def default_batch(style: OptionStyle) -> int:
    """Paths per iteration used for each exercise style."""
    return BERMUDAN_BATCH if style == OptionStyle.BERMUDAN else EUROPEAN_BATCH


class TrainConfig(BaseModel):
    """Stochastic-gradient loop settings."""

    model_config = ConfigDict(extra="forbid")

    batch_size: Optional[int] = Field(default=None, ge=2, description="Paths per iteration")
    iterations: int = Field(default=4000, ge=1)
    learning_rate: float = Field(default=1e-3, gt=0.0)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    epsilon: float = Field(default=1e-8, gt=0.0)
    seed: int = Field(default=0, ge=0)
    eval_paths: int = Field(default=2**17, ge=2)
    plateau_window: int = Field(default=200, ge=1)
    plateau_tol: Optional[float] = Field(default=1e-6, ge=0.0)
    resample_paths: bool = True
    constant_controls: bool = False
    grad_shards: int = Field(default=1, ge=1)
    log_every: int = Field(default=100, ge=1)

    def resolved_batch(self, style: OptionStyle) -> int:
        return self.batch_size if self.batch_size is not None else default_batch(style)


class TrainingReport(BaseModel):
    """Outcome of one training run plus evaluation."""

    schema_version: int = 1
    style: OptionStyle
    loss_history: list[float]
    price: float
    price_std_error: float = Field(ge=0.0)
    final_variance: float = Field(ge=0.0)
    iterations_run: int
    stopped_early: bool = False
    wall_time: float = Field(ge=0.0)
    seed: int
    config: dict[str, Any] = Field(default_factory=dict)

    @field_validator("loss_history", mode="after")
    @classmethod
    def validate_losses(cls, v: list[float]) -> list[float]:
        """Losses are variances, so non-negative."""
        if any(loss < 0 for loss in v):
            raise ValueError("loss history contains negative variances")
        return v

    @field_validator("price", mode="after")
    @classmethod
    def validate_price(cls, v: float) -> float:
        if not math.isfinite(v):
            raise ValueError("price must be finite")
        return v
