"""
Error-study schemas.
"""
from typing import Optional

from pydantic import BaseModel, Field, model_validator

ERROR_RECORD_HEADER = ["n", "h", "var_y0", "y_err_sq", "z_err_sq", "price", "analytic", "rel_err", "seed"]


class ErrorRecord(BaseModel):
    """Measured Y/Z errors of one trained control stack against the analytic solution."""

    n: int = Field(ge=1)
    h: float = Field(gt=0.0)
    var_y0: float = Field(ge=0.0)
    y_err_sq: float = Field(ge=0.0)
    z_err_sq: float = Field(ge=0.0)
    price: float
    analytic: float
    rel_err: float
    seed: int
    y_err_profile: list[float] = Field(default_factory=list)
    z_err_profile: list[float] = Field(default_factory=list)
    iterations: Optional[int] = None

    @model_validator(mode="after")
    def validate_grid(self) -> "ErrorRecord":
        """Per-step profiles cover every step when present."""
        if self.z_err_profile and len(self.z_err_profile) != self.n:
            raise ValueError(f"z profile has {len(self.z_err_profile)} steps, expected {self.n}")
        return self

    @property
    def bound_proxy(self) -> float:
        """h + Var(Y_0)."""
        return self.h + self.var_y0

    @property
    def total_error(self) -> float:
        return self.y_err_sq + self.z_err_sq

    def csv_fields(self) -> list[str]:
        return [
            str(self.n),
            repr(self.h),
            repr(self.var_y0),
            repr(self.y_err_sq),
            repr(self.z_err_sq),
            repr(self.price),
            repr(self.analytic),
            repr(self.rel_err),
            str(self.seed),
        ]


class StudyConfig(BaseModel):
    """One point of the posterior-bound study."""

    n: int = Field(ge=1)
    iterations: int = Field(ge=1)
    seed: int = Field(default=0, ge=0)


class StudySummary(BaseModel):
    """Log-log fit of total error against h + Var(Y_0)."""

    status: str
    correlation: Optional[float] = None
    slope: Optional[float] = None
    intercept: Optional[float] = None
    points: list[tuple[float, float]] = Field(default_factory=list)
    note: str = ""


class ConvergenceRow(BaseModel):
    """One n of the convergence-in-n study."""

    n: int
    price: float
    std_err: float
    reference: Optional[float] = None
    interval: Optional[tuple[float, float]] = None
    rel_err: Optional[float] = None
    interval_distance: Optional[float] = None
