"""
Experiment schemas for the command-line runner.
Configs are validated up front; unknown keys are rejected so typos fail loudly.
"""
from typing import Any, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.models.market import BlackScholesMarket, OptionStyle, PayoffKind
from app.schemas.training import TrainConfig

Scalar = float
PerAsset = Union[float, list[float]]


def _expand(value: PerAsset, dim: int, name: str) -> tuple[float, ...]:
    if isinstance(value, list):
        if len(value) != dim:
            raise ValueError(f"{name} has {len(value)} entries, expected dim={dim}")
        return tuple(float(v) for v in value)
    return (float(value),) * dim


class MarketConfig(BaseModel):
    """Market block: scalars broadcast to every asset, lists give per-asset values."""

    model_config = ConfigDict(extra="forbid")

    dim: int = Field(default=1, ge=1)
    rate: float = 0.02
    dividend: PerAsset = 0.0
    vol: PerAsset = 0.2
    rho: Union[float, list[list[float]]] = 0.0
    spot: PerAsset = 100.0
    strike: float = Field(default=100.0, ge=0.0)
    maturity: float = Field(default=1.0, gt=0.0)

    def to_market(self) -> BlackScholesMarket:
        d = self.dim
        if isinstance(self.rho, list):
            correlation = tuple(tuple(float(c) for c in row) for row in self.rho)
        else:
            correlation = tuple(
                tuple(1.0 if i == j else float(self.rho) for j in range(d)) for i in range(d)
            )
        return BlackScholesMarket(
            rate=self.rate,
            dividends=_expand(self.dividend, d, "dividend"),
            vols=_expand(self.vol, d, "vol"),
            correlation=correlation,
            spots=_expand(self.spot, d, "spot"),
            strike=self.strike,
            maturity=self.maturity,
        )

    @model_validator(mode="after")
    def validate_market(self) -> "MarketConfig":
        """Build the market once so shape and correlation errors surface at load time."""
        self.to_market()
        return self


class ExperimentConfig(BaseModel):
    """One pricing experiment."""

    model_config = ConfigDict(extra="forbid")

    payoff: PayoffKind = PayoffKind.GEOMETRIC_PUT
    style: OptionStyle = OptionStyle.EUROPEAN
    market: MarketConfig = Field(default_factory=MarketConfig)
    n: int = Field(default=100, ge=1, description="Time steps")
    exercise_dates: int = Field(default=10, ge=1, description="N, Bermudan exercise periods")
    train: TrainConfig = Field(default_factory=TrainConfig)
    output_dir: Optional[str] = None
    seed: int = Field(default=0, ge=0)
    oracle_samples: int = Field(default=1_000_000, ge=10_000)
    rel_tol: float = Field(default=0.01, gt=0.0, description="Pass tolerance on |relative error|")
    interval: Optional[tuple[float, float]] = Field(
        default=None, description="Bermudan benchmark interval; looked up in the fixture when omitted"
    )
    interval_slack: float = Field(default=0.02, ge=0.0, description="Relative widening of the interval")

    @model_validator(mode="after")
    def validate_experiment(self) -> "ExperimentConfig":
        """Bermudan grids must contain every exercise date; the run seed drives training."""
        if self.style == OptionStyle.BERMUDAN and self.n % self.exercise_dates != 0:
            raise ValueError(
                f"n={self.n} is not a multiple of exercise_dates N={self.exercise_dates}"
            )
        if self.train.seed != self.seed:
            self.train = self.train.model_copy(update={"seed": self.seed})
        return self

    def resolved(self) -> dict[str, Any]:
        """Config echo with defaults filled in (embedded in every artifact)."""
        data = self.model_dump(mode="json")
        data["train"]["batch_size"] = self.train.resolved_batch(self.style)
        return data


class ResultRow(BaseModel):
    """One priced configuration, as written to result and table CSVs."""

    payoff: PayoffKind
    style: OptionStyle
    d1: int
    n: int
    price: Optional[float] = None
    std_err: Optional[float] = None
    reference: Optional[float] = None
    interval: Optional[tuple[float, float]] = None
    rel_err_or_interval_flag: str = ""
    passed: bool = False
    error: Optional[str] = None
    seed: int = 0

    def csv_fields(self) -> list[Any]:
        return [
            self.payoff.value,
            self.style.value,
            self.d1,
            self.n,
            "" if self.price is None else f"{self.price:.6f}",
            "" if self.std_err is None else f"{self.std_err:.6f}",
            "" if self.reference is None else f"{self.reference:.6f}",
            self.rel_err_or_interval_flag,
            "pass" if self.passed else "fail",
            self.seed,
        ]


RESULT_HEADER = [
    "payoff",
    "style",
    "d1",
    "n",
    "price",
    "std_err",
    "reference",
    "rel_err_or_interval_flag",
    "status",
    "seed",
]
