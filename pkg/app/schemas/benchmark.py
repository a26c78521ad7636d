"""
Published benchmark fixture: table rows, their references and pass tolerances.
"""
from enum import Enum
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.models.market import OptionStyle, PayoffKind


class ReferenceKind(str, Enum):
    """Where a row's reference value comes from."""
    CLOSED_FORM = "closed_form"
    ORACLE = "oracle"
    INTERVAL = "interval"
    NONE = "none"


class BenchmarkRow(BaseModel):
    """One row of a published table."""

    model_config = ConfigDict(extra="forbid")

    payoff: PayoffKind
    style: OptionStyle
    d1: int = Field(ge=1)
    n: int = Field(ge=1)
    exercise_dates: int = Field(default=10, ge=1)
    reference: ReferenceKind
    published_reference: Optional[float] = None
    published_price: Optional[float] = None
    interval: Optional[tuple[float, float]] = None
    rel_tol: Optional[float] = Field(default=None, gt=0.0)
    rel_band: Optional[tuple[float, float]] = None
    slack: float = Field(default=0.02, ge=0.0)
    source: str = ""

    @model_validator(mode="after")
    def validate_reference(self) -> "BenchmarkRow":
        """Interval rows need an interval; priced references need a tolerance."""
        if self.reference == ReferenceKind.INTERVAL and self.interval is None:
            raise ValueError("interval reference without an interval")
        if self.interval is not None and self.interval[0] > self.interval[1]:
            raise ValueError(f"interval {self.interval} is reversed")
        if self.reference in (ReferenceKind.CLOSED_FORM, ReferenceKind.ORACLE):
            if self.rel_tol is None and self.rel_band is None:
                raise ValueError("priced reference needs rel_tol or rel_band")
        return self


class BenchmarkTable(BaseModel):
    model_config = ConfigDict(extra="forbid")

    title: str
    source: str = ""
    rows: list[BenchmarkRow]


class BenchmarkFixture(BaseModel):
    """All bundled tables, keyed by table id."""

    model_config = ConfigDict(extra="forbid")

    schema_version: int = 1
    note: str = ""
    tables: dict[str, BenchmarkTable]

    def find_interval(
        self, payoff: PayoffKind, style: OptionStyle, d1: int
    ) -> Optional[tuple[float, float]]:
        """Benchmark interval for a (payoff, style, d1) combination, if any table has one."""
        for table in self.tables.values():
            for row in table.rows:
                if (row.payoff, row.style, row.d1) == (payoff, style, d1) and row.interval:
                    return row.interval
        return None
