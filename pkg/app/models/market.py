"""
Market and problem models.
Black-Scholes market parameters, exercise schedules and the FBSDE coefficient bundle.
"""
from collections.abc import Callable
from dataclasses import dataclass
from enum import Enum
from typing import Any

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.core.exceptions import CorrelationError

CHOLESKY_TOL = 1e-10

Array = np.ndarray


class PayoffKind(str, Enum):
    """Payoff enumeration."""
    GEOMETRIC_PUT = "geometric_put"
    BASKET_CALL = "basket_call"


class OptionStyle(str, Enum):
    """Exercise style enumeration."""
    EUROPEAN = "european"
    BERMUDAN = "bermudan"


def correlation_factor(rho: Any, tol: float = CHOLESKY_TOL) -> Array:
    """
    Lower-triangular L with L L^T = rho, tolerant of rank deficiency.

    Pivots within ``tol`` of zero are set to zero (so rho_12 = 1 yields two
    identical rows). Raises CorrelationError if rho is not a correlation matrix.
    """
    rho = np.asarray(rho, dtype=float)
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise CorrelationError(f"correlation must be square, got shape {rho.shape}")
    if not np.all(np.isfinite(rho)):
        raise CorrelationError("correlation has non-finite entries")
    if not np.allclose(rho, rho.T, atol=tol, rtol=0.0):
        raise CorrelationError("correlation is not symmetric")
    if not np.allclose(np.diag(rho), 1.0, atol=tol, rtol=0.0):
        raise CorrelationError("correlation diagonal must be 1")

    d = rho.shape[0]
    factor = np.zeros_like(rho)
    for j in range(d):
        pivot = rho[j, j] - factor[j, :j] @ factor[j, :j]
        if pivot < -tol:
            raise CorrelationError(f"correlation is not positive semi-definite (pivot {j}: {pivot:.3e})")
        if pivot <= tol:
            # Degenerate direction: the rest of the column must vanish too
            residual = rho[j + 1:, j] - factor[j + 1:, :j] @ factor[j, :j]
            if np.any(np.abs(residual) > np.sqrt(tol)):
                raise CorrelationError(f"correlation is not positive semi-definite (column {j})")
            continue
        factor[j, j] = np.sqrt(pivot)
        factor[j + 1:, j] = (rho[j + 1:, j] - factor[j + 1:, :j] @ factor[j, :j]) / factor[j, j]
    return factor


class BlackScholesMarket(BaseModel):
    """
    Correlated multi-asset Black-Scholes market with continuous dividend yields.

    Vectors are stored as tuples so the model stays hashable and JSON friendly;
    the ``*_array`` properties return numpy views for computation.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    rate: float
    dividends: tuple[float, ...]
    vols: tuple[float, ...]
    correlation: tuple[tuple[float, ...], ...]
    spots: tuple[float, ...]
    strike: float = Field(ge=0.0)
    maturity: float = Field(default=1.0, gt=0.0)

    @field_validator("vols", mode="after")
    @classmethod
    def validate_vols(cls, v: tuple[float, ...]) -> tuple[float, ...]:
        """Volatilities are non-negative (zero gives deterministic paths)."""
        if any(not np.isfinite(s) or s < 0 for s in v):
            raise ValueError("volatilities must be finite and >= 0")
        return v

    @field_validator("spots", mode="after")
    @classmethod
    def validate_spots(cls, v: tuple[float, ...]) -> tuple[float, ...]:
        """Spots are strictly positive."""
        if any(not np.isfinite(s) or s <= 0 for s in v):
            raise ValueError("spots must be finite and > 0")
        return v

    @model_validator(mode="after")
    def validate_dimensions(self) -> "BlackScholesMarket":
        """All per-asset vectors share one dimension and rho is a valid correlation."""
        d = len(self.spots)
        if d < 1:
            raise ValueError("market needs at least one asset")
        for name in ("dividends", "vols"):
            if len(getattr(self, name)) != d:
                raise ValueError(f"{name} has length {len(getattr(self, name))}, expected {d}")
        if len(self.correlation) != d or any(len(row) != d for row in self.correlation):
            raise ValueError(f"correlation must be {d}x{d}")
        correlation_factor(self.correlation)
        return self

    @classmethod
    def uniform(
        cls,
        dim: int,
        rate: float = 0.02,
        dividend: float = 0.0,
        vol: float = 0.2,
        rho: float = 0.0,
        spot: float = 100.0,
        strike: float = 100.0,
        maturity: float = 1.0,
    ) -> "BlackScholesMarket":
        """Market with identical assets and constant pairwise correlation."""
        corr = np.full((dim, dim), rho)
        np.fill_diagonal(corr, 1.0)
        return cls(
            rate=rate,
            dividends=(dividend,) * dim,
            vols=(vol,) * dim,
            correlation=tuple(tuple(float(c) for c in row) for row in corr),
            spots=(spot,) * dim,
            strike=strike,
            maturity=maturity,
        )

    @property
    def dim(self) -> int:
        return len(self.spots)

    @property
    def dividend_array(self) -> Array:
        return np.asarray(self.dividends, dtype=float)

    @property
    def vol_array(self) -> Array:
        return np.asarray(self.vols, dtype=float)

    @property
    def spot_array(self) -> Array:
        return np.asarray(self.spots, dtype=float)

    @property
    def correlation_array(self) -> Array:
        return np.asarray(self.correlation, dtype=float)


@dataclass(frozen=True, eq=False)
class ExerciseSchedule:
    """Ordered exercise dates 0 = tau_0 < ... < tau_N = T."""

    dates: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.dates) < 1:
            raise ValueError("exercise schedule needs at least one date")
        if any(b <= a for a, b in zip(self.dates, self.dates[1:])):
            raise ValueError("exercise dates must be strictly increasing")
        if self.dates[0] < 0:
            raise ValueError("exercise dates must be non-negative")

    @classmethod
    def uniform(cls, count: int, horizon: float) -> "ExerciseSchedule":
        """N + 1 equally spaced dates j*T/N including 0 and T."""
        if count < 1:
            raise ValueError(f"number of exercise periods must be >= 1, got {count}")
        return cls(tuple(j * horizon / count for j in range(count + 1)))

    @property
    def periods(self) -> int:
        return len(self.dates) - 1


@dataclass(frozen=True)
class OneDimReduction:
    """Geometric-mean reduction of a Black-Scholes basket to one lognormal asset."""

    mu_hat: float
    sigma_hat: float
    s_hat0: float


@dataclass(frozen=True, eq=False)
class FbsdeProblem:
    """
    Coefficient bundle of a decoupled FBSDE.

    Batched conventions: x is (M, d1), y is (M,), z is (M, d), dw is (M, d).
    drift -> (M, d1); diffusion -> (M, d1, d); driver/terminal -> (M,).
    ``diffuse`` computes diffusion(t, x) @ dw without the (M, d1, d) matrix and
    ``driver_partials`` returns (df/dy (M,), df/dz (M, d)) for the tape.
    """

    dim_x: int
    dim_w: int
    horizon: float
    drift: Callable[[float, Array], Array]
    diffusion: Callable[[float, Array], Array]
    driver: Callable[[float, Array, Array, Array], Array]
    driver_partials: Callable[[float, Array, Array, Array], tuple[Array, Array]]
    terminal: Callable[[Array], Array]
    x0: Array
    diffuse: Callable[[float, Array, Array], Array] | None = None
    dim_y: int = 1
    payoff_kind: PayoffKind | None = None
    market: BlackScholesMarket | None = None

    def __post_init__(self) -> None:
        if self.horizon <= 0:
            raise ValueError(f"horizon must be > 0, got {self.horizon}")
        if self.dim_x < 1 or self.dim_w < 1:
            raise ValueError("state and noise dimensions must be >= 1")
        x = np.asarray(self.x0, dtype=float).reshape(1, self.dim_x)
        y = self.terminal(x)
        z = np.zeros((1, self.dim_w))
        checks = (
            self.drift(0.0, x),
            self.diffusion(0.0, x),
            y,
            self.driver(0.0, x, y, z),
        )
        if not all(np.all(np.isfinite(p)) for p in checks):
            raise ValueError("coefficients are not finite at the initial state")

    def sigma_dw(self, t: float, x: Array, dw: Array) -> Array:
        """sigma(t, x) dW for a batch."""
        if self.diffuse is not None:
            return self.diffuse(t, x, dw)
        return np.einsum("mij,mj->mi", self.diffusion(t, x), dw)
