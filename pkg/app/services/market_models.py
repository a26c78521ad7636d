"""
Black-Scholes problem builders and analytic reference oracles.

Geometric-basket payoffs reduce to a single lognormal asset, which gives closed
forms for the price and its spot sensitivity. Arithmetic baskets have no closed
form and are priced by exact lognormal Monte Carlo instead.
"""
import math

import numpy as np
from scipy.special import erfc

from app.core.config import settings
from app.core.logging import get_logger
from app.models.market import (
    BlackScholesMarket,
    FbsdeProblem,
    OneDimReduction,
    PayoffKind,
    correlation_factor,
)
from app.services.path_engine import StreamDomain, substream
from app.workers.pool import map_ordered, split_range

logger = get_logger(__name__)

SQRT_2 = math.sqrt(2.0)
MIN_ORACLE_SAMPLES = 10_000


def norm_cdf(x: float | np.ndarray) -> float | np.ndarray:
    """Standard normal CDF via the complementary error function."""
    return 0.5 * erfc(-np.asarray(x, dtype=float) / SQRT_2)


def geometric_put_payoff(x: np.ndarray, strike: float) -> np.ndarray:
    """
    (K - geometric mean of x)^+ over the last axis.

    Non-positive coordinates (possible under Euler) are floored at zero, and the
    geometric mean of anything containing a zero is zero.
    """
    floored = np.maximum(np.asarray(x, dtype=float), 0.0)
    with np.errstate(divide="ignore"):
        mean_log = np.mean(np.log(floored), axis=-1)
    return np.maximum(strike - np.exp(mean_log), 0.0)


def basket_call_payoff(x: np.ndarray, strike: float) -> np.ndarray:
    """(arithmetic mean of x - K)^+ over the last axis."""
    return np.maximum(np.mean(np.asarray(x, dtype=float), axis=-1) - strike, 0.0)


def _black_scholes_problem(
    market: BlackScholesMarket, kind: PayoffKind
) -> FbsdeProblem:
    factor = correlation_factor(market.correlation)
    identity = bool(np.array_equal(factor, np.eye(market.dim)))
    growth = market.rate - market.dividend_array
    vols = market.vol_array
    rate = market.rate
    strike = market.strike

    def drift(t: float, x: np.ndarray) -> np.ndarray:
        return growth * x

    def diffusion(t: float, x: np.ndarray) -> np.ndarray:
        return (vols * x)[..., :, None] * factor

    def diffuse(t: float, x: np.ndarray, dw: np.ndarray) -> np.ndarray:
        return vols * x * (dw if identity else dw @ factor.T)

    def driver(t: float, x: np.ndarray, y: np.ndarray, z: np.ndarray) -> np.ndarray:
        return -rate * y

    def driver_partials(
        t: float, x: np.ndarray, y: np.ndarray, z: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        return np.full(np.shape(y), -rate), np.zeros(np.shape(z))

    if kind == PayoffKind.GEOMETRIC_PUT:
        def terminal(x: np.ndarray) -> np.ndarray:
            return geometric_put_payoff(x, strike)
    else:
        def terminal(x: np.ndarray) -> np.ndarray:
            return basket_call_payoff(x, strike)

    return FbsdeProblem(
        dim_x=market.dim,
        dim_w=market.dim,
        horizon=market.maturity,
        drift=drift,
        diffusion=diffusion,
        driver=driver,
        driver_partials=driver_partials,
        terminal=terminal,
        x0=market.spot_array,
        diffuse=diffuse,
        payoff_kind=kind,
        market=market,
    )


def make_geometric_put_problem(market: BlackScholesMarket) -> FbsdeProblem:
    """
    FBSDE for a European/Bermudan geometric-basket put.

    Raises:
        CorrelationError: If the correlation has no Cholesky factor
    """
    return _black_scholes_problem(market, PayoffKind.GEOMETRIC_PUT)


def make_basket_call_problem(market: BlackScholesMarket) -> FbsdeProblem:
    """FBSDE for an arithmetic-basket call."""
    return _black_scholes_problem(market, PayoffKind.BASKET_CALL)


def make_problem(market: BlackScholesMarket, payoff: PayoffKind) -> FbsdeProblem:
    """Dispatch on payoff kind."""
    if payoff == PayoffKind.GEOMETRIC_PUT:
        return make_geometric_put_problem(market)
    return make_basket_call_problem(market)


def reduce_to_one_dim(market: BlackScholesMarket) -> OneDimReduction:
    """
    Lognormal parameters of the geometric mean of the basket.

    sigma_hat^2 = (sum_i s_i^2 + sum_{i != j} s_i s_j rho_ij) / d1^2, which equals
    s^T rho s / d1^2 because the correlation diagonal is one.
    """
    d = market.dim
    vols = market.vol_array
    sigma_hat_sq = float(vols @ market.correlation_array @ vols) / d**2
    sigma_hat_sq = max(sigma_hat_sq, 0.0)
    mu_hat = float(np.mean(market.rate - market.dividend_array - 0.5 * vols**2)) + 0.5 * sigma_hat_sq
    s_hat0 = float(np.exp(np.mean(np.log(market.spot_array))))
    return OneDimReduction(mu_hat=mu_hat, sigma_hat=math.sqrt(sigma_hat_sq), s_hat0=s_hat0)


def _geometric_put(
    reduction: OneDimReduction,
    rate: float,
    strike: float,
    tau: float,
    spot: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Put value and d(value)/d(spot) on the reduced asset with time to maturity tau."""
    spot = np.asarray(spot, dtype=float)
    discount = math.exp(-rate * tau)
    growth = math.exp(reduction.mu_hat * tau)
    forward = spot * growth

    if strike == 0.0:
        zeros = np.zeros_like(forward)
        return zeros, zeros.copy()

    vol_sqrt_tau = reduction.sigma_hat * math.sqrt(tau)
    if vol_sqrt_tau == 0.0:
        in_money = forward < strike
        value = discount * np.maximum(strike - forward, 0.0)
        delta = np.where(in_money, -discount * growth, 0.0)
        return value, delta

    with np.errstate(divide="ignore"):
        d_plus = (np.log(forward / strike) + 0.5 * vol_sqrt_tau**2) / vol_sqrt_tau
    d_minus = d_plus - vol_sqrt_tau
    value = discount * (strike * norm_cdf(-d_minus) - forward * norm_cdf(-d_plus))
    delta = -discount * growth * norm_cdf(-d_plus)
    return value, delta


def geometric_put_closed_form(market: BlackScholesMarket) -> float:
    """
    European geometric-basket put price at t = 0.

    Returns 0 for K = 0 without evaluating log(S/0).
    """
    reduction = reduce_to_one_dim(market)
    value, _ = _geometric_put(
        reduction, market.rate, market.strike, market.maturity, np.asarray(reduction.s_hat0)
    )
    return float(value)


def geometric_call_closed_form(market: BlackScholesMarket) -> float:
    """European geometric-basket call price at t = 0, by put-call parity on the reduced asset."""
    reduction = reduce_to_one_dim(market)
    tau = market.maturity
    put = geometric_put_closed_form(market)
    forward = reduction.s_hat0 * math.exp(reduction.mu_hat * tau)
    return put + math.exp(-market.rate * tau) * (forward - market.strike)


def geometric_put_value_and_delta(
    market: BlackScholesMarket, t: float, s: float | np.ndarray
) -> tuple[float | np.ndarray, float | np.ndarray]:
    """
    Geometric put value u(t, s) and du/ds, where s is the geometric mean of the basket.

    Args:
        market: Market parameters
        t: Current time, 0 <= t < T
        s: Geometric-mean spot(s) >= 0

    Returns:
        (value, delta) with the shape of ``s``

    Raises:
        ValueError: If t is outside [0, T) or any spot is negative
    """
    if not 0.0 <= t < market.maturity:
        raise ValueError(f"t must satisfy 0 <= t < T={market.maturity}, got {t}")
    spot = np.asarray(s, dtype=float)
    if np.any(spot < 0):
        raise ValueError("spot must be non-negative")
    value, delta = _geometric_put(
        reduce_to_one_dim(market), market.rate, market.strike, market.maturity - t, spot
    )
    if np.ndim(s) == 0:
        return float(value), float(delta)
    return value, delta


def basket_call_mc_oracle(
    market: BlackScholesMarket,
    samples: int,
    seed: int,
    jobs: int = 1,
    chunk: int | None = None,
) -> tuple[float, float]:
    """
    Discounted basket-call price by exact lognormal sampling of X_T.

    Samples are split into fixed-size chunks, each drawn from its own Philox
    substream (seed, chunk index), so the estimate does not depend on ``jobs``.

    Args:
        market: Market parameters
        samples: Number of terminal draws (>= 10^4)
        seed: Stream seed
        jobs: Worker threads
        chunk: Samples per chunk (defaults to settings.ORACLE_CHUNK_SAMPLES)

    Returns:
        (price, standard error)
    """
    if samples < MIN_ORACLE_SAMPLES:
        raise ValueError(f"oracle needs at least {MIN_ORACLE_SAMPLES} samples, got {samples}")
    chunk = chunk or settings.ORACLE_CHUNK_SAMPLES

    factor = correlation_factor(market.correlation)
    tau = market.maturity
    vols = market.vol_array
    log_drift = (market.rate - market.dividend_array - 0.5 * vols**2) * tau
    log_spot = np.log(market.spot_array)
    discount = math.exp(-market.rate * tau)

    def run_chunk(item: tuple[int, tuple[int, int]]) -> np.ndarray:
        index, (lo, hi) = item
        xi = substream(seed, index, StreamDomain.ORACLE).standard_normal((hi - lo, market.dim))
        terminal = np.exp(log_spot + log_drift + vols * math.sqrt(tau) * (xi @ factor.T))
        return discount * basket_call_payoff(terminal, market.strike)

    chunks = list(enumerate(split_range(samples, chunk)))
    payoffs = np.concatenate(map_ordered(run_chunk, chunks, jobs=jobs))
    price = float(np.mean(payoffs))
    std_error = float(np.std(payoffs, ddof=1) / math.sqrt(samples))
    logger.debug(f"Basket call oracle: {price:.6f} +/- {std_error:.6f} ({samples} samples)")
    return price, std_error
