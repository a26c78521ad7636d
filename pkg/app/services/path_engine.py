"""
Path engine: time grids, index-keyed Gaussian increments and Euler-Maruyama paths.

Every path m draws from its own counter-based Philox stream keyed by
(seed, m), so any single path can be regenerated in isolation and batches
built by any number of workers are bit-identical.
"""
import math
from enum import IntEnum
from functools import lru_cache

import numpy as np

from app.core.exceptions import GridError
from app.core.logging import get_logger
from app.models.grid import PathBatch, Partition
from app.models.market import ExerciseSchedule, FbsdeProblem, correlation_factor
from app.workers.pool import map_ordered, split_range

logger = get_logger(__name__)

GRID_SNAP_TOL = 1e-9


class StreamDomain(IntEnum):
    """Separates RNG families that share a user seed."""
    PATHS = 0
    ORACLE = 1
    TRAINING = 2
    EVALUATION = 3
    INIT = 4


def derive_seed(seed: int, *tags: int) -> int:
    """Deterministic 63-bit child seed from a parent seed and integer tags."""
    state = np.random.SeedSequence([int(seed), *[int(t) for t in tags]]).generate_state(
        1, dtype=np.uint64
    )
    return int(state[0] >> np.uint64(1))


@lru_cache(maxsize=256)
def _stream_word(seed: int, domain: int) -> np.uint64:
    return np.random.SeedSequence([seed, domain]).generate_state(1, dtype=np.uint64)[0]


def substream(seed: int, index: int, domain: StreamDomain = StreamDomain.PATHS) -> np.random.Generator:
    """Philox generator keyed by (seed, domain) and a stream index."""
    word = _stream_word(int(seed), int(domain))
    key = np.array([word, np.uint64(index)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def build_partition(
    n: int, horizon: float, schedule: ExerciseSchedule | None = None
) -> Partition:
    """
    Build the uniform grid t_i = i*T/n, optionally flagging exercise dates.

    Args:
        n: Step count (>= 1)
        horizon: T > 0
        schedule: Exercise dates; each must fall on a grid node

    Returns:
        Partition with exercise flags and the schedule snapped onto the grid

    Raises:
        GridError: If an exercise date is not a grid node
    """
    if n < 1:
        raise GridError(f"step count must be >= 1, got n={n}")
    if horizon <= 0:
        raise GridError(f"horizon must be > 0, got T={horizon}")

    times = np.array([i * horizon / n for i in range(n + 1)], dtype=float)
    exercise = np.zeros(n + 1, dtype=bool)

    snapped: ExerciseSchedule | None = None
    if schedule is not None:
        big_n = schedule.periods
        nodes = []
        for tau in schedule.dates:
            k = tau * n / horizon
            i = int(round(k))
            if abs(k - i) > GRID_SNAP_TOL or not 0 <= i <= n:
                raise GridError(
                    f"exercise date {tau} is not a grid node: N={big_n} exercise periods "
                    f"must divide n={n} steps"
                )
            nodes.append(i)
        exercise[nodes] = True
        snapped = ExerciseSchedule(tuple(float(times[i]) for i in nodes))

    return Partition(n=n, horizon=float(horizon), times=times, exercise=exercise, schedule=snapped)


def _is_identity(factor: np.ndarray) -> bool:
    return bool(np.array_equal(factor, np.eye(factor.shape[0])))


def sample_increments(
    partition: Partition,
    paths: int,
    rho: np.ndarray,
    seed: int,
    start: int = 0,
    jobs: int = 1,
) -> np.ndarray:
    """
    Correlated Brownian increments sqrt(h) * L xi for paths [start, start + paths).

    Args:
        partition: Time grid
        paths: Number of paths M
        rho: (d, d) correlation of the driving components
        seed: Stream seed
        start: Global index of the first path
        jobs: Worker threads

    Returns:
        (M, n, d) array

    Raises:
        CorrelationError: If rho has no Cholesky factor
    """
    factor = correlation_factor(rho)
    d = factor.shape[0]
    n = partition.n
    scale = math.sqrt(partition.h)
    identity = _is_identity(factor)

    def fill(bounds: tuple[int, int]) -> np.ndarray:
        lo, hi = bounds
        block = np.empty((hi - lo, n, d))
        for offset, m in enumerate(range(lo, hi)):
            xi = substream(seed, m).standard_normal((n, d))
            block[offset] = xi if identity else xi @ factor.T
        return block

    shards = split_range(paths, max(1, -(-paths // max(jobs, 1))))
    blocks = map_ordered(fill, [(start + lo, start + hi) for lo, hi in shards], jobs=jobs)
    out = np.concatenate(blocks, axis=0) if blocks else np.empty((0, n, d))
    return out * scale


def euler_step(t: float, x: np.ndarray, h: float, dw: np.ndarray, problem: FbsdeProblem) -> np.ndarray:
    """
    One Euler-Maruyama step x + b(t, x) h + sigma(t, x) dW.

    Accepts a single state (d1,) or a batch (M, d1); returns the same shape.
    """
    single = np.ndim(x) == 1
    xb = np.atleast_2d(np.asarray(x, dtype=float))
    dwb = np.atleast_2d(np.asarray(dw, dtype=float))
    out = xb + problem.drift(t, xb) * h + problem.sigma_dw(t, xb, dwb)
    return out[0] if single else out


def euler_recursion(
    problem: FbsdeProblem,
    partition: Partition,
    x_start: np.ndarray,
    increments: np.ndarray,
    first_step: int = 0,
) -> np.ndarray:
    """
    Run the Euler recursion from grid index ``first_step`` through the given increments.

    Args:
        problem: FBSDE coefficients
        partition: Time grid
        x_start: (M, d1) states at t_{first_step}
        increments: (M, k, d) increments for steps first_step .. first_step + k - 1

    Returns:
        (M, k + 1, d1) states including x_start
    """
    m, steps, _ = increments.shape
    if first_step + steps > partition.n:
        raise GridError(f"{steps} steps from index {first_step} overrun n={partition.n}")
    states = np.empty((m, steps + 1, problem.dim_x))
    states[:, 0] = x_start
    h = partition.h
    for k in range(steps):
        i = first_step + k
        states[:, k + 1] = euler_step(partition.times[i], states[:, k], h, increments[:, k], problem)
    return states


def simulate_forward_batch(
    problem: FbsdeProblem,
    partition: Partition,
    paths: int,
    seed: int,
    start: int = 0,
    jobs: int = 1,
) -> PathBatch:
    """
    Simulate M forward Euler paths of X from x0, keeping the increments.

    The problem's diffusion already carries any correlation, so the driving
    increments are independent standard Brownian components.
    """
    if paths < 1:
        raise ValueError(f"path count must be >= 1, got {paths}")

    def shard(bounds: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = bounds
        dw = sample_increments(partition, hi - lo, np.eye(problem.dim_w), seed, start=lo)
        x_start = np.broadcast_to(np.asarray(problem.x0, dtype=float), (hi - lo, problem.dim_x))
        return euler_recursion(problem, partition, x_start, dw), dw

    shards = split_range(paths, max(1, -(-paths // max(jobs, 1))))
    parts = map_ordered(shard, [(start + lo, start + hi) for lo, hi in shards], jobs=jobs)
    states = np.concatenate([p[0] for p in parts], axis=0)
    increments = np.concatenate([p[1] for p in parts], axis=0)
    return PathBatch(states=states, increments=increments, partition=partition, seed=seed, start=start)
