"""
Time grid and simulated path models.
"""
from dataclasses import dataclass

import numpy as np

from app.models.market import ExerciseSchedule


@dataclass(frozen=True, eq=False)
class Partition:
    """
    Uniform grid 0 = t_0 < ... < t_n = T with optional exercise flags.

    Attributes:
        n: Number of steps
        horizon: T
        times: t_i = i*T/n for i = 0..n (t_n == T bitwise)
        exercise: Boolean flag per node, True where an exercise date sits
        schedule: Exercise dates snapped onto grid nodes, if any
    """
    n: int
    horizon: float
    times: np.ndarray
    exercise: np.ndarray
    schedule: ExerciseSchedule | None = None

    @property
    def h(self) -> float:
        return self.horizon / self.n

    @property
    def is_bermudan(self) -> bool:
        return self.schedule is not None

    def floor_index(self, t: float) -> int:
        """Index of pi(t): the grid point at or before t."""
        if t < 0 or t > self.horizon:
            raise ValueError(f"t={t} outside [0, {self.horizon}]")
        i = int(np.searchsorted(self.times, t, side="right")) - 1
        return min(max(i, 0), self.n)

    def next_index(self, t: float) -> int:
        """Index of pi-bar(t): the grid point strictly after t."""
        i = self.floor_index(t)
        if i >= self.n:
            raise ValueError(f"no grid point after t={t}")
        return i + 1


@dataclass(frozen=True, eq=False)
class PathBatch:
    """
    Simulated forward paths and the Brownian increments that drove them.

    Attributes:
        states: (M, n+1, d1) Euler states, states[:, 0] = x0
        increments: (M, n, d) Brownian increments
        partition: Grid the paths live on
        seed: Stream seed; path m used substream (seed, start + m)
        start: Global index of the first path in this batch
    """
    states: np.ndarray
    increments: np.ndarray
    partition: Partition
    seed: int
    start: int = 0

    def __post_init__(self) -> None:
        m, steps_plus_one, _ = self.states.shape
        if steps_plus_one != self.partition.n + 1:
            raise ValueError("states do not match the partition")
        if self.increments.shape[:2] != (m, self.partition.n):
            raise ValueError("increments do not match states")

    @property
    def size(self) -> int:
        return int(self.states.shape[0])

    @property
    def dim_x(self) -> int:
        return int(self.states.shape[2])

    @property
    def dim_w(self) -> int:
        return int(self.increments.shape[2])
