"""
Backward deep BSDE scheme.

Y is rolled backward from g(X_T) along simulated paths,
    Y_i = Y_{i+1} + f(t_i, X_i, Y_{i+1}, Z_i) h - Z_i . dW_i,   Z_i = phi_i(X_i),
with Y_i replaced by max(g(X_i), Y_i) on Bermudan exercise dates. The networks
phi_i are trained by minimising the sample variance of Y_0, which vanishes for
the exact adapted solution; the price is the mean of Y_0 on fresh paths.
"""
import math
import time
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from app.core.config import settings
from app.core.exceptions import ShapeError, TrainingAborted
from app.core.logging import get_logger
from app.models.grid import PathBatch, Partition
from app.models.market import FbsdeProblem, OptionStyle
from app.schemas.training import TrainConfig, TrainingReport
from app.services.autodiff import Node, Tape, backward
from app.services.mlp import ControlStack
from app.services.path_engine import StreamDomain, derive_seed, simulate_forward_batch
from app.workers.pool import map_ordered, split_range

logger = get_logger(__name__)

Payoff = Callable[[np.ndarray], np.ndarray]


@dataclass
class Rollout:
    """
    Result of one backward pass.

    Attributes:
        y0: (M,) per-path Y_0
        y0_node: Tape node of Y_0 when run on a recording tape
        y: (M, n+1) all Y_{t_i} when requested
        z: (M, n, d) all Z_{t_i} when requested
    """
    y0: np.ndarray
    y0_node: Node | None = None
    y: np.ndarray | None = None
    z: np.ndarray | None = None


def _rollout(
    problem: FbsdeProblem,
    partition: Partition,
    paths: PathBatch,
    controls: ControlStack,
    exercise: np.ndarray,
    exercise_payoff: Payoff,
    tape: Tape | None,
    nodes: list[list[Node]] | None,
    keep_path: bool,
) -> Rollout:
    n = partition.n
    if len(controls) != n:
        raise ShapeError(f"control stack has {len(controls)} networks for n={n} steps")
    if paths.partition.n != n:
        raise ShapeError(f"paths have {paths.partition.n} steps, partition has {n}")

    tape = tape if tape is not None else Tape(record=False)
    if nodes is None:
        nodes = controls.bind(tape)
    h = partition.h
    x = paths.states
    dw = paths.increments
    m = paths.size

    y = tape.constant(problem.terminal(x[:, n]))
    y_path = np.empty((m, n + 1)) if keep_path else None
    z_path = np.empty((m, n, paths.dim_w)) if keep_path else None
    if y_path is not None:
        y_path[:, n] = y.value

    for i in range(n - 1, -1, -1):
        t = float(partition.times[i])
        xi = x[:, i]
        z = controls.control_on_tape(tape, nodes[i], xi)
        f_y, f_z = problem.driver_partials(t, xi, y.value, z.value)
        f = tape.custom(
            "driver",
            problem.driver(t, xi, y.value, z.value),
            [y, z],
            [lambda g, a=f_y: g * a, lambda g, b=f_z: g[:, None] * b],
        )
        y = y + f * h - tape.sum_rows(z * dw[:, i])
        if exercise[i]:
            y = tape.maximum(tape.constant(exercise_payoff(xi)), y)
        if y_path is not None and z_path is not None:
            y_path[:, i] = y.value
            z_path[:, i] = z.value

    return Rollout(
        y0=np.asarray(y.value),
        y0_node=y if tape.record else None,
        y=y_path,
        z=z_path,
    )


def rollout_backward_european(
    problem: FbsdeProblem,
    partition: Partition,
    paths: PathBatch,
    controls: ControlStack,
    tape: Tape | None = None,
    nodes: list[list[Node]] | None = None,
    keep_path: bool = False,
) -> Rollout:
    """
    Explicit backward recursion from Y_T = g(X_T) to per-path Y_0.

    Runs on ``tape`` when given (differentiable end to end), otherwise on a
    non-recording tape.

    Raises:
        ShapeError: If the control stack and partition lengths differ
    """
    no_exercise = np.zeros(partition.n + 1, dtype=bool)
    return _rollout(
        problem, partition, paths, controls, no_exercise, problem.terminal, tape, nodes, keep_path
    )


def rollout_backward_bermudan(
    problem: FbsdeProblem,
    partition: Partition,
    paths: PathBatch,
    controls: ControlStack,
    tape: Tape | None = None,
    nodes: list[list[Node]] | None = None,
    keep_path: bool = False,
    exercise_payoff: Payoff | None = None,
) -> Rollout:
    """
    Backward recursion with Y_{t_i} = max(payoff, continuation) on exercise nodes.

    The max is applied at every flagged node, including tau_0 = 0.
    """
    if partition.schedule is None:
        raise ShapeError("Bermudan rollout needs a partition with an exercise schedule")
    return _rollout(
        problem,
        partition,
        paths,
        controls,
        partition.exercise,
        exercise_payoff or problem.terminal,
        tape,
        nodes,
        keep_path,
    )


def rollout(
    style: OptionStyle,
    problem: FbsdeProblem,
    partition: Partition,
    paths: PathBatch,
    controls: ControlStack,
    **kwargs: object,
) -> Rollout:
    """Dispatch on exercise style."""
    if style == OptionStyle.BERMUDAN:
        return rollout_backward_bermudan(problem, partition, paths, controls, **kwargs)  # type: ignore[arg-type]
    return rollout_backward_european(problem, partition, paths, controls, **kwargs)  # type: ignore[arg-type]


def variance_loss(y0_samples: np.ndarray) -> float:
    """
    Population variance (1/M) sum (y_m - mean)^2.

    Raises:
        ShapeError: If fewer than two samples are given
    """
    y = np.ravel(np.asarray(y0_samples, dtype=float))
    if y.size < 2:
        raise ShapeError(f"variance needs at least 2 samples, got {y.size}")
    return float(np.mean((y - y.mean()) ** 2))


class AdamOptimizer:
    """
    Adaptive-moment update applied in place to a list of parameter arrays.
    Entries with ``trainable[k] == False`` are never touched.
    """

    def __init__(
        self,
        params: list[np.ndarray],
        learning_rate: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
        trainable: list[bool] | None = None,
    ):
        self.params = params
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.trainable = trainable or [True] * len(params)
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.steps = 0

    def step(self, grads: list[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ShapeError(f"{len(grads)} gradients for {len(self.params)} parameters")
        self.steps += 1
        correction1 = 1.0 - self.beta1**self.steps
        correction2 = 1.0 - self.beta2**self.steps
        for k, (p, g) in enumerate(zip(self.params, grads)):
            if not self.trainable[k]:
                continue
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            m_hat = self.m[k] / correction1
            v_hat = self.v[k] / correction2
            p -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.epsilon)


def _slice_paths(paths: PathBatch, lo: int, hi: int) -> PathBatch:
    return PathBatch(
        states=paths.states[lo:hi],
        increments=paths.increments[lo:hi],
        partition=paths.partition,
        seed=paths.seed,
        start=paths.start + lo,
    )


def loss_and_gradients(
    problem: FbsdeProblem,
    partition: Partition,
    paths: PathBatch,
    controls: ControlStack,
    style: OptionStyle,
    shards: int = 1,
) -> tuple[float, list[np.ndarray]]:
    """
    Var[Y_0] over the batch and its gradient with respect to every control parameter.

    With shards > 1 each path shard is rolled out on its own tape; the gradient
    of the population variance is (2/M) sum (y_m - mean) dy_m, so every shard
    backpropagates the constant weights 2(y_m - mean)/M and the per-shard
    gradients are summed in shard order.
    """
    if shards <= 1:
        tape = Tape()
        nodes = controls.bind(tape)
        result = rollout(style, problem, partition, paths, controls, tape=tape, nodes=nodes)
        assert result.y0_node is not None
        loss = tape.variance(result.y0_node)
        return float(loss.value), backward(tape, loss)

    bounds = split_range(paths.size, -(-paths.size // shards))

    def forward(span: tuple[int, int]) -> tuple[Tape, Node]:
        tape = Tape()
        nodes = controls.bind(tape)
        part = _slice_paths(paths, *span)
        result = rollout(style, problem, partition, part, controls, tape=tape, nodes=nodes)
        assert result.y0_node is not None
        return tape, result.y0_node

    forwards = map_ordered(forward, bounds, jobs=shards)
    y0 = np.concatenate([node.value for _, node in forwards])
    weights = 2.0 * (y0 - y0.mean()) / y0.size

    def reverse(item: tuple[tuple[Tape, Node], tuple[int, int]]) -> list[np.ndarray]:
        (tape, node), (lo, hi) = item
        return backward(tape, tape.dot(node, weights[lo:hi]))

    shard_grads = map_ordered(reverse, list(zip(forwards, bounds)), jobs=shards)
    grads = [np.array(g, copy=True) for g in shard_grads[0]]
    for other in shard_grads[1:]:
        for k, g in enumerate(other):
            grads[k] += g
    return variance_loss(y0), grads


def _trainable_mask(controls: ControlStack) -> list[bool]:
    """Constant controls only train the output bias of each network."""
    mask: list[bool] = []
    for p in controls.params:
        arrays = p.arrays()
        if controls.constant:
            mask.extend(k == len(arrays) - 1 for k in range(len(arrays)))
        else:
            mask.extend([True] * len(arrays))
    return mask


def _stalled(previous: float, current: float, tol: float) -> bool:
    if previous <= 0.0:
        return True
    return (previous - current) / previous < tol


def _plateaued(history: list[float], window: int, tol: float | None) -> bool:
    """
    Two consecutive window means each improved on the one before by less than
    tol (relative). A previous mean <= 0 counts as stalled.
    """
    if tol is None or len(history) < 3 * window or len(history) % window:
        return False
    first, second, third = (
        float(np.mean(history[len(history) - k * window:len(history) - (k - 1) * window]))
        for k in (3, 2, 1)
    )
    return _stalled(first, second, tol) and _stalled(second, third, tol)


def evaluate(
    controls: ControlStack,
    problem: FbsdeProblem,
    partition: Partition,
    paths: int,
    seed: int,
    style: OptionStyle | None = None,
    jobs: int = 1,
    shard_paths: int | None = None,
) -> tuple[float, float, float]:
    """
    Price statistics of Y_0 on fresh paths, without recording a tape.

    Paths are generated in fixed-size shards by global index, so results do not
    depend on ``jobs``.

    Returns:
        (mean of Y_0, standard error, population variance of Y_0)
    """
    if style is None:
        style = OptionStyle.BERMUDAN if partition.is_bermudan else OptionStyle.EUROPEAN
    shard_paths = shard_paths or settings.EVAL_SHARD_PATHS

    def run(span: tuple[int, int]) -> np.ndarray:
        lo, hi = span
        batch = simulate_forward_batch(problem, partition, hi - lo, seed, start=lo)
        return rollout(style, problem, partition, batch, controls).y0

    y0 = np.concatenate(map_ordered(run, split_range(paths, shard_paths), jobs=jobs))
    return _y0_statistics(y0)


def evaluate_batch(
    controls: ControlStack,
    problem: FbsdeProblem,
    batch: PathBatch,
    style: OptionStyle | None = None,
) -> tuple[float, float, float]:
    """Same statistics as ``evaluate`` on a fixed, already simulated batch."""
    partition = batch.partition
    if style is None:
        style = OptionStyle.BERMUDAN if partition.is_bermudan else OptionStyle.EUROPEAN
    return _y0_statistics(rollout(style, problem, partition, batch, controls).y0)


def _y0_statistics(y0: np.ndarray) -> tuple[float, float, float]:
    price = float(np.mean(y0))
    std_error = float(np.std(y0, ddof=1) / math.sqrt(y0.size)) if y0.size > 1 else 0.0
    return price, std_error, float(np.var(y0))


def train(
    problem: FbsdeProblem,
    partition: Partition,
    config: TrainConfig,
    style: OptionStyle = OptionStyle.EUROPEAN,
    jobs: int = 1,
) -> tuple[ControlStack, TrainingReport]:
    """
    Fit phi_0 .. phi_{n-1} by Adam on Var[Y_0], then price on an independent batch.

    Each iteration draws a fresh batch (unless ``resample_paths`` is off), rolls
    it back on a new tape, and applies one optimiser step to every network.

    Raises:
        TrainingAborted: On a non-finite loss or gradient
    """
    batch = config.resolved_batch(style)
    seed = config.seed
    controls = ControlStack.initialize(
        problem,
        partition.n,
        derive_seed(seed, StreamDomain.INIT),
        constant=config.constant_controls,
    )
    params = controls.arrays()
    optimizer = AdamOptimizer(
        params,
        learning_rate=config.learning_rate,
        beta1=config.beta1,
        beta2=config.beta2,
        epsilon=config.epsilon,
        trainable=_trainable_mask(controls),
    )

    logger.info(
        f"Training {style.value} scheme: n={partition.n}, d1={problem.dim_x}, "
        f"batch={batch}, iterations={config.iterations}, seed={seed}"
    )
    started = time.perf_counter()
    history: list[float] = []
    stopped_early = False

    fixed_paths = None
    if not config.resample_paths:
        fixed_paths = simulate_forward_batch(
            problem, partition, batch, derive_seed(seed, StreamDomain.TRAINING, 0)
        )

    for iteration in range(config.iterations):
        paths = fixed_paths if fixed_paths is not None else simulate_forward_batch(
            problem, partition, batch, derive_seed(seed, StreamDomain.TRAINING, iteration)
        )
        loss, grads = loss_and_gradients(
            problem, partition, paths, controls, style, shards=config.grad_shards
        )
        if not math.isfinite(loss):
            logger.error(f"Non-finite loss at iteration {iteration}: {loss}")
            raise TrainingAborted(iteration, "loss", f"Var[Y_0]={loss}")
        for k, g in enumerate(grads):
            if not np.all(np.isfinite(g)):
                logger.error(f"Non-finite gradient at iteration {iteration}, parameter {k}")
                raise TrainingAborted(iteration, "gradient", f"parameter array {k}")

        optimizer.step(grads)
        history.append(loss)

        if (iteration + 1) % config.log_every == 0:
            logger.info(f"Iteration {iteration + 1}/{config.iterations}: loss={loss:.6g}")
        if _plateaued(history, config.plateau_window, config.plateau_tol):
            logger.info(f"Loss plateaued after {iteration + 1} iterations")
            stopped_early = True
            break

    price, std_error, variance = evaluate(
        controls,
        problem,
        partition,
        config.eval_paths,
        derive_seed(seed, StreamDomain.EVALUATION),
        style=style,
        jobs=jobs,
    )
    wall_time = time.perf_counter() - started
    logger.info(
        f"Trained {style.value} scheme in {wall_time:.1f}s: price={price:.6f} "
        f"+/- {std_error:.6f}, Var[Y_0]={variance:.6g}"
    )

    report = TrainingReport(
        schema_version=settings.REPORT_SCHEMA_VERSION,
        style=style,
        loss_history=history,
        price=price,
        price_std_error=std_error,
        final_variance=variance,
        iterations_run=len(history),
        stopped_early=stopped_early,
        wall_time=wall_time,
        seed=seed,
        config={**config.model_dump(mode="json"), "batch_size": batch, "n": partition.n},
    )
    return controls, report
