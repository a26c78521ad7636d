"""
Reverse-mode automatic differentiation on an append-only tape.

Nodes hold batched numpy arrays; every primitive appends one record (operand
indices plus a vector-Jacobian product) and ``backward`` sweeps the records
exactly once in reverse. A tape created with ``record=False`` evaluates the
same expressions without keeping any records.
"""
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np

from app.core.exceptions import ShapeError

Vjp = Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


@dataclass(frozen=True, eq=False)
class _Record:
    kind: str
    parents: tuple[int, ...]
    vjp: Vjp | None


class Node:
    """Handle to a value produced on a tape."""

    __slots__ = ("tape", "index", "value", "requires_grad")

    def __init__(self, tape: "Tape", index: int, value: np.ndarray, requires_grad: bool):
        self.tape = tape
        self.index = index
        self.value = value
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(np.shape(self.value))

    def _lift(self, other: "Node | float | np.ndarray") -> "Node":
        return other if isinstance(other, Node) else self.tape.constant(other)

    def __add__(self, other: "Node | float | np.ndarray") -> "Node":
        return self.tape.add(self, self._lift(other))

    def __radd__(self, other: "float | np.ndarray") -> "Node":
        return self.tape.add(self._lift(other), self)

    def __sub__(self, other: "Node | float | np.ndarray") -> "Node":
        return self.tape.sub(self, self._lift(other))

    def __rsub__(self, other: "float | np.ndarray") -> "Node":
        return self.tape.sub(self._lift(other), self)

    def __mul__(self, other: "Node | float | np.ndarray") -> "Node":
        if isinstance(other, Node):
            return self.tape.mul(self, other)
        return self.tape.scale(self, other)

    def __rmul__(self, other: "float | np.ndarray") -> "Node":
        return self.tape.scale(self, other)

    def __neg__(self) -> "Node":
        return self.tape.scale(self, -1.0)


class Tape:
    """
    Append-only record of primitive operations.

    Records are stored in creation order, which is a topological order because
    every operand must exist before its consumer is built.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self._records: list[_Record] = []
        self._parameters: list[int] = []
        self._parameter_shapes: list[tuple[int, ...]] = []

    def __len__(self) -> int:
        return len(self._records)

    @property
    def parameter_indices(self) -> list[int]:
        return list(self._parameters)

    @property
    def parameter_shapes(self) -> list[tuple[int, ...]]:
        return list(self._parameter_shapes)

    def _push(
        self,
        kind: str,
        value: np.ndarray,
        parents: Sequence[Node] = (),
        vjp: Vjp | None = None,
    ) -> Node:
        requires_grad = self.record and any(p.requires_grad for p in parents)
        if not self.record:
            return Node(self, -1, value, False)
        for p in parents:
            if p.tape is not self:
                raise ShapeError("operands belong to a different tape")
        self._records.append(
            _Record(kind, tuple(p.index for p in parents), vjp if requires_grad else None)
        )
        return Node(self, len(self._records) - 1, value, requires_grad)

    # Leaves

    def constant(self, value: float | np.ndarray) -> Node:
        return self._push("constant", np.asarray(value, dtype=float))

    def parameter(self, value: np.ndarray) -> Node:
        """Register a differentiable leaf."""
        array = np.asarray(value, dtype=float)
        if not self.record:
            return Node(self, -1, array, False)
        self._records.append(_Record("parameter", (), None))
        index = len(self._records) - 1
        self._parameters.append(index)
        self._parameter_shapes.append(array.shape)
        return Node(self, index, array, True)

    # Primitives

    def add(self, a: Node, b: Node) -> Node:
        sa, sb = a.shape, b.shape
        return self._push(
            "add", a.value + b.value, (a, b),
            lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        )

    def sub(self, a: Node, b: Node) -> Node:
        sa, sb = a.shape, b.shape
        return self._push(
            "sub", a.value - b.value, (a, b),
            lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        )

    def mul(self, a: Node, b: Node) -> Node:
        va, vb = a.value, b.value
        return self._push(
            "mul", va * vb, (a, b),
            lambda g: (_unbroadcast(g * vb, va.shape), _unbroadcast(g * va, vb.shape)),
        )

    def scale(self, a: Node, factor: float | np.ndarray) -> Node:
        """Multiply by a constant (no gradient flows to ``factor``)."""
        c = np.asarray(factor, dtype=float)
        sa = a.shape
        return self._push("scale", a.value * c, (a,), lambda g: (_unbroadcast(g * c, sa),))

    def affine(self, x: Node, weight: Node, bias: Node) -> Node:
        """x @ W + b for x (M, a), W (a, b), b (b,)."""
        xv, wv = x.value, weight.value
        return self._push(
            "affine", xv @ wv + bias.value, (x, weight, bias),
            lambda g: (g @ wv.T, xv.T @ g, g.sum(axis=0)),
        )

    def relu(self, x: Node) -> Node:
        """Rectifier; the subgradient at exactly 0 is 0."""
        mask = x.value > 0.0
        return self._push("relu", np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))

    def square(self, x: Node) -> Node:
        xv = x.value
        return self._push("square", xv * xv, (x,), lambda g: (2.0 * xv * g,))

    def sum_rows(self, x: Node) -> Node:
        """Sum over the last axis: (M, d) -> (M,)."""
        shape = x.shape
        return self._push(
            "sum", np.sum(x.value, axis=-1), (x,),
            lambda g: (np.broadcast_to(g[..., None], shape).copy(),),
        )

    def total(self, x: Node) -> Node:
        """Sum of all entries -> scalar."""
        shape = x.shape
        return self._push("total", np.asarray(np.sum(x.value)), (x,), lambda g: (np.full(shape, g),))

    def mean(self, x: Node) -> Node:
        shape = x.shape
        count = max(int(np.prod(shape)), 1)
        return self._push(
            "mean", np.asarray(np.mean(x.value)), (x,), lambda g: (np.full(shape, g / count),)
        )

    def variance(self, x: Node) -> Node:
        """Population variance (1/M) sum (x - mean)^2 of a vector."""
        xv = np.ravel(x.value)
        if xv.size < 2:
            raise ShapeError(f"variance needs at least 2 samples, got {xv.size}")
        centered = xv - xv.mean()
        shape = x.shape
        return self._push(
            "variance", np.asarray(np.mean(centered**2)), (x,),
            lambda g: ((2.0 * g / xv.size * centered).reshape(shape),),
        )

    def dot(self, x: Node, weights: np.ndarray) -> Node:
        """Scalar sum_m w_m x_m against constant weights."""
        w = np.asarray(weights, dtype=float)
        return self._push("dot", np.asarray(np.sum(x.value * w)), (x,), lambda g: (g * w,))

    def maximum(self, a: Node, b: Node) -> Node:
        """Elementwise max; ties send the gradient to ``a``."""
        take_a = a.value >= b.value
        sa, sb = a.shape, b.shape
        return self._push(
            "maximum", np.where(take_a, a.value, b.value), (a, b),
            lambda g: (_unbroadcast(g * take_a, sa), _unbroadcast(g * ~take_a, sb)),
        )

    def custom(
        self,
        kind: str,
        value: np.ndarray,
        parents: Sequence[Node],
        vjps: Sequence[Callable[[np.ndarray], np.ndarray]],
    ) -> Node:
        """Primitive with caller-supplied vector-Jacobian products, one per parent."""
        if len(parents) != len(vjps):
            raise ShapeError("custom primitive needs one vjp per parent")
        return self._push(
            kind, np.asarray(value, dtype=float), parents,
            lambda g: tuple(fn(g) for fn in vjps),
        )

    # Reverse sweep

    def gradients(self, output: Node) -> dict[int, np.ndarray]:
        """Adjoint of every record reachable from ``output``, keyed by record index."""
        if not self.record:
            raise ShapeError("tape was created with record=False")
        if np.size(output.value) != 1:
            raise ShapeError(f"loss must be scalar, got shape {output.shape}")
        adjoints: dict[int, np.ndarray] = {output.index: np.ones_like(output.value)}
        for index in range(output.index, -1, -1):
            grad = adjoints.get(index)
            rec = self._records[index]
            if grad is None or rec.vjp is None:
                continue
            for parent, parent_grad in zip(rec.parents, rec.vjp(grad)):
                if parent_grad is None:
                    continue
                if parent in adjoints:
                    adjoints[parent] = adjoints[parent] + parent_grad
                else:
                    adjoints[parent] = parent_grad
        return adjoints


def backward(tape: Tape, loss_node: Node) -> list[np.ndarray]:
    """
    d(loss)/d(p) for every parameter registered on the tape, in registration order.

    Parameters that do not influence the loss get zero gradients.

    Raises:
        ShapeError: If the loss is not a scalar
    """
    adjoints = tape.gradients(loss_node)
    grads = []
    for index, shape in zip(tape.parameter_indices, tape.parameter_shapes):
        grad = adjoints.get(index)
        grads.append(np.zeros(shape) if grad is None else np.asarray(grad, dtype=float))
    return grads


def finite_difference_gradient(
    loss_fn: Callable[[list[np.ndarray]], float],
    params: Sequence[np.ndarray],
    step: float = 1e-6,
) -> list[np.ndarray]:
    """
    Central-difference gradient of ``loss_fn`` with respect to every entry of ``params``.

    Test oracle only: costs two loss evaluations per scalar parameter.
    """
    if step <= 0:
        raise ValueError(f"step must be > 0, got {step}")
    base = [np.array(p, dtype=float, copy=True) for p in params]
    grads = [np.zeros_like(p) for p in base]
    for k, p in enumerate(base):
        flat = p.reshape(-1)
        for j in range(flat.size):
            original = flat[j]
            flat[j] = original + step
            up = loss_fn(base)
            flat[j] = original - step
            down = loss_fn(base)
            flat[j] = original
            grads[k].reshape(-1)[j] = (up - down) / (2.0 * step)
    return grads
