"""
Per-time-step feedforward networks phi_i and the control stack built from them.

Each phi_i is affine -> ReLU -> affine -> ReLU -> affine with hidden width
d1 + 10. The stack also carries a fixed input standardisation and output scale
so the raw networks work on O(1) quantities.
"""
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from app.core.exceptions import ShapeError
from app.models.market import FbsdeProblem
from app.services.autodiff import Node, Tape
from app.services.path_engine import StreamDomain, derive_seed, substream

HIDDEN_EXTRA = 10
HIDDEN_LAYERS = 2


@dataclass
class MlpParams:
    """Dense layer weights (fan_in x fan_out) and biases (fan_out,)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self) -> None:
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("need one bias per weight matrix and at least one layer")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"layer {k}: weight {w.shape} and bias {b.shape} do not match")
            if k and self.weights[k - 1].shape[1] != w.shape[0]:
                raise ShapeError(f"layer {k} fan-in {w.shape[0]} does not chain")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ShapeError(f"layer {k} has non-finite entries")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def parameter_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def arrays(self) -> list[np.ndarray]:
        """Parameters in the fixed order W0, b0, W1, b1, ..."""
        out: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @classmethod
    def from_arrays(cls, arrays: list[np.ndarray]) -> "MlpParams":
        return cls(weights=list(arrays[0::2]), biases=list(arrays[1::2]))

    def copy(self) -> "MlpParams":
        return MlpParams.from_arrays([a.copy() for a in self.arrays()])


def default_layer_sizes(d1: int, d: int) -> list[int]:
    """[d1, d1+10, d1+10, d]."""
    return [d1] + [d1 + HIDDEN_EXTRA] * HIDDEN_LAYERS + [d]


def init_mlp(d1: int, d: int, seed: int, layer_sizes: list[int] | None = None) -> MlpParams:
    """
    He-initialised network: hidden weights ~ N(0, 2/fan_in), output weights
    ~ N(0, 1/fan_in), zero biases.
    """
    if d1 < 1 or d < 1:
        raise ValueError(f"dimensions must be >= 1, got d1={d1}, d={d}")
    sizes = layer_sizes or default_layer_sizes(d1, d)
    if sizes[0] != d1 or sizes[-1] != d:
        raise ShapeError(f"layer sizes {sizes} do not start at {d1} and end at {d}")
    rng = substream(seed, 0, StreamDomain.INIT)
    weights, biases = [], []
    last = len(sizes) - 2
    for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        std = np.sqrt((1.0 if k == last else 2.0) / fan_in)
        weights.append(rng.standard_normal((fan_in, fan_out)) * std)
        biases.append(np.zeros(fan_out))
    return MlpParams(weights=weights, biases=biases)


def mlp_forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Evaluate the network on one input (d1,) or a batch (M, d1)."""
    h = np.asarray(x, dtype=float)
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if k < last:
            h = np.maximum(h, 0.0)
    return h


def mlp_forward_on_tape(tape: Tape, nodes: list[Node], x: Node) -> Node:
    """Same composition as ``mlp_forward`` on tape nodes [W0, b0, W1, b1, ...]."""
    h = x
    layers = len(nodes) // 2
    for k in range(layers):
        h = tape.affine(h, nodes[2 * k], nodes[2 * k + 1])
        if k < layers - 1:
            h = tape.relu(h)
    return h


@dataclass
class ControlStack:
    """
    One network per grid step, Z_{t_i} = output_scale * phi_i((X - shift) / scale).

    Attributes:
        params: phi_0 .. phi_{n-1}
        input_shift: (d1,) subtracted from states
        input_scale: (d1,) divides shifted states
        output_scale: (d,) multiplies network outputs
    """

    params: list[MlpParams]
    input_shift: np.ndarray
    input_scale: np.ndarray
    output_scale: np.ndarray
    constant: bool = field(default=False)

    def __len__(self) -> int:
        return len(self.params)

    @property
    def dim_x(self) -> int:
        return int(self.input_shift.shape[0])

    @property
    def dim_w(self) -> int:
        return int(self.output_scale.shape[0])

    def standardize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.input_shift) / self.input_scale

    def control(self, i: int, x: np.ndarray) -> np.ndarray:
        """Z_{t_i} for states x (M, d1) without a tape."""
        return mlp_forward(self.params[i], self.standardize(x)) * self.output_scale

    def arrays(self) -> list[np.ndarray]:
        """All parameter arrays, step by step."""
        out: list[np.ndarray] = []
        for p in self.params:
            out.extend(p.arrays())
        return out

    def bind(self, tape: Tape) -> list[list[Node]]:
        """Register every parameter on the tape; returns nodes grouped per step."""
        return [[tape.parameter(a) for a in p.arrays()] for p in self.params]

    def control_on_tape(self, tape: Tape, nodes: list[Node], x: np.ndarray) -> Node:
        out = mlp_forward_on_tape(tape, nodes, tape.constant(self.standardize(x)))
        return tape.scale(out, self.output_scale)

    def copy(self) -> "ControlStack":
        return ControlStack(
            params=[p.copy() for p in self.params],
            input_shift=self.input_shift.copy(),
            input_scale=self.input_scale.copy(),
            output_scale=self.output_scale.copy(),
            constant=self.constant,
        )

    @classmethod
    def initialize(
        cls,
        problem: FbsdeProblem,
        steps: int,
        seed: int,
        constant: bool = False,
        layer_sizes: list[int] | None = None,
    ) -> "ControlStack":
        """
        Fresh stack for ``steps`` grid steps.

        Scaling is read off sigma(0, x0): inputs are centred at x0 and divided by
        the per-coordinate diffusion magnitude over the horizon, outputs are
        multiplied by the per-column diffusion magnitude / d1. With
        ``constant=True`` all weights are zero so phi_i reduces to its output bias.
        """
        x0 = np.asarray(problem.x0, dtype=float)
        sigma0 = np.asarray(problem.diffusion(0.0, x0.reshape(1, -1)))[0]
        row_norm = np.linalg.norm(sigma0, axis=1) * np.sqrt(problem.horizon)
        fallback = np.maximum(np.abs(x0), 1.0)
        input_scale = np.where(row_norm > 0.0, row_norm, fallback)
        output_scale = np.linalg.norm(sigma0, axis=0) / problem.dim_x

        params = []
        for i in range(steps):
            p = init_mlp(problem.dim_x, problem.dim_w, derive_seed(seed, i), layer_sizes)
            if constant:
                p = MlpParams(
                    weights=[np.zeros_like(w) for w in p.weights],
                    biases=[np.zeros_like(b) for b in p.biases],
                )
            params.append(p)
        return cls(
            params=params,
            input_shift=x0.copy(),
            input_scale=input_scale,
            output_scale=output_scale,
            constant=constant,
        )

    def to_dict(self) -> dict[str, Any]:
        """Checkpoint: layer sizes header plus row-major doubles."""
        return {
            "format": "control-stack",
            "steps": len(self.params),
            "layer_sizes": self.params[0].layer_sizes if self.params else [],
            "constant": self.constant,
            "input_shift": self.input_shift.tolist(),
            "input_scale": self.input_scale.tolist(),
            "output_scale": self.output_scale.tolist(),
            "params": [
                [{"weight": w.ravel(order="C").tolist(), "bias": b.tolist()}
                 for w, b in zip(p.weights, p.biases)]
                for p in self.params
            ],
        }

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> "ControlStack":
        sizes = payload["layer_sizes"]
        params = []
        for layers in payload["params"]:
            weights = [
                np.asarray(layer["weight"], dtype=float).reshape(fan_in, fan_out)
                for layer, fan_in, fan_out in zip(layers, sizes[:-1], sizes[1:])
            ]
            biases = [np.asarray(layer["bias"], dtype=float) for layer in layers]
            params.append(MlpParams(weights=weights, biases=biases))
        if len(params) != payload["steps"]:
            raise ShapeError(f"checkpoint declares {payload['steps']} steps, holds {len(params)}")
        return cls(
            params=params,
            input_shift=np.asarray(payload["input_shift"], dtype=float),
            input_scale=np.asarray(payload["input_scale"], dtype=float),
            output_scale=np.asarray(payload["output_scale"], dtype=float),
            constant=bool(payload.get("constant", False)),
        )
