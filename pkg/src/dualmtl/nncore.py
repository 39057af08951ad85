"""Dense feed-forward network engine.

Float64 numpy throughout. A network is a plain value object (lists of
weight and bias arrays) and ``forward``/``backward`` are free functions;
the backward pass is hand-derived reverse mode for an MLP with ReLU
hidden activations and a linear output layer, so gradients are exact.

No autodiff graph, no GPU path: networks here are small and the trainer
owns the update loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, OptimizerError, ShapeError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class DenseNet:
    """Fully-connected network: affine layers with ReLU in between.

    ``weights[i]`` has shape (out_i, in_i), ``biases[i]`` shape (out_i,);
    consecutive layers chain (out_i == in_{i+1}). The last affine layer
    has no activation. Depth is the number of affine layers.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if not self.weights or len(self.weights) != len(self.biases):
            raise ShapeError("need at least one layer and one bias per weight matrix")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ShapeError(f"layer {i}: weight {w.shape} incompatible with bias {b.shape}")
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeError(
                    f"layer {i}: in-dim {w.shape[1]} != layer {i - 1} out-dim "
                    f"{self.weights[i - 1].shape[0]}"
                )
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise InputError(f"layer {i}: non-finite parameters")

    @property
    def depth(self) -> int:
        return len(self.weights)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def width(self) -> int:
        """Largest hidden dimension (0 for a single affine layer)."""
        return max((w.shape[0] for w in self.weights[:-1]), default=0)

    def layer_dims(self) -> list[int]:
        """Dimension chain [in, hidden..., out]."""
        return [self.in_dim] + [w.shape[0] for w in self.weights]

    def params(self) -> list[np.ndarray]:
        """Parameter blocks interleaved [W0, b0, W1, b1, ...]."""
        out: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def param_names(self, prefix: str = "") -> list[str]:
        names = []
        for i in range(self.depth):
            names.append(f"{prefix}W{i}")
            names.append(f"{prefix}b{i}")
        return names

    def set_params(self, blocks: list[np.ndarray]) -> None:
        if len(blocks) != 2 * self.depth:
            raise ShapeError(f"expected {2 * self.depth} blocks, got {len(blocks)}")
        self.weights = [np.asarray(blocks[2 * i], dtype=np.float64) for i in range(self.depth)]
        self.biases = [np.asarray(blocks[2 * i + 1], dtype=np.float64) for i in range(self.depth)]

    def copy(self) -> "DenseNet":
        return DenseNet([w.copy() for w in self.weights], [b.copy() for b in self.biases])


def init_dense(dims: list[int], rng: np.random.Generator) -> DenseNet:
    """He-initialized network for the dimension chain [in, hidden..., out].

    Weights ~ N(0, 2/fan_in), biases zero; matches the ReLU hidden
    activations and is fully determined by the generator state.
    """
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ValueError(f"dimension chain must have >= 2 positive entries, got {dims}")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        std = np.sqrt(2.0 / fan_in)
        weights.append(rng.standard_normal((fan_out, fan_in)) * std)
        biases.append(np.zeros(fan_out))
    return DenseNet(weights, biases)


def identity_net(dim: int) -> DenseNet:
    """Depth-1 net computing the identity map (frozen-feature baselines)."""
    return DenseNet([np.eye(dim)], [np.zeros(dim)])


def _forward_cached(net: DenseNet, X: np.ndarray):
    """Forward pass keeping activations and pre-activations for backprop.

    Returns (output, activations, preacts) where activations[i] is the
    input to affine layer i and preacts[i] its pre-activation output.
    """
    activations = [X]
    preacts = []
    a = X
    for i in range(net.depth):
        z = a @ net.weights[i].T + net.biases[i]
        preacts.append(z)
        if i < net.depth - 1:
            a = np.maximum(z, 0.0)
            activations.append(a)
    return preacts[-1], activations, preacts


def _check_input(net: DenseNet, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != net.in_dim:
        raise ShapeError(f"input shape {X.shape} incompatible with net in-dim {net.in_dim}")
    if not np.isfinite(X).all():
        raise InputError("input batch contains non-finite values")
    return X


def forward(net: DenseNet, X: np.ndarray) -> np.ndarray:
    """Evaluate the network on a batch, rows as samples. Output (n, out_dim)."""
    X = _check_input(net, X)
    out, _, _ = _forward_cached(net, X)
    return out


def backward(net: DenseNet, X: np.ndarray, upstream_grad: np.ndarray):
    """Exact gradients of sum(forward(net, X) * upstream_grad).

    Returns (weight_grads, bias_grads, input_grad), shape-matching the
    network's parameter blocks and X respectively.
    """
    X = _check_input(net, X)
    upstream_grad = np.asarray(upstream_grad, dtype=np.float64)
    if upstream_grad.shape != (X.shape[0], net.out_dim):
        raise ShapeError(
            f"upstream grad shape {upstream_grad.shape} != {(X.shape[0], net.out_dim)}"
        )
    _, activations, preacts = _forward_cached(net, X)

    weight_grads = [None] * net.depth
    bias_grads = [None] * net.depth
    delta = upstream_grad
    for i in range(net.depth - 1, -1, -1):
        weight_grads[i] = delta.T @ activations[i]
        bias_grads[i] = delta.sum(axis=0)
        delta = delta @ net.weights[i]
        if i > 0:
            # ReLU subgradient: 0 at the kink
            delta = delta * (preacts[i - 1] > 0)
    return weight_grads, bias_grads, delta


@dataclass
class AdamState:
    """First/second moment accumulators for a list of parameter blocks."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    names: list[str] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: list[np.ndarray], names: list[str] | None = None) -> "AdamState":
        if names is None:
            names = [f"block{i}" for i in range(len(params))]
        if len(names) != len(params):
            raise ShapeError("one name per parameter block")
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            names=list(names),
        )


def adam_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    state: AdamState,
    rate: float,
):
    """One bias-corrected Adam update, applied in place.

    Returns (params, state) with ``state.t`` incremented. Raises
    OptimizerError naming the block if any gradient is non-finite.
    """
    if rate <= 0:
        raise ValueError(f"learning rate must be positive, got {rate}")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and state must have matching block counts")
    for p, g, name in zip(params, grads, state.names):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape} in {name}")
        if not np.isfinite(g).all():
            raise OptimizerError(f"non-finite gradient in {name}")
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        p -= rate * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


@dataclass(frozen=True)
class LrSchedule:
    """Exponential decay: rate at epoch e is base_rate * decay**e.

    A base rate of exactly 0 is allowed as a degenerate schedule meaning
    "perform no updates"; the trainer skips all steps in that case.
    """

    base_rate: float
    decay: float = 0.95

    def __post_init__(self):
        if not (self.base_rate >= 0):
            raise ValueError(f"base_rate must be >= 0, got {self.base_rate}")
        if not (0.0 < self.decay <= 1.0):
            raise ValueError(f"decay must be in (0, 1], got {self.decay}")


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return schedule.base_rate * schedule.decay**epoch
