"""Small dense-network substrate: MLPs, backprop, Adam, gradient checks.

Everything runs in float64 numpy. Networks store weights with shape
``(fan_in, fan_out)`` so a forward pass is ``x @ W + b``. Hidden layers use
SiLU; the output layer is linear.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import BinaryIO, Callable, Sequence

import numpy as np

CHECKPOINT_MAGIC = b"PDNET\x00\x00\x01"
CHECKPOINT_VERSION = 1

_optimizer_steps = 0


class ShapeError(ValueError):
    pass


class FrozenError(RuntimeError):
    """Raised when something tries to mutate frozen parameters."""


class NonFiniteError(FloatingPointError):
    pass


def optimizer_step_count() -> int:
    """Total number of Adam updates applied in this process."""
    return _optimizer_steps


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x):
    return x * sigmoid(x)


def silu_grad(x):
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


@dataclass
class DenseNet:
    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    frozen: bool = False

    def __post_init__(self):
        dims = list(self.layer_dims)
        if len(dims) < 2 or any(int(d) < 1 for d in dims):
            raise ShapeError(f"invalid layer_dims {dims}")
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise ShapeError("need one weight matrix and bias per layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[i], dims[i + 1]) or b.shape != (dims[i + 1],):
                raise ShapeError(
                    f"layer {i}: got W{w.shape}, b{b.shape} for dims "
                    f"{dims[i]}->{dims[i + 1]}"
                )
        self.layer_dims = [int(d) for d in dims]

    @classmethod
    def init(cls, layer_dims: Sequence[int], rng: np.random.Generator) -> "DenseNet":
        """Uniform fan-in initialisation, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(rng.uniform(-bound, bound, size=fan_out))
        return cls(list(layer_dims), weights, biases)

    @classmethod
    def zeros(cls, layer_dims: Sequence[int]) -> "DenseNet":
        return cls(
            list(layer_dims),
            [np.zeros((a, b)) for a, b in zip(layer_dims[:-1], layer_dims[1:])],
            [np.zeros(b) for b in layer_dims[1:]],
        )

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    def parameters(self) -> list[np.ndarray]:
        """Parameters in checkpoint order: W0, b0, W1, b1, ..."""
        params = []
        for w, b in zip(self.weights, self.biases):
            params += [w, b]
        return params

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def freeze(self) -> None:
        for p in self.parameters():
            p.flags.writeable = False
        self.frozen = True

    def copy(self) -> "DenseNet":
        return DenseNet(
            list(self.layer_dims),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
        )

    def __call__(self, x):
        return forward(self, x)


@dataclass
class Gradients:
    """Parameter gradients (summed over the batch) plus the input gradient."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input: np.ndarray

    def parameters(self) -> list[np.ndarray]:
        grads = []
        for w, b in zip(self.weights, self.biases):
            grads += [w, b]
        return grads


def _as_batch(net: DenseNet, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ShapeError(f"expected input of width {net.in_dim}, got shape {x.shape}")
    return x, single


def _forward_trace(net: DenseNet, x: np.ndarray):
    pre_acts = []
    acts = [x]
    h = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w + b
        pre_acts.append(z)
        h = z if i == last else silu(z)
        acts.append(h)
    return pre_acts, acts


def forward(net: DenseNet, x) -> np.ndarray:
    """Evaluate the network on a vector ``(in,)`` or a batch ``(n, in)``."""
    xb, single = _as_batch(net, x)
    _, acts = _forward_trace(net, xb)
    out = acts[-1]
    return out[0] if single else out


def backward(net: DenseNet, x, loss_grad) -> Gradients:
    """Backpropagate ``dL/d(output)`` through the network.

    The forward pass is recomputed, so this is a pure function of the
    parameters and its arguments. For batched input the parameter gradients
    are summed over rows.
    """
    xb, single = _as_batch(net, x)
    g = np.asarray(loss_grad, dtype=np.float64)
    if single:
        g = g[None, :] if g.ndim == 1 else g
    if g.shape != (xb.shape[0], net.out_dim):
        raise ShapeError(
            f"loss_grad shape {np.shape(loss_grad)} does not match output "
            f"({xb.shape[0]}, {net.out_dim})"
        )
    pre_acts, acts = _forward_trace(net, xb)
    n_layers = len(net.weights)
    dws: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    dbs: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    delta = g
    for i in range(n_layers - 1, -1, -1):
        if i != n_layers - 1:
            delta = delta * silu_grad(pre_acts[i])
        dws[i] = acts[i].T @ delta
        dbs[i] = delta.sum(axis=0)
        delta = delta @ net.weights[i].T
    dx = delta[0] if single else delta
    return Gradients(dws, dbs, dx)


@dataclass
class OptimizerState:
    first_moments: list[np.ndarray]
    second_moments: list[np.ndarray]
    step: int = 0
    learning_rate: float = 1e-4
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **kwargs) -> "OptimizerState":
        if kwargs.get("learning_rate", 1e-4) <= 0:
            raise ValueError("learning_rate must be positive")
        if kwargs.get("weight_decay", 0.0) < 0:
            raise ValueError("weight_decay must be non-negative")
        return cls(
            [np.zeros_like(p) for p in params],
            [np.zeros_like(p) for p in params],
            **kwargs,
        )


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: OptimizerState,
) -> None:
    """One in-place Adam update with bias correction and decoupled weight decay."""
    global _optimizer_steps
    if not (len(params) == len(grads) == len(state.first_moments)):
        raise ShapeError("params, grads and optimizer state differ in length")
    for i, (p, g, m) in enumerate(zip(params, grads, state.first_moments)):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"parameter {i}: shapes {p.shape}, {g.shape}, {m.shape}")
        if not p.flags.writeable:
            raise FrozenError("attempted optimizer update on frozen parameters")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(
                f"non-finite gradient in parameter {i} at step {state.step + 1}"
            )

    state.step += 1
    _optimizer_steps += 1
    lr, b1, b2 = state.learning_rate, state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.first_moments, state.second_moments):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            p -= lr * state.weight_decay * p
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def numeric_gradients(
    loss_fn: Callable[[], float], params: Sequence[np.ndarray], step: float = 1e-5
) -> list[np.ndarray]:
    """Central differences of ``loss_fn`` w.r.t. every entry of ``params``.

    ``params`` are perturbed in place and restored exactly afterwards.
    """
    out = []
    for p in params:
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            up = loss_fn()
            flat[j] = orig - step
            down = loss_fn()
            flat[j] = orig
            gflat[j] = (up - down) / (2.0 * step)
        out.append(g)
    return out


def compare_gradients(
    analytic: Sequence[np.ndarray], numeric: Sequence[np.ndarray], floor: float = 1e-6
) -> float:
    return max(relative_error(a, n, floor) for a, n in zip(analytic, numeric))


LossSpec = Callable[[np.ndarray], tuple[float, np.ndarray]]


def squared_error(target) -> LossSpec:
    """Loss spec ``sum((y - target)^2)`` returning ``(loss, dloss/dy)``."""
    target = np.asarray(target, dtype=np.float64)

    def spec(y):
        r = y - target
        return float(np.sum(r * r)), 2.0 * r

    return spec


def grad_check(net: DenseNet, loss: LossSpec, x, step: float = 1e-5,
               floor: float = 1e-6) -> float:
    """Max relative error between backprop and central-difference gradients."""
    if net.frozen:
        raise FrozenError("grad_check perturbs parameters; use an unfrozen copy")
    _, dy = loss(forward(net, x))
    analytic = backward(net, x, dy).parameters()

    def f():
        return loss(forward(net, x))[0]

    numeric = numeric_gradients(f, net.parameters(), step)
    return compare_gradients(analytic, numeric, floor)


def checksum(params: Sequence[np.ndarray]) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return h.hexdigest()


def write_net(net: DenseNet, fh: BinaryIO) -> None:
    dims = net.layer_dims
    fh.write(CHECKPOINT_MAGIC)
    fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(dims)))
    fh.write(struct.pack(f"<{len(dims)}I", *dims))
    for p in net.parameters():
        fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError("truncated checkpoint")
    return buf


def read_net(fh: BinaryIO) -> DenseNet:
    if _read_exact(fh, len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise ValueError("not a network checkpoint (bad magic)")
    version, n_dims = struct.unpack("<II", _read_exact(fh, 8))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    dims = list(struct.unpack(f"<{n_dims}I", _read_exact(fh, 4 * n_dims)))
    weights, biases = [], []
    for a, b in zip(dims[:-1], dims[1:]):
        weights.append(
            np.frombuffer(_read_exact(fh, 8 * a * b), dtype="<f8").reshape(a, b).copy()
        )
        biases.append(np.frombuffer(_read_exact(fh, 8 * b), dtype="<f8").copy())
    return DenseNet(dims, weights, biases)


def save_net(net: DenseNet, path) -> None:
    with open(path, "wb") as fh:
        write_net(net, fh)


def load_net(path) -> DenseNet:
    with open(path, "rb") as fh:
        return read_net(fh)
