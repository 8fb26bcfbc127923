"""Coordinate MLPs (implicit neural representations) in plain numpy.

Training is full-batch Adam on MSE with hand-written reverse-mode gradients;
the networks are small enough that one dense pass over every coordinate per
step is the simplest thing that works.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

log = logging.getLogger(__name__)

# exp(-40) ~ 4e-18: Gaussian responses past this are flushed to zero, which
# keeps float32 training out of the (very slow) subnormal range.
_GAUSS_CUTOFF = 40.0


class ActivationKind(IntEnum):
    SINE = 0
    GAUSSIAN = 1
    RELU = 2


@dataclass(frozen=True)
class Activation:
    kind: ActivationKind = ActivationKind.SINE
    omega0: float = 30.0
    sigma: float = 10.0

    def __post_init__(self):
        if not (self.omega0 > 0 and self.sigma > 0):
            raise ValueError("omega0 and sigma must be positive")

    def __call__(self, z: np.ndarray) -> np.ndarray:
        if self.kind == ActivationKind.SINE:
            return np.sin(self.omega0 * z)
        if self.kind == ActivationKind.GAUSSIAN:
            a = np.asarray((self.sigma * z) ** 2)
            y = np.exp(-np.minimum(a, _GAUSS_CUTOFF))
            return np.where(a < _GAUSS_CUTOFF, y, y.dtype.type(0))
        return np.maximum(z, 0)

    def grad(self, z: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Derivative at ``z`` given the already computed ``y = act(z)``."""
        if self.kind == ActivationKind.SINE:
            return self.omega0 * np.cos(self.omega0 * z)
        if self.kind == ActivationKind.GAUSSIAN:
            return -2.0 * self.sigma ** 2 * z * y
        return (z > 0).astype(z.dtype)


@dataclass(frozen=True)
class Architecture:
    """``a -> k -> ... -> k -> b`` with ``hidden_layers`` square ``k x k`` layers."""

    input_dim: int
    output_dim: int
    hidden_layers: int
    width: int
    activation: Activation = field(default_factory=Activation)
    pe_levels: int = 0

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1 or self.width < 1:
            raise ValueError("dimensions must be positive")
        if self.hidden_layers < 0 or self.pe_levels < 0:
            raise ValueError("hidden_layers and pe_levels must be non-negative")

    @property
    def encoded_dim(self) -> int:
        if self.pe_levels:
            return 2 * self.pe_levels * self.input_dim
        return self.input_dim

    @property
    def n_layers(self) -> int:
        return self.hidden_layers + 2

    def layer_shapes(self) -> list[tuple[int, int]]:
        """``(out, in)`` of every weight matrix."""
        k = self.width
        return ([(k, self.encoded_dim)] + [(k, k)] * self.hidden_layers
                + [(self.output_dim, k)])

    def weight_count(self) -> int:
        return sum(r * c for r, c in self.layer_shapes())


@dataclass(eq=False)
class Network:
    arch: Architecture
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        shapes = self.arch.layer_shapes()
        if len(self.weights) != len(shapes) or len(self.biases) != len(shapes):
            raise ValueError(f"expected {len(shapes)} layers")
        for i, (W, b, shape) in enumerate(zip(self.weights, self.biases, shapes)):
            if W.shape != shape or b.shape != (shape[0],):
                raise ValueError(f"layer {i}: got W{W.shape}, b{b.shape}, expected W{shape}")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i}: non-finite parameters")

    def copy(self) -> "Network":
        return Network(self.arch, [W.copy() for W in self.weights],
                       [b.copy() for b in self.biases])

    def parameters(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def astype(self, dtype) -> "Network":
        return Network(self.arch, [W.astype(dtype) for W in self.weights],
                       [b.astype(dtype) for b in self.biases])


class NonFiniteError(FloatingPointError):
    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message)
        self.layer = layer


def coordinate_grid(dims) -> np.ndarray:
    """All grid points of ``linspace(-1, 1, d)`` per axis, last axis fastest."""
    dims = list(dims)
    if not 1 <= len(dims) <= 3:
        raise ValueError("between 1 and 3 axes are supported")
    if any(d < 2 for d in dims):
        raise ValueError(f"every axis needs at least 2 samples, got {dims}")
    axes = [np.linspace(-1.0, 1.0, d) for d in dims]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def positional_encoding(coords: np.ndarray, levels: int) -> np.ndarray:
    """``[sin(2^j pi c), cos(2^j pi c)]`` for ``j < levels``, per axis, axes concatenated."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    coords = np.asarray(coords)
    freqs = np.pi * 2.0 ** np.arange(levels)
    ang = coords[:, :, None] * freqs  # N x a x L
    out = np.stack([np.sin(ang), np.cos(ang)], axis=-1)  # N x a x L x 2
    return out.reshape(len(coords), -1)


def prepare_inputs(arch: Architecture, coords: np.ndarray) -> np.ndarray:
    coords = np.asarray(coords)
    if arch.pe_levels and coords.shape[1] == arch.input_dim:
        return positional_encoding(coords, arch.pe_levels).astype(coords.dtype, copy=False)
    if coords.shape[1] != arch.encoded_dim:
        raise ValueError(f"coordinate width {coords.shape[1]} does not match "
                         f"network input {arch.encoded_dim}")
    return coords


def init_network(arch: Architecture, seed: int = 0) -> Network:
    """Uniform initialization; sine layers use the usual SIREN scaling."""
    rng = np.random.default_rng(seed)
    act = arch.activation
    weights = []
    for i, (fan_out, fan_in) in enumerate(arch.layer_shapes()):
        if act.kind == ActivationKind.SINE:
            bound = 1.0 / fan_in if i == 0 else math.sqrt(6.0 / fan_in) / act.omega0
        else:
            bound = math.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
    biases = [np.zeros(r) for r, _ in arch.layer_shapes()]
    return Network(arch, weights, biases)


def _forward_cache(net: Network, X: np.ndarray):
    act = net.arch.activation
    last = len(net.weights) - 1
    zs, ys = [], [X]
    y = X
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        z = y @ W.T + b
        if i == last:
            if not np.all(np.isfinite(z)):
                raise NonFiniteError(f"non-finite output at layer {i}", i)
            return z, zs, ys
        y = act(z)
        if not np.all(np.isfinite(y)):
            raise NonFiniteError(f"non-finite activation at layer {i}", i)
        zs.append(z)
        ys.append(y)
    raise AssertionError("unreachable")


def forward(net: Network, coords: np.ndarray) -> np.ndarray:
    """Evaluate the network on an ``N x a`` (or already encoded) coordinate matrix."""
    X = prepare_inputs(net.arch, coords)
    out, _, _ = _forward_cache(net, X)
    return out


def loss_and_grads(net: Network, X: np.ndarray, targets: np.ndarray):
    """MSE over all ``N*b`` outputs and its gradient w.r.t. every weight and bias."""
    act = net.arch.activation
    out, zs, ys = _forward_cache(net, X)
    diff = out - targets
    loss = float(np.mean(diff * diff))
    delta = (2.0 / diff.size) * diff
    gW = [None] * len(net.weights)
    gb = [None] * len(net.weights)
    for i in range(len(net.weights) - 1, -1, -1):
        gW[i] = delta.T @ ys[i]
        gb[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ net.weights[i]) * act.grad(zs[i - 1], ys[i])
    return loss, gW, gb


@dataclass
class TrainConfig:
    epochs: int = 2000
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    loss: str = "mse"
    dtype: str = "float64"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.loss != "mse":
            raise ValueError(f"unsupported loss {self.loss!r}")


def default_learning_rate(activation: Activation) -> float:
    return 1e-4 if activation.kind == ActivationKind.SINE else 5e-3


def train(net: Network, coords: np.ndarray, targets: np.ndarray,
          cfg: TrainConfig, callback=None) -> tuple[Network, list[float]]:
    """Full-batch Adam on MSE.

    Returns the trained copy of ``net`` (cast back to float64) and the loss
    recorded at the start of every epoch.  ``callback(epoch, loss, net)`` is
    called after each step if given.
    """
    dtype = np.dtype(cfg.dtype)
    targets = np.asarray(targets, dtype=dtype)
    if targets.ndim == 1:
        targets = targets[:, None]
    if len(targets) < 1 or not np.all(np.isfinite(targets)):
        raise ValueError("targets must be finite and non-empty")
    X = prepare_inputs(net.arch, np.asarray(coords, dtype=dtype))
    if len(X) != len(targets):
        raise ValueError("coords and targets disagree on N")
    work = net.astype(dtype)
    params = work.parameters()
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    b1, b2, eps, lr = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.learning_rate
    history = []
    for epoch in range(1, cfg.epochs + 1):
        try:
            loss, gW, gb = loss_and_grads(work, X, targets)
        except NonFiniteError as exc:
            raise NonFiniteError(f"epoch {epoch}: {exc}", exc.layer) from exc
        if not math.isfinite(loss):
            raise NonFiniteError(f"epoch {epoch}: loss became {loss}")
        history.append(loss)
        grads = [g for pair in zip(gW, gb) for g in pair]
        if not all(np.all(np.isfinite(g)) for g in grads):
            raise NonFiniteError(f"epoch {epoch}: non-finite gradient")
        c1 = 1.0 - b1 ** epoch
        c2 = 1.0 - b2 ** epoch
        for p, g, mi, vi in zip(params, grads, m, v):
            mi *= b1
            mi += (1.0 - b1) * g
            vi *= b2
            vi += (1.0 - b2) * g * g
            p -= (lr / c1) * mi / (np.sqrt(vi / c2) + eps)
        if callback is not None:
            callback(epoch, loss, work)
    return work.astype(np.float64), history


@dataclass
class LayerMoments:
    layer: int
    hidden: bool
    count: int
    mean: float
    std: float
    skewness: float
    excess_kurtosis: float
    degenerate: bool


def moments(values: np.ndarray) -> tuple[float, float, float, float]:
    x = np.asarray(values, dtype=np.float64).ravel()
    mu = x.mean()
    d = x - mu
    var = np.mean(d * d)
    if var == 0:
        return float(mu), 0.0, float("nan"), float("nan")
    sd = math.sqrt(var)
    return (float(mu), sd, float(np.mean(d ** 3) / sd ** 3),
            float(np.mean(d ** 4) / var ** 2 - 3.0))


def weight_gaussianity(net: Network) -> list[LayerMoments]:
    """Sample moments of each weight matrix holding at least 16 entries."""
    out = []
    last = len(net.weights) - 1
    for i, W in enumerate(net.weights):
        if W.size < 16:
            continue
        mu, sd, sk, ku = moments(W)
        out.append(LayerMoments(i, 0 < i < last, W.size, mu, sd, sk, ku, sd == 0))
    return out
