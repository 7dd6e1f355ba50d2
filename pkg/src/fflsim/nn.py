"""Dense feed-forward network with manual backpropagation.

All tensors are float64 numpy arrays in C order.  A ParameterSet holds the
per-layer weight matrices (fan_in x fan_out) and bias vectors; gradients
reuse the same layered container, so flatten()/from_flat() round-trip
exactly and layer blocks keep stable offsets in the flat vector.  Every
operation here is pure: inputs are never mutated and randomness only enters
through explicit generators.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import Dataset, MiniBatch, Shard, sample_minibatch
from .errors import ConfigError

ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class MlpSpec:
    """Architecture: layer sizes from input to logits plus the hidden activation."""

    layer_sizes: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self) -> None:
        object.__setattr__(self, "layer_sizes", tuple(int(n) for n in self.layer_sizes))
        if len(self.layer_sizes) < 2:
            raise ValueError("layer_sizes needs at least an input and an output entry")
        if any(n < 1 for n in self.layer_sizes):
            raise ValueError(f"all layer sizes must be >= 1, got {self.layer_sizes}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")


@dataclass
class ParameterSet:
    """Per-layer weights and biases; also the container for gradients."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "relu"

    @property
    def dim(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "ParameterSet":
        return ParameterSet(
            [w.copy() for w in self.weights], [b.copy() for b in self.biases], self.activation
        )

    def flatten(self) -> np.ndarray:
        """Flat float64 vector in block order W0, b0, W1, b1, ..."""
        parts: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b.ravel())
        return np.concatenate(parts)

    def from_flat(self, vec: np.ndarray) -> "ParameterSet":
        """Inverse of flatten() for any vector congruent with this layout."""
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.dim,):
            raise ValueError(f"expected a flat vector of length {self.dim}, got shape {vec.shape}")
        weights, biases = [], []
        pos = 0
        for w, b in zip(self.weights, self.biases):
            weights.append(vec[pos : pos + w.size].reshape(w.shape).copy())
            pos += w.size
            biases.append(vec[pos : pos + b.size].copy())
            pos += b.size
        return ParameterSet(weights, biases, self.activation)

    def blocks(self) -> list[tuple[int, np.ndarray]]:
        """(flat offset, array) per block in flatten() order."""
        out, pos = [], 0
        for w, b in zip(self.weights, self.biases):
            out.append((pos, w))
            pos += w.size
            out.append((pos, b))
            pos += b.size
        return out


# Gradients share the layered parameter container.
GradientBundle = ParameterSet


def zeros_like(params: ParameterSet) -> GradientBundle:
    return ParameterSet(
        [np.zeros_like(w) for w in params.weights],
        [np.zeros_like(b) for b in params.biases],
        params.activation,
    )


def init_params(spec: MlpSpec, rng: np.random.Generator) -> ParameterSet:
    """Uniform +-sqrt(6 / (fan_in + fan_out)) weights, zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return ParameterSet(weights, biases, spec.activation)


def _require_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"non-finite values in {what}")


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _check_batch(params: ParameterSet, batch: MiniBatch) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(batch.features, dtype=np.float64)
    y = np.asarray(batch.labels, dtype=np.int64)
    if x.ndim != 2 or x.shape[1] != params.weights[0].shape[0]:
        raise ConfigError(
            f"batch features have shape {x.shape}, expected (*, {params.weights[0].shape[0]})"
        )
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    classes = params.weights[-1].shape[1]
    if y.min() < 0 or y.max() >= classes:
        raise ValueError(f"labels outside [0, {classes})")
    return x, y


def forward(params: ParameterSet, batch: MiniBatch) -> np.ndarray:
    """Logits (batch x classes); raw affine output, no softmax applied."""
    x = np.asarray(batch.features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.weights[0].shape[0]:
        raise ConfigError(
            f"batch features have shape {x.shape}, expected (*, {params.weights[0].shape[0]})"
        )
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    h = x
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        h = _activate(h @ w + b, params.activation)
    logits = h @ params.weights[-1] + params.biases[-1]
    _require_finite(logits, "logits")
    return logits


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits.

    Stabilized with the log-sum-exp shift so large logits cannot overflow.
    """
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_probs = z - log_norm
    n = len(labels)
    rows = np.arange(n)
    loss = float(-log_probs[rows, labels].mean())
    dlogits = np.exp(log_probs)
    dlogits[rows, labels] -= 1.0
    dlogits /= n
    return loss, dlogits


def loss_and_grad(params: ParameterSet, batch: MiniBatch) -> tuple[float, GradientBundle]:
    """Mean softmax cross-entropy and its exact gradient via backprop."""
    x, y = _check_batch(params, batch)
    n_layers = params.n_layers
    acts = [x]
    pre: list[np.ndarray] = []
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        z = acts[-1] @ w + b
        pre.append(z)
        acts.append(_activate(z, params.activation))
    logits = acts[-1] @ params.weights[-1] + params.biases[-1]
    _require_finite(logits, "logits")
    loss, delta = softmax_cross_entropy(logits, y)
    g_w: list[np.ndarray] = [np.empty(0)] * n_layers
    g_b: list[np.ndarray] = [np.empty(0)] * n_layers
    g_w[-1] = acts[-1].T @ delta
    g_b[-1] = delta.sum(axis=0)
    upstream = delta @ params.weights[-1].T
    for layer in range(n_layers - 2, -1, -1):
        if params.activation == "relu":
            dz = upstream * (pre[layer] > 0.0)
        else:
            a = acts[layer + 1]
            dz = upstream * (1.0 - a * a)
        g_w[layer] = acts[layer].T @ dz
        g_b[layer] = dz.sum(axis=0)
        if layer > 0:
            upstream = dz @ params.weights[layer].T
    grad = GradientBundle(g_w, g_b, params.activation)
    _require_finite(grad.flatten(), "gradient")
    return loss, grad


def sgd_step(
    params: ParameterSet,
    grad: GradientBundle,
    eta: float,
    momentum: float = 0.0,
    velocity: GradientBundle | None = None,
) -> tuple[ParameterSet, GradientBundle]:
    """One SGD step: v <- momentum * v + grad; params <- params - eta * v.

    With momentum 0 this is exactly params - eta * grad.  Returns the new
    parameters and the new velocity; inputs are left untouched.
    """
    if eta <= 0:
        raise ValueError(f"eta must be > 0, got {eta}")
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must be in [0, 1), got {momentum}")
    if velocity is None:
        velocity = zeros_like(params)
    new_v_w = [momentum * v + g for v, g in zip(velocity.weights, grad.weights)]
    new_v_b = [momentum * v + g for v, g in zip(velocity.biases, grad.biases)]
    new_w = [w - eta * v for w, v in zip(params.weights, new_v_w)]
    new_b = [b - eta * v for b, v in zip(params.biases, new_v_b)]
    return (
        ParameterSet(new_w, new_b, params.activation),
        GradientBundle(new_v_w, new_v_b, params.activation),
    )


def local_update_run(
    params: ParameterSet,
    ds: Dataset,
    shard: Shard,
    tau: int,
    eta: float,
    batch_size: int,
    rng: np.random.Generator,
    momentum: float = 0.0,
) -> tuple[ParameterSet, GradientBundle, list[float]]:
    """Run tau local SGD steps on one worker's shard.

    Returns (final parameters, aggregated gradient, per-step losses).  The
    aggregated gradient is the plain sum of the per-step mini-batch gradients,
    so with momentum 0 it equals (start - final) / eta coordinate-wise.
    """
    if tau < 1:
        raise ValueError(f"tau must be >= 1, got {tau}")
    current = params
    velocity: GradientBundle | None = None
    g_sum = zeros_like(params)
    losses: list[float] = []
    for _ in range(tau):
        mb = sample_minibatch(shard, ds, batch_size, rng)
        loss, grad = loss_and_grad(current, mb)
        losses.append(loss)
        for acc, g in zip(g_sum.weights, grad.weights):
            acc += g
        for acc, g in zip(g_sum.biases, grad.biases):
            acc += g
        current, velocity = sgd_step(current, grad, eta, momentum, velocity)
    return current, g_sum, losses
