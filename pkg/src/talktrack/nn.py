"""Minimal feed-forward network with exact manual backpropagation.

tanh hidden layers, linear output head, float64 everywhere. Backs the
Q-network, policy, value, and reward-model heads. Gradients are written out
by hand and validated against central finite differences in tests, so this
module has no autodiff dependency.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DivergenceError


class Mlp:
    def __init__(self, layer_dims: Sequence[int], weights=None, biases=None):
        layer_dims = tuple(int(d) for d in layer_dims)
        if len(layer_dims) < 2:
            raise ValueError("need at least input and output dimensions")
        if any(d < 1 for d in layer_dims):
            raise ValueError(f"layer dims must be positive, got {layer_dims}")
        self.layer_dims = layer_dims
        if weights is None:
            self.weights = [
                np.zeros((layer_dims[i + 1], layer_dims[i])) for i in range(len(layer_dims) - 1)
            ]
            self.biases = [np.zeros(layer_dims[i + 1]) for i in range(len(layer_dims) - 1)]
        else:
            self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
            self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
            for i, (w, b) in enumerate(zip(self.weights, self.biases)):
                if w.shape != (layer_dims[i + 1], layer_dims[i]) or b.shape != (layer_dims[i + 1],):
                    raise ValueError(f"parameter shapes inconsistent with dims at layer {i}")
        for w in self.weights + self.biases:
            if not np.all(np.isfinite(w)):
                raise ValueError("network parameters must be finite")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "Mlp":
        return Mlp(
            self.layer_dims,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
        )

    def to_dict(self) -> dict:
        return {
            "layer_dims": list(self.layer_dims),
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "Mlp":
        return cls(payload["layer_dims"], payload["weights"], payload["biases"])

    # -- flat parameter view, used by finite-difference checks ---------------

    def get_flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b.ravel())
        return np.concatenate(parts)

    def set_flat(self, flat: np.ndarray) -> None:
        pos = 0
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[i] = flat[pos : pos + w.size].reshape(w.shape).copy()
            pos += w.size
            self.biases[i] = flat[pos : pos + b.size].copy()
            pos += b.size
        if pos != flat.size:
            raise ValueError("flat parameter vector has the wrong length")


def init_mlp(layer_dims: Sequence[int], rng: np.random.Generator) -> Mlp:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init, deterministic per rng."""
    net = Mlp(layer_dims)
    for i in range(net.n_layers):
        fan_in = net.layer_dims[i]
        bound = 1.0 / np.sqrt(fan_in)
        net.weights[i] = rng.uniform(-bound, bound, size=net.weights[i].shape)
        net.biases[i] = rng.uniform(-bound, bound, size=net.biases[i].shape)
    return net


def forward(net: Mlp, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Batched forward pass.

    x: (n, in_dim) or (in_dim,). Returns (output, cache) where cache holds
    the input and every post-activation, as needed by :func:`backward`.
    """
    squeeze = x.ndim == 1
    a = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if a.shape[1] != net.layer_dims[0]:
        raise ValueError(f"input dim {a.shape[1]} != network input {net.layer_dims[0]}")
    cache = [a]
    for i in range(net.n_layers):
        z = a @ net.weights[i].T + net.biases[i]
        a = np.tanh(z) if i < net.n_layers - 1 else z
        cache.append(a)
    out = cache[-1]
    return (out[0] if squeeze else out), cache


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __iadd__(self, other: "Gradients") -> "Gradients":
        for i in range(len(self.weights)):
            self.weights[i] += other.weights[i]
            self.biases[i] += other.biases[i]
        return self

    def scale(self, factor: float) -> "Gradients":
        for i in range(len(self.weights)):
            self.weights[i] *= factor
            self.biases[i] *= factor
        return self

    def flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b.ravel())
        return np.concatenate(parts)


def backward(net: Mlp, cache: list[np.ndarray], grad_output: np.ndarray) -> Gradients:
    """Exact parameter gradients for the forward pass held in ``cache``.

    grad_output is dL/d(output), shape (n, out_dim) or (out_dim,); gradients
    are summed over the batch, so pre-scale grad_output for a mean loss.
    """
    grad = np.atleast_2d(np.asarray(grad_output, dtype=np.float64))
    if grad.shape != cache[-1].shape:
        raise ValueError(f"grad_output shape {grad.shape} != output shape {cache[-1].shape}")
    g_w = [None] * net.n_layers
    g_b = [None] * net.n_layers
    for i in range(net.n_layers - 1, -1, -1):
        a_prev = cache[i]
        g_w[i] = grad.T @ a_prev
        g_b[i] = grad.sum(axis=0)
        if i > 0:
            grad = grad @ net.weights[i]
            grad = grad * (1.0 - cache[i] ** 2)  # tanh'(z) = 1 - tanh(z)^2
    return Gradients(weights=g_w, biases=g_b)


def masked_log_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Log-softmax restricted to mask==True entries; blocked entries -> -inf.

    Accepts (K,) or (n, K); the mask must have the same shape and at least
    one True per row.
    """
    logits = np.asarray(logits, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if logits.shape != mask.shape:
        raise ValueError("logits and mask shapes differ")
    neg = np.where(mask, logits, -np.inf)
    top = neg.max(axis=-1, keepdims=True)
    shifted = neg - top
    with np.errstate(invalid="ignore"):
        log_norm = np.log(np.exp(np.where(mask, shifted, -np.inf)).sum(axis=-1, keepdims=True))
    return np.where(mask, shifted - log_norm, -np.inf)


def masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    log_p = masked_log_softmax(logits, mask)
    return np.where(np.asarray(mask, dtype=bool), np.exp(log_p), 0.0)


@dataclass
class OptimizerState:
    """SGD or Adam (bias-corrected) over an Mlp's parameters."""

    kind: str
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")


def make_optimizer(kind: str, learning_rate: float) -> OptimizerState:
    return OptimizerState(kind=kind, learning_rate=learning_rate)


def optimizer_step(net: Mlp, grads: Gradients, state: OptimizerState) -> None:
    """One in-place descent step. Raises DivergenceError on non-finite grads."""
    flats = grads.weights + grads.biases
    for g in flats:
        if not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient encountered")
    params = net.weights + net.biases
    if state.kind == "sgd":
        for p, g in zip(params, flats):
            p -= state.learning_rate * g
        state.step_count += 1
        return
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, flats, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
