"""Minimal dense network engine: layers with hand-written backward passes,
softmax/cross-entropy, Adam and a seeded minibatch training loop.

Arrays are plain ``numpy.ndarray`` in float64. A batch is ``(B, D)``; a dense
weight matrix is ``(out, in)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

PROB_FLOOR = 1e-12


class ShapeError(ValueError):
    """Array dimensions do not chain."""


class DomainError(ValueError):
    """Argument outside the domain of an operation."""


class TrainingError(RuntimeError):
    """Non-finite gradient encountered during an update."""

    def __init__(self, layer_index: int, message: str = ""):
        self.layer_index = layer_index
        super().__init__(message or f"non-finite gradient in layer {layer_index}")


# ---------------------------------------------------------------------------
# Activations and losses
# ---------------------------------------------------------------------------


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-shifted softmax along ``axis``."""
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def _check_labels(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise DomainError(f"labels must lie in [0, {n_classes})")
    return labels.astype(np.int64, copy=False)


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-likelihood of ``labels`` under row-wise ``probs``."""
    probs = np.asarray(probs, dtype=float)
    labels = _check_labels(labels, probs.shape[1])
    picked = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(picked, PROB_FLOOR))))


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray, rng=None):
    """Cross-entropy on logits. Returns ``(loss, dloss/dlogits)``."""
    labels = _check_labels(labels, logits.shape[1])
    n = len(labels)
    logp = log_softmax(logits)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return float(loss), grad / n


LossFn = Callable[[np.ndarray, np.ndarray, "np.random.Generator | None"], tuple]


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


class Module:
    """Base for layers. ``params``/``grads`` map names to arrays."""

    params: dict
    grads: dict

    def __init__(self):
        self.params = {}
        self.grads = {}

    def forward(self, x: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def penalty(self, weight: float) -> float:
        """Add ``weight * d(penalty)`` into ``grads`` and return the penalty."""
        return 0.0


class DenseLayer(Module):
    """Affine map followed by ``relu`` or ``linear`` activation."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray, activation: str = "relu"):
        super().__init__()
        weight = np.asarray(weight, dtype=float)
        bias = np.asarray(bias, dtype=float)
        if weight.ndim != 2 or bias.shape != (weight.shape[0],):
            raise ShapeError(f"weight {weight.shape} and bias {bias.shape} are inconsistent")
        if activation not in ("relu", "linear"):
            raise ValueError(f"unknown activation {activation!r}")
        self.params = {"weight": weight, "bias": bias}
        self.activation = activation
        self._x = None

    @property
    def in_features(self) -> int:
        return self.params["weight"].shape[1]

    @property
    def out_features(self) -> int:
        return self.params["weight"].shape[0]

    @classmethod
    def init(cls, n_in: int, n_out: int, activation: str, rng: np.random.Generator) -> "DenseLayer":
        if activation == "relu":
            std = np.sqrt(2.0 / n_in)
        else:
            std = np.sqrt(2.0 / (n_in + n_out))
        return cls(rng.normal(0.0, std, size=(n_out, n_in)), np.zeros(n_out), activation)

    def effective_weight(self, rng) -> np.ndarray:
        return self.params["weight"]

    def forward(self, x, rng=None):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"expected (B, {self.in_features}) input, got {x.shape}")
        self._x = x
        self._w = self.effective_weight(rng)
        out = x @ self._w.T + self.params["bias"]
        if self.activation == "relu":
            self._active = out > 0
            out = out * self._active
        return out

    def _pre_activation_grad(self, grad):
        if self.activation == "relu":
            grad = grad * self._active
        return grad

    def backward(self, grad):
        grad = self._pre_activation_grad(grad)
        self.grads = {"weight": grad.T @ self._x, "bias": grad.sum(axis=0)}
        return grad @ self._w


class Mlp:
    """A chain of modules whose final width equals the head width."""

    def __init__(self, layers: list[Module], class_count: int):
        self.layers = list(layers)
        self.class_count = class_count
        widths = [l.out_features for l in self._affine()]
        ins = [l.in_features for l in self._affine()]
        for a, b in zip(widths[:-1], ins[1:]):
            if a != b:
                raise ShapeError(f"layer widths do not chain: {a} -> {b}")

    def _affine(self) -> list[Module]:
        return [l for l in self.layers if hasattr(l, "in_features")]

    @classmethod
    def build(cls, sizes: list[int], rng: np.random.Generator, class_count: int | None = None) -> "Mlp":
        """Dense relu stack over ``sizes`` with a linear output layer."""
        layers = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            act = "linear" if i == len(sizes) - 2 else "relu"
            layers.append(DenseLayer.init(a, b, act, rng))
        return cls(layers, class_count if class_count is not None else sizes[-1])

    @property
    def input_width(self) -> int:
        return self._affine()[0].in_features

    @property
    def output_width(self) -> int:
        return self._affine()[-1].out_features

    def forward(self, x: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.input_width:
            raise ShapeError(f"expected (B, {self.input_width}) batch, got {x.shape}")
        for layer in self.layers:
            x = layer.forward(x, rng)
        return x

    __call__ = forward

    def backward(self, grad: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def penalty(self, weight: float) -> float:
        return sum(layer.penalty(weight) for layer in self.layers)

    def named_parameters(self) -> Iterator[tuple[str, Module, str]]:
        for i, layer in enumerate(self.layers):
            for key in layer.params:
                yield f"layer{i}.{key}", layer, key

    def parameter_count(self) -> int:
        return sum(layer.params[k].size for _, layer, k in self.named_parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: layer.params[k].copy() for name, layer, k in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, layer, k in self.named_parameters():
            value = np.asarray(state[name], dtype=float)
            if value.shape != layer.params[k].shape:
                raise ShapeError(f"{name}: expected {layer.params[k].shape}, got {value.shape}")
            layer.params[k] = value.copy()


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0

    def __post_init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def update(self, mlp: Mlp) -> None:
        self.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step
        c2 = 1.0 - b2**self.step
        # bias corrections folded into the step size and epsilon
        lr = self.learning_rate * np.sqrt(c2) / c1
        eps = self.epsilon * np.sqrt(c2)
        for name, layer, key in mlp.named_parameters():
            g = layer.grads[key]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m += (1.0 - b1) * (g - m)
            v += (1.0 - b2) * (g * g - v)
            layer.params[key] = layer.params[key] - lr * m / (np.sqrt(v) + eps)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


def backward_step(
    mlp: Mlp,
    batch: np.ndarray,
    labels: np.ndarray,
    adam: AdamState,
    rng: np.random.Generator | None = None,
    loss_fn: LossFn = softmax_cross_entropy,
    penalty_weight: float = 0.0,
) -> float:
    """One Adam step on ``loss_fn`` (+ ``penalty_weight`` x layer penalties).

    Returns the loss evaluated before the update.
    """
    out = mlp.forward(batch, rng)
    loss, grad = loss_fn(out, labels, rng)
    mlp.backward(grad)
    if penalty_weight:
        loss += penalty_weight * mlp.penalty(penalty_weight)
    for i, layer in enumerate(mlp.layers):
        # a NaN or inf anywhere poisons the sum
        if not math.isfinite(sum(float(g.sum()) for g in layer.grads.values())):
            raise TrainingError(i)
    adam.update(mlp)
    return float(loss)


def fit(
    mlp: Mlp,
    x: np.ndarray,
    y: np.ndarray,
    config: TrainConfig,
    loss_fn: LossFn = softmax_cross_entropy,
    penalty_weight: float = 0.0,
    rng: np.random.Generator | None = None,
) -> list[float]:
    """Minibatch Adam over shuffled epochs; the last partial batch is kept.

    ``rng`` drives both the shuffling and any stochastic layers; it defaults to
    a generator seeded with ``config.seed``. Returns the mean loss per epoch.
    """
    rng = np.random.default_rng(config.seed) if rng is None else rng
    adam = AdamState(learning_rate=config.learning_rate)
    n = len(x)
    history = []
    for _ in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            total += backward_step(mlp, x[idx], y[idx], adam, rng, loss_fn, penalty_weight) * len(idx)
        history.append(total / n)
    return history


def accuracy(logits_or_probs: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits_or_probs, axis=1) == np.asarray(labels)))
