"""Stochastic approximations of a parameter posterior built on ``core``.

Four variants turn a dense network into a sampler over weights:

``mc_dropout``      Bernoulli node masks after the chosen hidden layers.
``mc_dropconnect``  Bernoulli weight masks on the dense maps entering and
                    leaving the chosen hidden layers.
``flipout``         the last chosen hidden layer gets Gaussian weights with
                    sign-flipped per-example perturbations and a scale-mixture
                    prior.
``deep_ensemble``   k independently initialised networks.

Masks are active during training and prediction alike, with inverted
``1/(1-p)`` scaling. Passing ``rng=None`` to a forward call switches every
stochastic component off (masks disabled, Flipout mean path).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    AdamState,
    DenseLayer,
    Mlp,
    Module,
    ShapeError,
    TrainConfig,
    TrainingError,
    fit,
    sigmoid,
    softmax_cross_entropy,
    softplus,
)
from .disentangle import VAR_FLOOR, GaussianLogitLoss, gl_nll

VARIANTS = ("mc_dropout", "mc_dropconnect", "flipout", "deep_ensemble")
HEADS = ("softmax", "gaussian")
CHECKPOINT_MAGIC = "UQBENCH-CHECKPOINT"
CHECKPOINT_VERSION = 1

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


class ModelStateError(RuntimeError):
    """Prediction requested from a model that was never trained."""


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Stochastic layers
# ---------------------------------------------------------------------------


class Dropout(Module):
    def __init__(self, p: float):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError("dropout p must lie in [0, 1)")
        self.p = p
        self._mask = None

    def forward(self, x, rng=None):
        if rng is None or self.p == 0.0:
            self._mask = None
            return x
        self._mask = (rng.random(x.shape) >= self.p) / (1.0 - self.p)
        return x * self._mask

    def backward(self, grad):
        self.grads = {}
        return grad if self._mask is None else grad * self._mask


class DropConnectDense(DenseLayer):
    """Dense layer whose individual weights are dropped, one mask per batch."""

    def __init__(self, weight, bias, activation="relu", p: float = 0.3):
        super().__init__(weight, bias, activation)
        if not 0.0 <= p < 1.0:
            raise ValueError("dropconnect p must lie in [0, 1)")
        self.p = p
        self._wmask = None

    def sample_mask(self, rng: np.random.Generator) -> np.ndarray:
        return (rng.random(self.params["weight"].shape) >= self.p) / (1.0 - self.p)

    def effective_weight(self, rng):
        if rng is None or self.p == 0.0:
            self._wmask = None
            return self.params["weight"]
        self._wmask = self.sample_mask(rng)
        return self.params["weight"] * self._wmask

    def backward(self, grad):
        grad_in = super().backward(grad)
        if self._wmask is not None:
            self.grads["weight"] = self.grads["weight"] * self._wmask
        return grad_in


@dataclass(frozen=True)
class ScaleMixturePrior:
    """``(1 - pi) N(0, sigma1^2) + pi N(0, sigma2^2)``."""

    sigma1: float = 5.0
    sigma2: float = 2.0
    pi: float = 0.5

    def __post_init__(self):
        if self.sigma1 <= 0 or self.sigma2 <= 0 or not 0.0 <= self.pi <= 1.0:
            raise ValueError("invalid scale-mixture prior")

    def _component_logs(self, w):
        with np.errstate(divide="ignore"):
            l1 = np.log1p(-self.pi) - _LOG_SQRT_2PI - np.log(self.sigma1) - 0.5 * (w / self.sigma1) ** 2
            l2 = np.log(self.pi) - _LOG_SQRT_2PI - np.log(self.sigma2) - 0.5 * (w / self.sigma2) ** 2
        return l1, l2

    def log_prob(self, w: np.ndarray) -> np.ndarray:
        l1, l2 = self._component_logs(w)
        return np.logaddexp(l1, l2)

    def grad_log_prob(self, w: np.ndarray) -> np.ndarray:
        l1, l2 = self._component_logs(w)
        r1 = np.exp(l1 - np.logaddexp(l1, l2))
        return -w * (r1 / self.sigma1**2 + (1.0 - r1) / self.sigma2**2)


def gaussian_log_prob(w, mean, sd):
    return -_LOG_SQRT_2PI - np.log(sd) - 0.5 * ((w - mean) / sd) ** 2


class FlipoutLayer(Module):
    """Mean-field Gaussian dense layer with Flipout perturbations.

    ``std = softplus(rho)``. Within a batch all examples share one Gaussian draw
    ``dW = std * eps`` but each example ``n`` sees ``dW * (r_n s_n^T)`` with
    independent random sign vectors, so perturbations decorrelate across the
    batch. The bias uses the plain reparameterisation.
    """

    def __init__(
        self,
        weight_mean,
        weight_rho,
        bias_mean,
        bias_rho,
        activation: str = "relu",
        prior: ScaleMixturePrior = ScaleMixturePrior(),
    ):
        super().__init__()
        self.params = {
            "weight_mean": np.asarray(weight_mean, dtype=float),
            "weight_rho": np.asarray(weight_rho, dtype=float),
            "bias_mean": np.asarray(bias_mean, dtype=float),
            "bias_rho": np.asarray(bias_rho, dtype=float),
        }
        out, n_in = self.params["weight_mean"].shape
        if self.params["weight_rho"].shape != (out, n_in) or self.params["bias_mean"].shape != (out,):
            raise ShapeError("flipout parameter shapes are inconsistent")
        self.activation = activation
        self.prior = prior
        self._eps_w = None
        self._eps_b = None

    @classmethod
    def init(cls, n_in, n_out, rng, activation="relu", rho=-5.0, prior=ScaleMixturePrior()):
        std = np.sqrt(2.0 / n_in) if activation == "relu" else np.sqrt(2.0 / (n_in + n_out))
        return cls(
            rng.normal(0.0, std, size=(n_out, n_in)),
            np.full((n_out, n_in), rho),
            np.zeros(n_out),
            np.full(n_out, rho),
            activation,
            prior,
        )

    in_features = property(lambda self: self.params["weight_mean"].shape[1])
    out_features = property(lambda self: self.params["weight_mean"].shape[0])

    def forward(self, x, rng=None):
        p = self.params
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"expected (B, {self.in_features}) input, got {x.shape}")
        self._x = x
        out = x @ p["weight_mean"].T + p["bias_mean"]
        if rng is None:
            self._eps_w = self._eps_b = None
        else:
            b = len(x)
            self._eps_w = rng.standard_normal(p["weight_mean"].shape)
            self._eps_b = rng.standard_normal(p["bias_mean"].shape)
            self._s = rng.integers(0, 2, size=(b, self.in_features)) * 2.0 - 1.0
            self._r = rng.integers(0, 2, size=(b, self.out_features)) * 2.0 - 1.0
            self._dw = softplus(p["weight_rho"]) * self._eps_w
            out = out + ((x * self._s) @ self._dw.T) * self._r + softplus(p["bias_rho"]) * self._eps_b
        if self.activation == "relu":
            self._active = out > 0
            out = np.where(self._active, out, 0.0)
        return out

    def backward(self, grad):
        p = self.params
        if self.activation == "relu":
            grad = np.where(self._active, grad, 0.0)
        g_wm = grad.T @ self._x
        g_bm = grad.sum(axis=0)
        grad_in = grad @ p["weight_mean"]
        if self._eps_w is None:
            g_wr = np.zeros_like(g_wm)
            g_br = np.zeros_like(g_bm)
        else:
            gr = grad * self._r
            g_dw = gr.T @ (self._x * self._s)
            g_wr = g_dw * self._eps_w * sigmoid(p["weight_rho"])
            g_br = g_bm * self._eps_b * sigmoid(p["bias_rho"])
            grad_in = grad_in + (gr @ self._dw) * self._s
        self.grads = {"weight_mean": g_wm, "weight_rho": g_wr, "bias_mean": g_bm, "bias_rho": g_br}
        return grad_in

    def _kl_terms(self, eps_w, eps_b):
        """Single-draw ``log q(w) - log prior(w)`` and its gradients."""
        total = 0.0
        grads = {}
        for kind, eps in (("weight", eps_w), ("bias", eps_b)):
            mean, rho = self.params[f"{kind}_mean"], self.params[f"{kind}_rho"]
            sd = softplus(rho)
            w = mean + sd * eps
            total += float(np.sum(-_LOG_SQRT_2PI - np.log(sd) - 0.5 * eps**2 - self.prior.log_prob(w)))
            dlogp = self.prior.grad_log_prob(w)
            grads[f"{kind}_mean"] = -dlogp
            grads[f"{kind}_rho"] = (-1.0 / sd - dlogp * eps) * sigmoid(rho)
        return total, grads

    def penalty(self, weight):
        if self._eps_w is None:
            eps_w = np.zeros_like(self.params["weight_mean"])
            eps_b = np.zeros_like(self.params["bias_mean"])
        else:
            eps_w, eps_b = self._eps_w, self._eps_b
        value, grads = self._kl_terms(eps_w, eps_b)
        for k, g in grads.items():
            self.grads[k] = self.grads[k] + weight * g
        return value


def flipout_forward(layer: FlipoutLayer, batch: np.ndarray, rng: np.random.Generator | None) -> np.ndarray:
    return layer.forward(np.asarray(batch, dtype=float), rng)


def flipout_kl(layer: FlipoutLayer, rng: np.random.Generator, samples: int = 1) -> float:
    """Monte-Carlo ``KL(q || prior)`` averaged over ``samples`` weight draws."""
    shape_w = layer.params["weight_mean"].shape
    shape_b = layer.params["bias_mean"].shape
    values = [
        layer._kl_terms(rng.standard_normal(shape_w), rng.standard_normal(shape_b))[0] for _ in range(samples)
    ]
    return float(np.mean(values))


# ---------------------------------------------------------------------------
# Model assembly
# ---------------------------------------------------------------------------


@dataclass
class ModelSpec:
    """Architecture and posterior approximation.

    ``sizes`` runs from input width through the hidden widths to the class
    count. ``bayes_hidden`` lists the hidden layers (0-based) that carry the
    stochasticity; Flipout only ever replaces the last of them.
    """

    variant: str
    sizes: list[int]
    head: str = "softmax"
    p: float = 0.3
    ensemble_size: int = 10
    passes: int = 50
    bayes_hidden: tuple[int, ...] | None = None
    flipout_epoch_factor: int = 5
    gl_train_draws: int = 32

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        if not 0.0 <= self.p < 1.0 or self.ensemble_size < 1 or self.passes < 1:
            raise ValueError("need p in [0,1), ensemble_size >= 1, passes >= 1")
        self.sizes = [int(s) for s in self.sizes]
        hidden = len(self.sizes) - 2
        if hidden < 1:
            raise ValueError("need at least one hidden layer")
        if self.bayes_hidden is None:
            self.bayes_hidden = (hidden - 1,)
        self.bayes_hidden = tuple(int(i) for i in self.bayes_hidden)
        if any(not 0 <= i < hidden for i in self.bayes_hidden):
            raise ValueError("bayes_hidden indices out of range")

    @property
    def class_count(self) -> int:
        return self.sizes[-1]

    @property
    def head_width(self) -> int:
        return self.class_count * (2 if self.head == "gaussian" else 1)


def build_network(spec: ModelSpec, rng: np.random.Generator) -> Mlp:
    sizes = spec.sizes[:-1] + [spec.head_width]
    n_dense = len(sizes) - 1
    dropconnect = set()
    if spec.variant == "mc_dropconnect":
        for h in spec.bayes_hidden:
            dropconnect.update((h, h + 1))
    flip = max(spec.bayes_hidden) if spec.variant == "flipout" else None
    layers: list[Module] = []
    for i in range(n_dense):
        act = "linear" if i == n_dense - 1 else "relu"
        if i == flip:
            layers.append(FlipoutLayer.init(sizes[i], sizes[i + 1], rng, act))
        elif i in dropconnect:
            base = DenseLayer.init(sizes[i], sizes[i + 1], act, rng)
            layers.append(DropConnectDense(base.params["weight"], base.params["bias"], act, spec.p))
        else:
            layers.append(DenseLayer.init(sizes[i], sizes[i + 1], act, rng))
        if spec.variant == "mc_dropout" and i in spec.bayes_hidden:
            layers.append(Dropout(spec.p))
    return Mlp(layers, spec.class_count)


@dataclass
class StochasticModel:
    spec: ModelSpec
    members: list[Mlp]
    trained: bool = False
    history: list[list[float]] = field(default_factory=list)

    @property
    def is_ensemble(self) -> bool:
        return self.spec.variant == "deep_ensemble"

    def sample_forward(self, batch: np.ndarray, rng: np.random.Generator, pass_index: int = 0) -> np.ndarray:
        """One stochastic pass: raw head outputs of shape (B, head_width)."""
        if not self.trained:
            raise ModelStateError("model has not been trained")
        if self.is_ensemble:
            return self.members[pass_index % len(self.members)].forward(batch, None)
        return self.members[0].forward(batch, rng)

    def predict_T(
        self, batch: np.ndarray, passes: int | None = None, rng: np.random.Generator | int | None = None
    ) -> np.ndarray:
        """Stack of stochastic passes, shape (T, B, head_width).

        Ensembles always contribute one pass per member.
        """
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        batch = np.asarray(batch, dtype=float)
        t = len(self.members) if self.is_ensemble else (passes or self.spec.passes)
        if t < 1:
            raise ValueError("need at least one pass")
        return np.stack([self.sample_forward(batch, rng, i) for i in range(t)])

    def deterministic_forward(self, batch: np.ndarray) -> np.ndarray:
        return self.members[0].forward(np.asarray(batch, dtype=float), None)


def build_model(spec: ModelSpec, seed: int) -> StochasticModel:
    k = spec.ensemble_size if spec.variant == "deep_ensemble" else 1
    children = np.random.SeedSequence([seed, 0x1A17]).spawn(k)
    return StochasticModel(spec, [build_network(spec, np.random.default_rng(c)) for c in children])


def training_epochs(spec: ModelSpec, base_epochs: int) -> int:
    return base_epochs * (spec.flipout_epoch_factor if spec.variant == "flipout" else 1)


def train_stochastic(model: StochasticModel, x: np.ndarray, y: np.ndarray, config: TrainConfig) -> StochasticModel:
    """Train in place (masks active); Flipout adds ``KL / n_train`` per step.

    Ensemble members train side by side as one stacked network (see
    ``fit_stacked``); every member still owns its generator, so the result
    matches training them one after another up to float rounding.
    """
    spec = model.spec
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    epochs = training_epochs(spec, config.epochs)
    children = np.random.SeedSequence([config.seed, 0x7EA1]).spawn(len(model.members))
    rngs = [np.random.default_rng(c) for c in children]
    cfg = TrainConfig(epochs, config.batch_size, config.learning_rate, config.seed)
    if model.is_ensemble and len(model.members) > 1:
        model.history = fit_stacked(model.members, x, y, cfg, rngs, spec.gl_train_draws if spec.head == "gaussian" else 0)
    else:
        loss_fn = GaussianLogitLoss(spec.gl_train_draws) if spec.head == "gaussian" else softmax_cross_entropy
        penalty = 1.0 / len(x) if spec.variant == "flipout" else 0.0
        model.history = [fit(m, x, y, cfg, loss_fn, penalty, r) for m, r in zip(model.members, rngs)]
    model.trained = True
    return model


def fit_stacked(
    members: list[Mlp], x: np.ndarray, y: np.ndarray, config: TrainConfig, rngs: list, gl_draws: int = 0
) -> list[list[float]]:
    """Adam on k same-shaped dense networks at once.

    Each step member ``j`` sees the batch its own generator picked, exactly as
    ``fit`` would. ``gl_draws > 0`` trains a Gaussian-logit head with that many
    sampled-softmax draws; otherwise softmax cross-entropy. Returns per-member
    mean loss per epoch.
    """
    layers = [m.layers for m in members]
    if any(type(l) is not DenseLayer for ls in layers for l in ls):
        raise TypeError("fit_stacked handles plain dense stacks only")
    k, n = len(members), len(x)
    depth = len(layers[0])
    acts = [l.activation for l in layers[0]]
    w = [np.stack([ls[i].params["weight"] for ls in layers]) for i in range(depth)]
    b = [np.stack([ls[i].params["bias"] for ls in layers]) for i in range(depth)]
    shim = Mlp([DenseLayer(wi[0], bi[0], a) for wi, bi, a in zip(w, b, acts)], members[0].class_count)
    adam = AdamState(learning_rate=config.learning_rate)
    history = [[] for _ in range(k)]
    for _ in range(config.epochs):
        order = np.stack([r.permutation(n) for r in rngs])
        total = np.zeros(k)
        for start in range(0, n, config.batch_size):
            idx = order[:, start : start + config.batch_size]
            bs = idx.shape[1]
            h = x[idx]
            inputs, active = [], []
            for i in range(depth):
                inputs.append(h)
                h = np.matmul(h, w[i].transpose(0, 2, 1)) + b[i][:, None, :]
                if acts[i] == "relu":
                    active.append(h > 0)
                    h = h * active[-1]
                else:
                    active.append(None)
            labels = y[idx]
            if gl_draws:
                c = h.shape[-1] // 2
                mu, rho = h[..., :c], h[..., c:]
                eps = np.stack([r.standard_normal((gl_draws, bs, c)) for r in rngs], axis=1)
                loss, dmu, dvar = gl_nll(mu, softplus(rho) + VAR_FLOOR, labels, eps)
                grad = np.concatenate([dmu, dvar * sigmoid(rho)], axis=-1)
            else:
                z = h - h.max(axis=-1, keepdims=True)
                logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
                picked = np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]
                loss = -picked.mean(axis=-1)
                grad = np.exp(logp)
                np.put_along_axis(grad, labels[..., None], np.take_along_axis(grad, labels[..., None], -1) - 1.0, -1)
                grad /= bs
            total += loss * bs
            for i in reversed(range(depth)):
                if active[i] is not None:
                    grad = grad * active[i]
                gw = np.matmul(grad.transpose(0, 2, 1), inputs[i])
                gb = grad.sum(axis=1)
                if i:
                    grad = np.matmul(grad, w[i])
                if not np.isfinite(gw.sum() + gb.sum()):
                    raise TrainingError(i)
                shim.layers[i].grads = {"weight": gw, "bias": gb}
                shim.layers[i].params = {"weight": w[i], "bias": b[i]}
            adam.update(shim)
            w = [l.params["weight"] for l in shim.layers]
            b = [l.params["bias"] for l in shim.layers]
        for j in range(k):
            history[j].append(float(total[j] / n))
    for j, ls in enumerate(layers):
        for i, layer in enumerate(ls):
            layer.params = {"weight": w[i][j].copy(), "bias": b[i][j].copy()}
    return history


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: StochasticModel, path: str | Path) -> None:
    """Text dump: magic line, spec JSON, then ``param <name> <shape...>`` + values.

    Values are written with ``repr`` so reloading is bit-exact.
    """
    spec = asdict(model.spec)
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}", "spec " + json.dumps(spec, sort_keys=True)]
    lines.append(f"trained {int(model.trained)}")
    for m, member in enumerate(model.members):
        for name, arr in member.state_dict().items():
            lines.append(f"param member{m}.{name} " + " ".join(str(d) for d in arr.shape))
            lines.append(" ".join(repr(v) for v in arr.ravel().tolist()))
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path: str | Path) -> StochasticModel:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].split()[:1] != [CHECKPOINT_MAGIC]:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version = int(lines[0].split()[1])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    spec_dict = json.loads(lines[1][len("spec ") :])
    spec = ModelSpec(**spec_dict)
    model = build_model(spec, 0)
    model.trained = lines[2].split()[1] == "1"
    states: list[dict] = [{} for _ in model.members]
    i = 3
    while i < len(lines):
        head = lines[i].split()
        if head[0] != "param":
            raise CheckpointError(f"{path}:{i + 1}: expected a param line")
        member, name = head[1].split(".", 1)
        shape = tuple(int(d) for d in head[2:])
        values = np.array([float(v) for v in lines[i + 1].split()], dtype=float)
        states[int(member[len("member") :])][name] = values.reshape(shape)
        i += 2
    for member, state in zip(model.members, states):
        member.load_state_dict(state)
    return model
