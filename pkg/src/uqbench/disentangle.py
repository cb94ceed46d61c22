"""Aleatoric / epistemic uncertainty from stacked stochastic outputs.

Two estimators:

* information-theoretic: total = H[mean_t p_t], aleatoric = mean_t H[p_t],
  epistemic = total - aleatoric (mutual information between label and
  parameters);
* Gaussian logits: every pass emits a per-class logit mean and variance. The
  aleatoric variance is the mean of the per-pass variances, the epistemic one
  the (population) variance of the per-pass means. Each variance is pushed
  through a sampled softmax around the mean logit and summarised by entropy.

Stacked inputs use axis 0 for passes, the last axis for classes, and any
axes in between for samples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import PROB_FLOOR, DomainError, sigmoid, softmax, softplus, log_softmax

VAR_FLOOR = 1e-6
SIMPLEX_TOL = 1e-6


class InsufficientSamplesError(ValueError):
    """Variance across passes requested with fewer than two passes."""


def entropy(p: np.ndarray, axis: int = -1) -> np.ndarray:
    """Shannon entropy in nats along ``axis`` with 0 ln 0 = 0."""
    p = np.asarray(p, dtype=float)
    if np.any(p < -SIMPLEX_TOL) or np.any(np.abs(p.sum(axis=axis) - 1.0) > SIMPLEX_TOL):
        raise DomainError("entropy expects probability vectors on the simplex")
    p = np.clip(p, 0.0, None)
    return -np.sum(p * np.log(np.maximum(p, PROB_FLOOR)), axis=axis)


@dataclass(frozen=True)
class UncertaintyTriple:
    total: np.ndarray
    aleatoric: np.ndarray
    epistemic: np.ndarray


@dataclass(frozen=True)
class ProbEnsemble:
    """``probs`` of shape (T, ..., C); every row a probability vector."""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        if probs.ndim < 2:
            raise ValueError("need at least (T, C)")
        if np.any(probs < 0) or np.any(np.abs(probs.sum(-1) - 1.0) > 1e-9):
            raise DomainError("ensemble rows must lie on the simplex")
        object.__setattr__(self, "probs", probs)


def it_disentangle(ens: ProbEnsemble | np.ndarray) -> UncertaintyTriple:
    probs = ens.probs if isinstance(ens, ProbEnsemble) else np.asarray(ens, dtype=float)
    total = entropy(probs.mean(axis=0))
    aleatoric = entropy(probs).mean(axis=0)
    return UncertaintyTriple(total, aleatoric, total - aleatoric)


@dataclass(frozen=True)
class GaussianLogitSamples:
    """Per-pass logit means and variances, both shaped (T, ..., C)."""

    mu: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float)
        var = np.asarray(self.var, dtype=float)
        if mu.shape != var.shape:
            raise ValueError(f"mu {mu.shape} and var {var.shape} differ")
        if np.any(var < 0):
            raise DomainError("logit variances must be non-negative")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "var", var)

    @classmethod
    def from_head(cls, outputs: np.ndarray) -> "GaussianLogitSamples":
        """Split raw 2C-wide head outputs into means and floored softplus variances."""
        outputs = np.asarray(outputs, dtype=float)
        c = outputs.shape[-1] // 2
        return cls(outputs[..., :c], softplus(outputs[..., c:]) + VAR_FLOOR)

    @property
    def passes(self) -> int:
        return self.mu.shape[0]


@dataclass(frozen=True)
class GlAggregate:
    mu_bar: np.ndarray
    var_ale: np.ndarray
    _mu: np.ndarray

    @property
    def var_epi(self) -> np.ndarray:
        if self._mu.shape[0] < 2:
            raise InsufficientSamplesError("epistemic variance needs T >= 2 passes")
        return self._mu.var(axis=0)


def gl_aggregate(samples: GaussianLogitSamples) -> GlAggregate:
    return GlAggregate(samples.mu.mean(axis=0), samples.var.mean(axis=0), samples.mu)


def sampled_softmax(
    mu: np.ndarray,
    var: np.ndarray,
    n: int,
    rng: np.random.Generator,
    chunk: int = 4_000_000,
) -> np.ndarray:
    """Mean of ``softmax(z)`` over ``n`` draws ``z ~ N(mu, diag(var))``.

    Works row-wise on ``(..., C)`` inputs. Rows with zero variance return
    ``softmax(mu)`` exactly. Draws are generated in chunks of at most
    ``chunk`` numbers to bound memory.
    """
    mu = np.asarray(mu, dtype=float)
    var = np.broadcast_to(np.asarray(var, dtype=float), mu.shape)
    if np.any(var < 0):
        raise DomainError("variance must be non-negative")
    if n < 1:
        raise ValueError("n must be >= 1")
    flat_mu = mu.reshape(-1, mu.shape[-1])
    flat_sd = np.sqrt(var).reshape(flat_mu.shape)
    rows, c = flat_mu.shape
    out = np.empty_like(flat_mu)
    per_row = n * c
    step = max(1, chunk // max(per_row, 1))
    for start in range(0, rows, step):
        m = flat_mu[start : start + step]
        s = flat_sd[start : start + step]
        acc = np.zeros_like(m)
        draws_left = n
        # very large n on a single row: split along the draw axis too
        n_block = max(1, min(n, chunk // max(len(m) * c, 1)))
        while draws_left:
            k = min(n_block, draws_left)
            z = m + s * rng.standard_normal((k,) + m.shape)
            acc += softmax(z).sum(axis=0)
            draws_left -= k
        out[start : start + step] = acc / n
    deterministic = np.all(flat_sd == 0, axis=-1)
    if deterministic.any():
        out[deterministic] = softmax(flat_mu[deterministic])
    return out.reshape(mu.shape)


def gl_uncertainties(
    samples: GaussianLogitSamples, n: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Aleatoric and epistemic entropies (nats) from Gaussian-logit passes."""
    agg = gl_aggregate(samples)
    p_ale = sampled_softmax(agg.mu_bar, agg.var_ale, n, rng)
    p_epi = sampled_softmax(agg.mu_bar, agg.var_epi, n, rng)
    return entropy(p_ale), entropy(p_epi)


def gl_predictive(samples: GaussianLogitSamples) -> np.ndarray:
    """Class probabilities for prediction: mean over passes of softmax(mu_t)."""
    return softmax(samples.mu).mean(axis=0)


# ---------------------------------------------------------------------------
# Training loss for the Gaussian-logit head
# ---------------------------------------------------------------------------


def gl_nll(mu: np.ndarray, var: np.ndarray, labels: np.ndarray, eps: np.ndarray):
    """Sampled-softmax NLL with reparameterised draws ``z = mu + sqrt(var) * eps``.

    ``mu``/``var`` are (..., B, C), ``labels`` (..., B) and ``eps`` (N, ..., B, C).
    Returns the batch-mean loss ``-ln mean_n softmax(z_n)[label]`` (a float,
    or one value per leading index) and its gradients w.r.t. ``mu`` and ``var``.
    """
    mu = np.asarray(mu, dtype=float)
    var = np.asarray(var, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    b, c = mu.shape[-2:]
    n = eps.shape[0]
    sd = np.sqrt(var)
    z = mu + sd * eps
    z -= z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    norm = e.sum(axis=-1)
    if mu.ndim == 2:
        rows = np.arange(b)
        picked = z[:, rows, labels]
    else:
        picked = np.take_along_axis(z, np.expand_dims(labels, (0, -1)), axis=-1)[..., 0]
    lp = picked - np.log(norm)  # (N, ..., B) per-draw log-likelihood
    top = lp.max(axis=0)
    w = np.exp(lp - top)
    wsum = w.sum(axis=0)
    loss = np.log(n) - (top + np.log(wsum)).mean(axis=-1)
    w /= wsum * b
    # d loss_b / d z_n = -w_n (onehot - softmax(z_n))
    dz = e * (w / norm)[..., None]
    if mu.ndim == 2:
        dz[:, rows, labels] -= w
    else:
        dz -= (np.arange(c) == labels[..., None]) * w[..., None]
    dmu = dz.sum(axis=0)
    dsd = (dz * eps).sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        dvar = np.where(sd > 0, dsd / (2.0 * sd), 0.0)
    return (float(loss) if loss.ndim == 0 else loss), dmu, dvar


def gl_head_loss(mu, var, labels, n: int, rng: np.random.Generator):
    """``gl_nll`` with fresh standard normal draws."""
    mu = np.atleast_2d(mu)
    eps = rng.standard_normal((n,) + mu.shape)
    return gl_nll(mu, np.atleast_2d(var), np.atleast_1d(labels), eps)


class GaussianLogitLoss:
    """Loss on raw 2C-wide head outputs ``[mu | rho]`` with var = softplus(rho) + floor."""

    def __init__(self, n_draws: int = 32):
        self.n_draws = n_draws

    def __call__(self, outputs: np.ndarray, labels: np.ndarray, rng: np.random.Generator | None):
        c = outputs.shape[1] // 2
        if rng is None:
            raise ValueError("Gaussian-logit loss needs an rng for its draws")
        mu, rho = outputs[:, :c], outputs[:, c:]
        var = softplus(rho) + VAR_FLOOR
        labels = np.asarray(labels)
        if labels.size and (labels.min() < 0 or labels.max() >= c):
            raise DomainError(f"labels must lie in [0, {c})")
        loss, dmu, dvar = gl_head_loss(mu, var, labels, self.n_draws, rng)
        return loss, np.concatenate([dmu, dvar * sigmoid(rho)], axis=1)
