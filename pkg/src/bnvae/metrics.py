"""Evaluation estimators: importance-weighted NLL, MI, active units, KL
decomposition, the scalar-latent trajectory probe and a linear probe."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import autodiff as ad
from .autodiff import RandomSource, Tape
from .data import Batch, Dataset, make_batch
from .latent import log_normal_density
from .models import CVAEModel, VAEModel
from .nn import softmax_xent

LOG_2PI = math.log(2 * math.pi)


@dataclass
class MetricsReport:
    epoch: int = 0
    step: int = 0
    recon: float = math.nan
    kl: float = math.nan
    mi: float = math.nan
    mi_se: float = math.nan
    au: int | None = None
    iw_nll: float = math.nan
    agg_kl: float = math.nan
    probe_accuracy: float = math.nan
    seconds: float = math.nan
    extra: dict = field(default_factory=dict)


def _chunks(n: int, size: int):
    for start in range(0, n, size):
        yield np.arange(start, min(n, start + size))


# -- posteriors --------------------------------------------------------------------


def posterior_params(model, dataset: Dataset, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode posterior means and log-variances for every sequence, in order."""
    p = model.store.constants()
    mus, lvs = [], []
    for idx in _chunks(len(dataset), batch_size):
        batch = make_batch(dataset, idx)
        if isinstance(model, CVAEModel):
            q = model.recognition(p, batch, model.context(p, batch), train=False, update=False)
        else:
            raw_mu, raw_lv = model.raw_heads(p, batch)
            q = model.regularize(p, raw_mu, raw_lv, train=False, update=False)
        mus.append(q.mu.data)
        lvs.append(q.logvar.data)
    return np.concatenate(mus), np.concatenate(lvs)


def kl_per_sample(mu: np.ndarray, logvar: np.ndarray) -> np.ndarray:
    return 0.5 * np.sum(mu**2 + np.exp(logvar) - logvar - 1.0, axis=-1)


def decoder_log_likelihood(model: VAEModel, batch: Batch, z: np.ndarray, rows: int = 8192) -> np.ndarray:
    """log p(x | z) for each row of ``z`` of shape (batch, K, n); returns (batch, K)."""
    p = model.store.constants()
    b, k, n = z.shape
    tokens = np.repeat(batch.tokens, k, axis=0)
    mask = np.repeat(batch.mask, k, axis=0)
    flat = z.reshape(b * k, n)
    out = np.empty(b * k)
    for idx in _chunks(b * k, rows):
        state = model.decoder_state(p, flat[idx])
        out[idx] = model.sequence_log_likelihood(p, tokens[idx], mask[idx], state)
    return out.reshape(b, k)


# -- importance-weighted NLL ----------------------------------------------------------


def iw_nll(model: VAEModel, dataset: Dataset, k: int = 500, source: RandomSource | None = None,
           batch_size: int = 16) -> tuple[float, np.ndarray]:
    """``-mean_x log (1/K) sum_k p(x, z_k) / q(z_k | x)`` with eval-mode ``q``."""
    if k < 1:
        raise ValueError("K must be >= 1")
    source = source or RandomSource(0, stream=7)
    per = np.empty(len(dataset))
    for idx in _chunks(len(dataset), batch_size):
        batch = make_batch(dataset, idx)
        mu, lv = posterior_params(model, dataset.subset(idx), batch_size)
        eps = source.normal((len(idx), k, mu.shape[1]))
        z = mu[:, None, :] + np.exp(0.5 * lv)[:, None, :] * eps
        log_q = log_normal_density(z, mu[:, None, :], lv[:, None, :])
        log_p = log_normal_density(z, 0.0, np.zeros_like(z))
        log_w = decoder_log_likelihood(model, batch, z) + log_p - log_q
        per[idx] = -(logsumexp(log_w, axis=1) - math.log(k))
    return float(per.mean()), per


def single_sample_neg_elbo(model: VAEModel, dataset: Dataset, source: RandomSource, batch_size: int = 64) -> float:
    """``-log p(x | z) + KL(q || p)`` with one z per x, averaged; eval-mode ``q``."""
    total = 0.0
    for idx in _chunks(len(dataset), batch_size):
        batch = make_batch(dataset, idx)
        mu, lv = posterior_params(model, dataset.subset(idx), batch_size)
        z = mu + np.exp(0.5 * lv) * source.normal(mu.shape)
        ll = decoder_log_likelihood(model, batch, z[:, None, :])[:, 0]
        total += float(np.sum(-ll + kl_per_sample(mu, lv)))
    return total / len(dataset)


def reconstruction_nll(model: VAEModel, dataset: Dataset, z: np.ndarray) -> np.ndarray:
    """Per-sequence NLL with the decoder fed the given latents."""
    batch = make_batch(dataset, np.arange(len(dataset)))
    return -decoder_log_likelihood(model, batch, z[:, None, :])[:, 0]


# -- mutual information and the KL decomposition ------------------------------------------


@dataclass
class MIEstimate:
    mi: float
    mi_se: float
    mean_kl: float
    agg_kl: float
    agg_kl_se: float


def aggregate_log_density(z: np.ndarray, mu: np.ndarray, logvar: np.ndarray, chunk: int = 256) -> np.ndarray:
    """``log (1/N) sum_i q(z | x_i)`` for each row of ``z`` (M, n), in log space."""
    out = np.empty(z.shape[0])
    inv_var = np.exp(-logvar)
    const = -0.5 * (z.shape[1] * LOG_2PI + logvar.sum(axis=1))  # (N,)
    for idx in _chunks(z.shape[0], chunk):
        diff = z[idx, None, :] - mu[None, :, :]
        logs = const[None, :] - 0.5 * np.einsum("mnd,nd->mn", diff**2, inv_var)
        out[idx] = logsumexp(logs, axis=1) - math.log(mu.shape[0])
    return out


def aggregated_kl(mu: np.ndarray, logvar: np.ndarray, source: RandomSource, samples_per_x: int = 1) -> tuple[float, float]:
    """MC estimate of KL(q(z) || N(0, I)) with the evaluation set as mixture support.

    The standard error is the within-x sampling error when ``samples_per_x``
    >= 2, and the (conservative) pooled error otherwise.
    """
    n_x, dim = mu.shape
    eps = source.normal((n_x, samples_per_x, dim))
    z = mu[:, None, :] + np.exp(0.5 * logvar)[:, None, :] * eps
    flat = z.reshape(-1, dim)
    terms = aggregate_log_density(flat, mu, logvar) - log_normal_density(flat, 0.0, np.zeros_like(flat))
    terms = terms.reshape(n_x, samples_per_x)
    est = float(terms.mean())
    if samples_per_x >= 2:
        se = float(np.sqrt(np.sum(terms.var(axis=1, ddof=1) / samples_per_x)) / n_x)
    else:
        se = float(terms.std(ddof=1) / math.sqrt(terms.size)) if terms.size > 1 else 0.0
    return est, se


def mi_from_posteriors(mu: np.ndarray, logvar: np.ndarray, source: RandomSource, samples_per_x: int = 1) -> MIEstimate:
    """``I_q = E_x KL(q(z|x) || p(z)) - KL(q(z) || p(z))``; first term analytic."""
    if mu.shape[0] == 0:
        raise ValueError("empty evaluation set")
    mean_kl = float(kl_per_sample(mu, logvar).mean())
    agg, se = aggregated_kl(mu, logvar, source, samples_per_x)
    return MIEstimate(mean_kl - agg, se, mean_kl, agg, se)


def mutual_information(model, dataset: Dataset, samples_per_x: int = 1, source: RandomSource | None = None) -> MIEstimate:
    mu, lv = posterior_params(model, dataset)
    return mi_from_posteriors(mu, lv, source or RandomSource(0, stream=11), samples_per_x)


@dataclass
class KLDecomposition:
    mean_kl: float
    mi: float
    mi_se: float
    agg_kl: float
    agg_kl_se: float

    @property
    def residual(self) -> float:
        return self.mean_kl - self.mi - self.agg_kl

    @property
    def combined_se(self) -> float:
        return math.hypot(self.mi_se, self.agg_kl_se)

    def holds(self, k: float = 3.0) -> bool:
        return abs(self.residual) <= k * self.combined_se + 1e-12


def kl_decompose_posteriors(mu, logvar, source: RandomSource, samples_per_x: int = 1) -> KLDecomposition:
    """Mean KL (analytic), MI and aggregated KL, the latter two from independent draws."""
    mi = mi_from_posteriors(mu, logvar, source, samples_per_x)
    agg, agg_se = aggregated_kl(mu, logvar, source, samples_per_x)
    return KLDecomposition(mi.mean_kl, mi.mi, mi.mi_se, agg, agg_se)


def kl_decompose(model, dataset: Dataset, samples_per_x: int = 1, source: RandomSource | None = None) -> KLDecomposition:
    mu, lv = posterior_params(model, dataset)
    return kl_decompose_posteriors(mu, lv, source or RandomSource(0, stream=12), samples_per_x)


# -- active units --------------------------------------------------------------------


def active_units_from_means(means: np.ndarray, threshold: float = 0.01) -> tuple[int, np.ndarray]:
    if means.shape[0] < 2:
        raise ValueError("active units need at least two datapoints")
    var = means.var(axis=0, ddof=1)
    return int(np.sum(var > threshold)), var


def active_units(model, dataset: Dataset, threshold: float = 0.01) -> tuple[int, np.ndarray]:
    mu, _ = posterior_params(model, dataset)
    return active_units_from_means(mu, threshold)


# -- trajectory probe -------------------------------------------------------------------


def trapezoid_weights(grid: np.ndarray) -> np.ndarray:
    w = np.zeros_like(grid)
    d = np.diff(grid)
    w[:-1] += d / 2
    w[1:] += d / 2
    return w


def model_posterior_mean(model: VAEModel, dataset: Dataset, grid: np.ndarray, batch_size: int = 25) -> np.ndarray:
    """Mean of p(z | x) by quadrature on ``grid`` (scalar latent only), in log space."""
    if model.n != 1:
        raise ValueError(f"trajectory probe needs a scalar latent, model has n={model.n}")
    log_w0 = np.log(trapezoid_weights(grid)) - 0.5 * (LOG_2PI + grid**2)
    out = np.empty(len(dataset))
    z = np.broadcast_to(grid[None, :, None], (batch_size, grid.size, 1))
    for idx in _chunks(len(dataset), batch_size):
        batch = make_batch(dataset, idx)
        ll = decoder_log_likelihood(model, batch, np.ascontiguousarray(z[: len(idx)]))
        lw = ll + log_w0[None, :]
        lw -= lw.max(axis=1, keepdims=True)
        w = np.exp(lw)
        out[idx] = (w * grid[None, :]).sum(axis=1) / w.sum(axis=1)
    return out


def trajectory_probe(model: VAEModel, probe: Dataset, grid: np.ndarray | None = None) -> list[tuple[int, float, float]]:
    """Rows ``(sample_id, mu_model, mu_inference)`` for a scalar-latent model."""
    if model.n != 1:
        raise ValueError(f"trajectory probe needs a scalar latent, model has n={model.n}")
    grid = np.linspace(-4.0, 4.0, 321) if grid is None else np.asarray(grid, dtype=np.float64)
    mu_model = model_posterior_mean(model, probe, grid)
    mu_inf, _ = posterior_params(model, probe)
    return [(i, float(a), float(b)) for i, (a, b) in enumerate(zip(mu_model, mu_inf[:, 0]))]


# -- linear probe ------------------------------------------------------------------------


@dataclass
class ProbeResult:
    accuracy: float
    majority_rate: float
    degenerate: bool = False


def linear_probe(train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray, test_y: np.ndarray,
                 seed: int = 0, epochs: int = 300, lr: float = 0.5, batch_size: int = 10,
                 allow_degenerate: bool = False) -> ProbeResult:
    """Softmax regression trained by minibatch SGD on frozen features."""
    train_y = np.asarray(train_y, dtype=np.int64)
    test_y = np.asarray(test_y, dtype=np.int64)
    classes = int(max(train_y.max(), test_y.max())) + 1
    counts = np.bincount(test_y, minlength=classes)
    majority = float(counts.max() / counts.sum())
    if len(np.unique(train_y)) < 2:
        if not allow_degenerate:
            raise ValueError("linear probe needs at least two classes")
        return ProbeResult(float(np.mean(test_y == train_y[0])), majority, degenerate=True)
    rng = RandomSource(seed, stream=404)
    w = np.zeros((train_x.shape[1], classes))
    b = np.zeros(classes)
    n = train_x.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            tape = Tape()
            tw, tb = tape.leaf(w), tape.leaf(b)
            logits = ad.matmul(train_x[idx], tw) + tb
            nll, _ = softmax_xent(logits, train_y[idx])
            g = tape.backward(ad.scale(nll, 1.0 / len(idx)))
            w = w - lr * g[tw]
            b = b - lr * g[tb]
    pred = (test_x @ w + b).argmax(axis=1)
    return ProbeResult(float(np.mean(pred == test_y)), majority)
