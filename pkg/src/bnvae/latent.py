"""Diagonal Gaussians and the posterior regularizers.

Regularizers operate on the raw posterior heads of a batch:

* ``fixed_bn``: batch-normalize the means with a frozen scale ``gamma`` and a
  learnable per-dimension shift ``beta``. In train mode the batch second
  moment of each normalized mean is ``beta**2 + gamma**2 * v / (v + eps)``,
  which puts a floor under the batch-mean KL.
* ``extended_bn``: normalize both the mean head and the scale head, with
  ``gamma_mu**2 + gamma_sigma**2 == 1`` and zero shifts.
* ``delta``: squash the scale into the feasible interval for a target
  per-dimension rate and lift the mean so every dimension keeps KL >= delta.
* ``free_bits``: leaves the posterior alone; the hinge is applied to the KL.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

LOGVAR_MIN = -8.0
LOGVAR_MAX = 8.0
REGULARIZERS = ("none", "fixed_bn", "extended_bn", "delta", "free_bits")


@dataclass
class RegularizerConfig:
    kind: str = "none"
    gamma: float = 0.6
    tau: float = 0.5
    delta: float = 0.1
    free_bits: float = 0.5
    free_bits_mode: str = "per-dimension"
    eps: float = 1e-12
    momentum: float = 0.1

    def __post_init__(self):
        if self.kind not in REGULARIZERS:
            raise ValueError(f"regularizer must be one of {REGULARIZERS}, got {self.kind!r}")
        if self.kind == "fixed_bn" and self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.kind == "extended_bn" and not 0 < self.tau < 1:
            raise ValueError("tau must lie in (0, 1)")
        if self.kind == "delta" and self.delta <= 0:
            raise ValueError("delta must be > 0")
        if self.free_bits < 0:
            raise ValueError("free-bits threshold must be >= 0")
        if self.free_bits_mode not in ("per-dimension", "total-sum"):
            raise ValueError(f"unknown free-bits mode {self.free_bits_mode!r}")


@dataclass
class DiagGaussian:
    """Batch of diagonal Gaussians. ``std`` overrides ``exp(logvar / 2)`` when set."""

    mu: Tensor
    logvar: Tensor
    std: Tensor | None = None

    def __post_init__(self):
        if self.mu.shape != self.logvar.shape:
            raise ShapeError(f"mean {self.mu.shape} and log-variance {self.logvar.shape} differ")

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]

    @classmethod
    def standard(cls, shape) -> "DiagGaussian":
        return cls(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)))

    def numpy(self) -> tuple[np.ndarray, np.ndarray]:
        return self.mu.data, self.logvar.data


def clamp_logvar(logvar) -> Tensor:
    return ad.clip(logvar, LOGVAR_MIN, LOGVAR_MAX)


def kl_standard_normal(q: DiagGaussian) -> tuple[Tensor, Tensor]:
    """KL(q || N(0, I)): per-sample sums over the last axis, and per-dimension terms."""
    per_dim = ad.scale(ad.square(q.mu) + ad.exp(q.logvar) - q.logvar - 1.0, 0.5)
    return ad.sum(per_dim, axis=-1), per_dim


def kl_diag_pair(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """KL(q || p) for diagonal Gaussians, summed over the last axis."""
    if q.mu.shape[-1] != p.mu.shape[-1]:
        raise ShapeError(f"dimension mismatch: {q.mu.shape} vs {p.mu.shape}")
    diff = q.logvar - p.logvar
    inv_var_p = ad.exp(ad.neg(p.logvar))
    term = ad.exp(diff) + ad.square(q.mu - p.mu) * inv_var_p - 1.0 - diff
    return ad.scale(ad.sum(term, axis=-1), 0.5)


def reparameterize(q: DiagGaussian, noise) -> Tensor:
    std = q.std if q.std is not None else ad.exp(ad.scale(q.logvar, 0.5))
    return q.mu + std * ad.as_tensor(noise)


def log_normal_density(z: np.ndarray, mu: np.ndarray, logvar: np.ndarray) -> np.ndarray:
    """Untaped log N(z; mu, exp(logvar)) summed over the last axis."""
    return -0.5 * np.sum(
        math.log(2 * math.pi) + logvar + (z - mu) ** 2 * np.exp(-logvar), axis=-1
    )


# -- batch normalization ----------------------------------------------------------------


@dataclass
class FixedBNState:
    gamma: float
    beta: np.ndarray
    eps: float = 1e-12
    momentum: float = 0.1
    running_mean: np.ndarray = None  # type: ignore[assignment]
    running_var: np.ndarray = None  # type: ignore[assignment]
    mode: str = "train"

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64)
        n = self.beta.shape[0]
        if self.running_mean is None:
            self.running_mean = np.zeros(n)
        if self.running_var is None:
            self.running_var = np.ones(n)


def _normalize(raw: Tensor, running_mean, running_var, eps, momentum, train, update):
    """Shared BN core: returns ``(raw - m) / sqrt(v + eps)`` and new running stats."""
    if train:
        if raw.shape[0] < 2:
            raise ValueError(f"batch norm in train mode needs batch size >= 2, got {raw.shape[0]}")
        m = ad.mean(raw, axis=0)
        centered = raw - m
        v = ad.mean(ad.square(centered), axis=0)
        inv_std = ad.exp(ad.scale(ad.log(v + eps), -0.5))
        out = centered * inv_std
        if update:
            running_mean = (1 - momentum) * running_mean + momentum * m.data
            running_var = (1 - momentum) * running_var + momentum * v.data
        return out, running_mean, running_var, v.data
    out = (raw - Tensor(running_mean)) * Tensor(1.0 / np.sqrt(running_var + eps))
    return out, running_mean, running_var, None


def fixed_bn_apply(raw_means, state: FixedBNState, beta: Tensor | None = None, update: bool = True) -> Tensor:
    """``gamma * (mu - m) / sqrt(v + eps) + beta`` with biased batch statistics in train mode.

    ``beta`` may be passed as a taped tensor so gradients reach the shift;
    ``gamma`` always enters as a constant.
    """
    raw_means = ad.as_tensor(raw_means)
    train = state.mode == "train"
    normed, rm, rv, _ = _normalize(
        raw_means, state.running_mean, state.running_var, state.eps, state.momentum, train, update
    )
    state.running_mean, state.running_var = rm, rv
    shift = beta if beta is not None else Tensor(state.beta)
    return ad.scale(normed, state.gamma) + shift


@dataclass
class ExtendedBNState:
    tau: float
    theta: float = 0.0
    eps: float = 1e-12
    momentum: float = 0.1
    running_mean_mu: np.ndarray = None  # type: ignore[assignment]
    running_var_mu: np.ndarray = None  # type: ignore[assignment]
    running_mean_sigma: np.ndarray = None  # type: ignore[assignment]
    running_var_sigma: np.ndarray = None  # type: ignore[assignment]
    mode: str = "train"
    dim: int = 1

    def __post_init__(self):
        if not 0 < self.tau < 1:
            raise ValueError("tau must lie in (0, 1)")
        for name, fill in (("running_mean_mu", 0.0), ("running_var_mu", 1.0),
                           ("running_mean_sigma", 0.0), ("running_var_sigma", 1.0)):
            if getattr(self, name) is None:
                setattr(self, name, np.full(self.dim, fill))


def extended_scales(tau: float, theta) -> tuple[Tensor, Tensor]:
    """``(gamma_mu, gamma_sigma)``; their squares sum to one for any ``theta``."""
    theta = ad.as_tensor(theta)
    g_mu = ad.sqrt(ad.scale(ad.sigmoid(theta), 1 - tau) + tau)
    g_sigma = ad.sqrt(ad.scale(ad.sigmoid(ad.neg(theta)), 1 - tau))
    return g_mu, g_sigma


def extended_bn_apply(
    raw_means, raw_sigmas, state: ExtendedBNState, theta: Tensor | None = None, update: bool = True
) -> tuple[Tensor, Tensor]:
    """Normalize both heads with zero shifts; returns ``(mu_hat, sigma_hat)``."""
    raw_means, raw_sigmas = ad.as_tensor(raw_means), ad.as_tensor(raw_sigmas)
    train = state.mode == "train"
    g_mu, g_sigma = extended_scales(state.tau, theta if theta is not None else state.theta)
    n_mu, state.running_mean_mu, state.running_var_mu, _ = _normalize(
        raw_means, state.running_mean_mu, state.running_var_mu, state.eps, state.momentum, train, update
    )
    n_sigma, state.running_mean_sigma, state.running_var_sigma, _ = _normalize(
        raw_sigmas, state.running_mean_sigma, state.running_var_sigma, state.eps, state.momentum, train, update
    )
    return n_mu * g_mu, n_sigma * g_sigma


def sigma_to_gaussian(mu: Tensor, sigma: Tensor) -> DiagGaussian:
    """Gaussian whose reparameterization scale is ``sigma`` (sign immaterial) and variance ``sigma**2``."""
    var = ad.square(sigma)
    logvar = ad.log(ad.maximum(var, math.exp(LOGVAR_MIN)))
    return DiagGaussian(mu, clamp_logvar(logvar), std=sigma)


# -- delta constraint ------------------------------------------------------------------


@dataclass
class DeltaConfig:
    delta: float
    sigma_l: float = field(init=False)
    sigma_u: float = field(init=False)

    def __post_init__(self):
        self.sigma_l, self.sigma_u = delta_feasible_interval(self.delta)


def _rate_gap(v: float, delta: float) -> float:
    return math.log(v) - v + 2 * delta + 1


def delta_feasible_interval(delta: float) -> tuple[float, float]:
    """Square roots of the two roots ``v_l < 1 < v_u`` of ``ln v - v + 2 delta + 1 = 0``."""
    if delta <= 0:
        raise ValueError(f"delta must be > 0, got {delta}")
    lo = 0.5
    while _rate_gap(lo, delta) >= 0:
        lo *= 0.5
    hi = 2.0
    while _rate_gap(hi, delta) >= 0:
        hi *= 2.0
    v_l = brentq(_rate_gap, lo, 1.0, args=(delta,), xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)
    v_u = brentq(_rate_gap, 1.0, hi, args=(delta,), xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=500)
    return math.sqrt(v_l), math.sqrt(v_u)


def delta_constrain(raw_mu, raw_sigma, cfg: DeltaConfig) -> DiagGaussian:
    """Map raw heads to a posterior with per-dimension KL >= delta.

    ``sigma = sigma_l + (sigma_u - sigma_l) * sigmoid(raw_sigma)`` and
    ``mu = sqrt(2 delta + 1 + ln sigma^2 - sigma^2 + max(0, raw_mu))``.
    """
    raw_mu, raw_sigma = ad.as_tensor(raw_mu), ad.as_tensor(raw_sigma)
    sigma = ad.scale(ad.sigmoid(raw_sigma), cfg.sigma_u - cfg.sigma_l) + cfg.sigma_l
    var = ad.square(sigma)
    logvar = ad.log(var)
    slack = logvar - var + (2 * cfg.delta + 1)
    # rounding can push the slack a hair below zero at the interval ends
    arg = ad.maximum(slack, 0.0) + ad.maximum(raw_mu, 0.0)
    mu = ad.sqrt(arg + 1e-12)
    return DiagGaussian(mu, logvar)


# -- free bits and the KL floor ----------------------------------------------------------


@dataclass
class FreeBitsConfig:
    lam: float
    mode: str = "per-dimension"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.mode not in ("per-dimension", "total-sum"):
            raise ValueError(f"unknown free-bits mode {self.mode!r}")


def free_bits_hinge(kl_per_dim, cfg: FreeBitsConfig) -> Tensor:
    """``sum_i max(lam, KL_i)`` or, in total-sum mode, ``max(lam, sum_i KL_i)``."""
    kl_per_dim = ad.as_tensor(kl_per_dim)
    if cfg.mode == "per-dimension":
        return ad.sum(ad.maximum(cfg.lam, kl_per_dim))
    return ad.maximum(cfg.lam, ad.sum(kl_per_dim))


def kl_lower_bound(n: int, gamma: float, beta=0.0) -> float:
    """``n * gamma**2 / 2 + sum(beta_i**2) / 2``; equals ``n (gamma^2 + beta^2) / 2`` for scalar beta."""
    if n < 1:
        raise ValueError("n must be >= 1")
    beta = np.asarray(beta, dtype=np.float64)
    beta_sq = n * float(beta) ** 2 if beta.ndim == 0 else float(np.sum(beta**2))
    return 0.5 * (n * gamma**2 + beta_sq)
