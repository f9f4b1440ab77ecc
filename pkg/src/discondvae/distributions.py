"""Reparameterized sampling and the analytic KL terms used by the objective.

All functions take and return graph tensors; noise is drawn by the caller
(from a RandomSource) and enters as plain arrays so the sampling path stays
deterministic and differentiable only through the distribution parameters.
"""

from __future__ import annotations

import math

import numpy as np

from discondvae import tensor as T
from discondvae.tensor import Tensor

# Floor for probabilities inside logs; 0 * log(0) is taken as 0.
_LOG_FLOOR = 1e-12


def gaussian_kl_to_prior(mu: Tensor, logvar: Tensor, prior_mu=None) -> Tensor:
    """KL(N(mu, diag(exp(logvar))) || N(prior_mu, I)) summed over the last axis.

    prior_mu=None means a zero-mean prior. Returns one value per leading
    index (e.g. [B] for [B, k] inputs, [B, d] for [B, d, k] inputs).
    """
    if prior_mu is None:
        sq = T.square(mu)
    else:
        pm = prior_mu if isinstance(prior_mu, Tensor) else Tensor(np.asarray(prior_mu), dtype=mu.dtype)
        sq = T.square(T.sub(mu, pm))
    inner = T.sub(T.add(sq, T.exp(logvar)), T.add(logvar, 1.0))
    return T.mul(T.sum_(inner, axis=-1), 0.5)


def categorical_kl_to_uniform(alpha: Tensor) -> Tensor:
    """KL(alpha || uniform over d) per row: sum_i alpha_i log(alpha_i * d)."""
    d = alpha.shape[-1]
    safe_log = T.log(T.clamp_min(alpha, _LOG_FLOOR))
    return T.sum_(T.mul(alpha, T.add(safe_log, math.log(d))), axis=-1)


def mixture_kl_expectation(alpha: Tensor, mu: Tensor, logvar: Tensor, prior_mu) -> Tensor:
    """Posterior-weighted per-mode Gaussian KL.

    alpha: [B, d] mode responsibilities; mu/logvar: [B, d, k] per-mode
    posterior params; prior_mu: [d, k] prior mode centers. Returns [B]:
    sum_i alpha_i * KL(q_i || N(prior_mu_i, I)).
    """
    per_mode = gaussian_kl_to_prior(mu, logvar, prior_mu)  # [B, d]
    return T.sum_(T.mul(alpha, per_mode), axis=-1)


def gaussian_reparam(mu: Tensor, logvar: Tensor, noise: np.ndarray) -> Tensor:
    """mu + exp(logvar / 2) * noise, noise ~ N(0, I) drawn by the caller."""
    std = T.exp(T.mul(logvar, 0.5))
    return T.add(mu, T.mul(std, noise.astype(mu.data.dtype, copy=False)))


def gumbel_softmax_sample(logits: Tensor, gumbel_noise: np.ndarray, temperature: float) -> Tensor:
    """softmax((logits + g) / temperature) with g ~ Gumbel(0,1) per entry.

    As temperature -> 0 the sample concentrates on argmax(logits + g),
    which follows the softmax(logits) distribution exactly.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    shifted = T.add(logits, gumbel_noise.astype(logits.data.dtype, copy=False))
    return T.softmax(T.mul(shifted, 1.0 / temperature), axis=-1)


# -- numpy-side helpers (no graph) -------------------------------------

def gaussian_log_density(x: np.ndarray, mu, logvar=None) -> np.ndarray:
    """log N(x; mu, diag(exp(logvar))) summed over the last axis (float64)."""
    x = np.asarray(x, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    k = x.shape[-1]
    if logvar is None:
        quad = ((x - mu) ** 2).sum(axis=-1)
        logdet = 0.0
    else:
        lv = np.asarray(logvar, dtype=np.float64)
        quad = (((x - mu) ** 2) * np.exp(-lv)).sum(axis=-1)
        logdet = lv.sum(axis=-1)
    return -0.5 * (quad + logdet + k * math.log(2.0 * math.pi))
