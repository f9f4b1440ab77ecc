"""Capacity-annealed training objectives.

The minimized loss is

    total = recon + beta_z * |KL_z - C_z(t)| + beta_w * |KL_w - C_w(t)|
                  + beta_c * |KL_c - C_c(t)|

with recon the per-example Bernoulli negative log-likelihood summed over
pixels and each capacity C ramping linearly from 0 to its target over
`ramp_iters` steps, then holding. KL_w is the responsibility-weighted
per-mode Gaussian KL against the mixture prior means. The joint-variant
loss drops the KL_w term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from discondvae import tensor as T
from discondvae.distributions import (
    categorical_kl_to_uniform,
    gaussian_kl_to_prior,
    mixture_kl_expectation,
)
from discondvae.models import EncoderOutput
from discondvae.tensor import Tensor


@dataclass(frozen=True)
class CapacitySchedule:
    target: float
    ramp_iters: int

    def __post_init__(self):
        if self.target < 0:
            raise ValueError(f"capacity target must be >= 0, got {self.target}")
        if self.ramp_iters <= 0:
            raise ValueError(f"ramp_iters must be positive, got {self.ramp_iters}")


def capacity_at(schedule: CapacitySchedule, iteration: int) -> float:
    """Linear ramp 0 -> target over ramp_iters, clamped afterwards."""
    if iteration < 0:
        raise ValueError(f"iteration must be >= 0, got {iteration}")
    return schedule.target * min(iteration / schedule.ramp_iters, 1.0)


@dataclass(frozen=True)
class LossWeights:
    beta_z: float
    beta_w: float
    beta_c: float
    c_z: CapacitySchedule
    c_w: CapacitySchedule
    c_c: CapacitySchedule

    def __post_init__(self):
        for name in ("beta_z", "beta_w", "beta_c"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass
class LossBreakdown:
    """Per-example means of every logged term; `total` stays on the graph."""

    total: Tensor
    recon: float
    kl_z: float
    kl_w: float
    kl_c: float
    cap_z: float
    cap_w: float
    cap_c: float

    def csv_row(self, iteration: int) -> str:
        return (
            f"{iteration},{self.recon:.6f},{self.kl_z:.6f},{self.kl_w:.6f},"
            f"{self.kl_c:.6f},{self.cap_z:.6f},{self.cap_w:.6f},{self.cap_c:.6f},"
            f"{self.total.item():.6f}"
        )


CSV_HEADER = "iter,recon,kl_z,kl_w,kl_c,C_z,C_w,C_c,total"


def reconstruction_loss(x, logits: Tensor) -> Tensor:
    """Mean over examples of the pixel-summed Bernoulli NLL."""
    per_pixel = T.bce_with_logits(logits, x)
    b = logits.shape[0]
    per_example = T.sum_(T.reshape(per_pixel, (b, -1)), axis=1)
    return T.mean(per_example)


def _penalty(kl_mean: Tensor, beta: float, cap: float) -> Tensor:
    return T.mul(T.abs_(T.sub(kl_mean, cap)), beta)


def discond_loss(x, out: EncoderOutput, recon_logits: Tensor, prior_mu,
                 weights: LossWeights, iteration: int) -> LossBreakdown:
    recon = reconstruction_loss(x, recon_logits)
    kl_z = T.mean(gaussian_kl_to_prior(out.z_mu, out.z_logvar))
    kl_w = T.mean(mixture_kl_expectation(out.alpha, out.w_mu, out.w_logvar, prior_mu))
    kl_c = T.mean(categorical_kl_to_uniform(out.alpha))
    cz = capacity_at(weights.c_z, iteration)
    cw = capacity_at(weights.c_w, iteration)
    cc = capacity_at(weights.c_c, iteration)
    total = T.add(
        T.add(recon, _penalty(kl_z, weights.beta_z, cz)),
        T.add(_penalty(kl_w, weights.beta_w, cw), _penalty(kl_c, weights.beta_c, cc)),
    )
    return LossBreakdown(
        total=total,
        recon=recon.item(), kl_z=kl_z.item(), kl_w=kl_w.item(), kl_c=kl_c.item(),
        cap_z=cz, cap_w=cw, cap_c=cc,
    )


def jointvae_loss(x, out: EncoderOutput, recon_logits: Tensor,
                  weights: LossWeights, iteration: int) -> LossBreakdown:
    recon = reconstruction_loss(x, recon_logits)
    kl_z = T.mean(gaussian_kl_to_prior(out.z_mu, out.z_logvar))
    kl_c = T.mean(categorical_kl_to_uniform(out.alpha))
    cz = capacity_at(weights.c_z, iteration)
    cc = capacity_at(weights.c_c, iteration)
    total = T.add(
        T.add(recon, _penalty(kl_z, weights.beta_z, cz)),
        _penalty(kl_c, weights.beta_c, cc),
    )
    return LossBreakdown(
        total=total,
        recon=recon.item(), kl_z=kl_z.item(), kl_w=0.0, kl_c=kl_c.item(),
        cap_z=cz, cap_w=0.0, cap_c=cc,
    )
