"""Mixture-prior mean adaptation.

The responsibility-weighted dataset average of the encoder's per-mode means
is the closed-form minimizer of the expected per-mode Gaussian KL, so mean
updates never increase that term on a frozen encoder. Adaptive schedules
fire on epoch multiples of ceil(0.1 * total_epochs); the fixed policies are
the defaults because adaptation tends to destabilize training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

POLICIES = ("fixed_zero", "fixed_random", "warmup_once", "em_periodic")

# Below this summed responsibility a mode keeps its previous mean.
RESPONSIBILITY_FLOOR = 1e-8


@dataclass(frozen=True)
class PriorUpdatePolicy:
    mode: str
    trigger_fraction: float = 0.10

    def __post_init__(self):
        if self.mode not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}, got {self.mode!r}")
        if not 0.0 < self.trigger_fraction < 1.0:
            raise ValueError(f"trigger_fraction must be in (0, 1), got {self.trigger_fraction}")

    def trigger_epoch(self, total_epochs: int) -> int:
        return int(np.ceil(self.trigger_fraction * total_epochs))

    def fires_at(self, epoch: int, total_epochs: int) -> bool:
        if self.mode in ("fixed_zero", "fixed_random"):
            return False
        t = self.trigger_epoch(total_epochs)
        if self.mode == "warmup_once":
            return epoch == t
        return epoch > 0 and epoch % t == 0


def mu_star(alpha: np.ndarray, mode_means: np.ndarray, previous: np.ndarray) -> np.ndarray:
    """Responsibility-weighted mean of encoder mode means.

    alpha: [N, d]; mode_means: [N, d, k]; previous: [d, k]. Mode i gets
    sum_n alpha[n, i] * mode_means[n, i] / sum_n alpha[n, i]; modes whose
    summed responsibility is below the floor keep their previous mean.
    """
    if alpha.ndim != 2 or alpha.shape[0] == 0:
        raise ValueError(f"need at least one example, got alpha of shape {alpha.shape}")
    a = np.asarray(alpha, dtype=np.float64)
    m = np.asarray(mode_means, dtype=np.float64)
    mass = a.sum(axis=0)  # [d]
    weighted = (a[:, :, None] * m).sum(axis=0)  # [d, k]
    out = np.array(previous, dtype=np.float64, copy=True)
    live = mass >= RESPONSIBILITY_FLOOR
    out[live] = weighted[live] / mass[live, None]
    return out.astype(previous.dtype)


def initialize_prior(policy: PriorUpdatePolicy, shape: tuple[int, int], rng) -> np.ndarray:
    """Starting means: zeros, or seeded standard-normal draws for fixed_random."""
    if policy.mode == "fixed_random":
        return rng.normal(shape, dtype=np.float32)
    return np.zeros(shape, dtype=np.float32)


def apply_policy(policy: PriorUpdatePolicy, epoch: int, total_epochs: int,
                 model, images: np.ndarray, batch_size: int = 256) -> bool:
    """Run the closed-form update if the schedule fires; returns whether it did."""
    if epoch > total_epochs:
        raise ValueError(f"epoch {epoch} exceeds total_epochs {total_epochs}")
    if not policy.fires_at(epoch, total_epochs):
        return False
    from discondvae.tensor import Tensor

    alphas, means = [], []
    for start in range(0, images.shape[0], batch_size):
        batch = Tensor(images[start : start + batch_size], dtype=model.dtype)
        out = model.encode(batch)
        alphas.append(out.alpha.data.copy())
        means.append(out.w_mu.data.copy())
    model.prior_mu = mu_star(
        np.concatenate(alphas), np.concatenate(means), model.prior_mu
    )
    return True
