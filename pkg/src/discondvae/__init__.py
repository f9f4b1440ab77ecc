"""Conditional disentanglement toolkit: mixture-prior VAEs, capacity-annealed
objectives, and the metrics to score them, on a small numpy autodiff core."""

__version__ = "0.1.0"

from discondvae.tensor import Tensor, backward  # noqa: F401
