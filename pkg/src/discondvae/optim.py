"""First-moment/second-moment adaptive SGD (Adam) over named parameters."""

from __future__ import annotations

import numpy as np

from discondvae.tensor import Tensor


class Adam:
    """Adam with bias correction; state is exposed for checkpointing.

    `params` maps stable names to leaf tensors; iteration order of the dict
    fixes the update order, which keeps runs bit-reproducible.
    """

    def __init__(self, params: dict[str, Tensor], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= (self.lr * update).astype(p.data.dtype, copy=False)

    # -- checkpoint interop --------------------------------------------
    def load_state(self, m: dict[str, np.ndarray], v: dict[str, np.ndarray], t: int) -> None:
        for k in self.params:
            self.m[k] = np.ascontiguousarray(m[k], dtype=self.m[k].dtype)
            self.v[k] = np.ascontiguousarray(v[k], dtype=self.v[k].dtype)
        self.t = int(t)
