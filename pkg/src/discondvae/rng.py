"""Counter-based random source with an explicitly serializable state.

Every draw is a pure function of (seed, counter), so a training run that
checkpoints its counter and reloads it continues the exact stream. The
generator is splitmix64: output i is the splitmix64 finalizer applied to
seed + (counter + i + 1) * GOLDEN, all mod 2**64.
"""

from __future__ import annotations

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)

_U64 = np.uint64
_TWO53 = float(1 << 53)


def _finalize(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> _U64(30))) * _M1
    z = (z ^ (z >> _U64(27))) * _M2
    return z ^ (z >> _U64(31))


class RandomSource:
    """Deterministic stream of uniforms/normals/gumbels keyed by a counter."""

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.counter = int(counter) & 0xFFFFFFFFFFFFFFFF

    # -- state --------------------------------------------------------
    def state(self) -> tuple[int, int]:
        return self.seed, self.counter

    def set_state(self, seed: int, counter: int) -> None:
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.counter = int(counter) & 0xFFFFFFFFFFFFFFFF

    # -- raw draws ------------------------------------------------------
    def raw(self, n: int) -> np.ndarray:
        """n raw uint64 words; advances the counter by n."""
        idx = np.arange(1, n + 1, dtype=np.uint64) + _U64(self.counter)
        with np.errstate(over="ignore"):
            z = _U64(self.seed) + idx * GOLDEN
            out = _finalize(z)
        self.counter = (self.counter + n) & 0xFFFFFFFFFFFFFFFF
        return out

    def uniform(self, shape=(), dtype=np.float32) -> np.ndarray:
        """Uniform on [0, 1) with 53-bit mantissas."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        u = (self.raw(n) >> _U64(11)).astype(np.float64) / _TWO53
        return u.reshape(shape).astype(dtype)

    def normal(self, shape=(), dtype=np.float32) -> np.ndarray:
        """Standard normals via Box-Muller; counter moves by 2*ceil(n/2)."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        pairs = (n + 1) // 2
        u1 = (self.raw(pairs) >> _U64(11)).astype(np.float64) / _TWO53
        u2 = (self.raw(pairs) >> _U64(11)).astype(np.float64) / _TWO53
        r = np.sqrt(-2.0 * np.log(1.0 - u1))  # 1-u1 keeps the log argument in (0, 1]
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z.reshape(shape).astype(dtype)

    def gumbel(self, shape=(), dtype=np.float32) -> np.ndarray:
        """Standard Gumbel(0, 1) draws, clipped away from both endpoints."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        u = (self.raw(n) >> _U64(11)).astype(np.float64) / _TWO53
        u = np.clip(u, 1e-10, 1.0 - 1e-7)
        g = -np.log(-np.log(u))
        return g.reshape(shape).astype(dtype)

    def permutation(self, n: int) -> np.ndarray:
        """A uniform permutation of range(n) from one block of raw keys."""
        keys = self.raw(n)
        return np.argsort(keys, kind="stable")
