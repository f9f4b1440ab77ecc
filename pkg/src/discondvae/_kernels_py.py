"""Numpy fallback for the hot convolution kernels.

Both backends share one contract: `col2im` adds overlapping window
contributions to a destination cell in ascending kernel-offset order
(i, then j), so the compiled and fallback paths produce bit-identical
results and either can be active under the determinism guarantees.
"""

import numpy as np

COMPILED = False


def _check_dtype(arr):
    if arr.dtype not in (np.float32, np.float64):
        raise TypeError(f"kernels support float32/float64, got {arr.dtype}")


def im2col(xp, kh, kw, sh, sw):
    """Unfold padded images [B, C, Hp, Wp] into columns [B, C*kh*kw, Ho*Wo]."""
    _check_dtype(xp)
    b, c, hp, wp = xp.shape
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    cols = np.empty((b, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw]
    return cols.reshape(b, c * kh * kw, ho * wo)


def col2im(cols, hp, wp, kh, kw, sh, sw):
    """Fold columns back to padded-image shape, summing overlaps."""
    _check_dtype(cols)
    b = cols.shape[0]
    c = cols.shape[1] // (kh * kw)
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    cols6 = cols.reshape(b, c, kh, kw, ho, wo)
    xp = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += cols6[:, :, i, j]
    return xp
