# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled im2col/col2im kernels.

Must stay bit-identical to discondvae._kernels_py: col2im accumulates
window contributions per destination cell in ascending (i, j) kernel-offset
order, matching the fallback's loop nesting.
"""

import numpy as np

cimport cython
cimport numpy as cnp

ctypedef fused floating:
    cnp.float32_t
    cnp.float64_t

COMPILED = True


def im2col(cnp.ndarray xp, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t sh, Py_ssize_t sw):
    """Unfold padded images [B, C, Hp, Wp] into columns [B, C*kh*kw, Ho*Wo]."""
    xp = np.ascontiguousarray(xp)
    if xp.dtype == np.float32:
        return _im2col[cnp.float32_t](xp, kh, kw, sh, sw)
    elif xp.dtype == np.float64:
        return _im2col[cnp.float64_t](xp, kh, kw, sh, sw)
    raise TypeError(f"im2col expects float32/float64, got {xp.dtype}")


def col2im(cnp.ndarray cols, Py_ssize_t hp, Py_ssize_t wp, Py_ssize_t kh,
           Py_ssize_t kw, Py_ssize_t sh, Py_ssize_t sw):
    """Fold columns back to padded-image shape, summing overlaps."""
    cols = np.ascontiguousarray(cols)
    if cols.dtype == np.float32:
        return _col2im[cnp.float32_t](cols, hp, wp, kh, kw, sh, sw)
    elif cols.dtype == np.float64:
        return _col2im[cnp.float64_t](cols, hp, wp, kh, kw, sh, sw)
    raise TypeError(f"col2im expects float32/float64, got {cols.dtype}")


@cython.boundscheck(False)
@cython.wraparound(False)
cdef _im2col(floating[:, :, :, ::1] xp, Py_ssize_t kh, Py_ssize_t kw,
             Py_ssize_t sh, Py_ssize_t sw):
    cdef Py_ssize_t b = xp.shape[0], c = xp.shape[1], hp = xp.shape[2], wp = xp.shape[3]
    cdef Py_ssize_t ho = (hp - kh) // sh + 1
    cdef Py_ssize_t wo = (wp - kw) // sw + 1
    dtype = np.float32 if floating is cnp.float32_t else np.float64
    out = np.empty((b, c * kh * kw, ho * wo), dtype=dtype)
    cdef floating[:, :, ::1] cols = out
    cdef Py_ssize_t n, ch, i, j, oh, ow, row
    with nogil:
        for n in range(b):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        for oh in range(ho):
                            for ow in range(wo):
                                cols[n, row, oh * wo + ow] = xp[n, ch, oh * sh + i, ow * sw + j]
    return out


@cython.boundscheck(False)
@cython.wraparound(False)
cdef _col2im(floating[:, :, ::1] cols, Py_ssize_t hp, Py_ssize_t wp,
             Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t sh, Py_ssize_t sw):
    cdef Py_ssize_t b = cols.shape[0]
    cdef Py_ssize_t c = cols.shape[1] // (kh * kw)
    cdef Py_ssize_t ho = (hp - kh) // sh + 1
    cdef Py_ssize_t wo = (wp - kw) // sw + 1
    dtype = np.float32 if floating is cnp.float32_t else np.float64
    out = np.zeros((b, c, hp, wp), dtype=dtype)
    cdef floating[:, :, :, ::1] xp = out
    cdef Py_ssize_t n, ch, i, j, oh, ow, row
    with nogil:
        for n in range(b):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        for oh in range(ho):
                            for ow in range(wo):
                                xp[n, ch, oh * sh + i, ow * sw + j] += cols[n, row, oh * wo + ow]
    return out
