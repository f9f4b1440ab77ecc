"""Kernel backend selection.

Imports the compiled extension when available, otherwise the numpy
fallback. Set DISCONDVAE_PURE_PY=1 to force the fallback (used by the
benchmark and the backend-equivalence test).
"""

import os

if os.environ.get("DISCONDVAE_PURE_PY"):
    from discondvae import _kernels_py as _impl
else:
    try:
        from discondvae import _kernels as _impl  # type: ignore[attr-defined]
    except ImportError:
        from discondvae import _kernels_py as _impl

COMPILED = _impl.COMPILED
im2col = _impl.im2col
col2im = _impl.col2im


def backend_name() -> str:
    return "compiled" if COMPILED else "numpy"
