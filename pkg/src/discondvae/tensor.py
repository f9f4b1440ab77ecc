"""Dense tensors with reverse-mode automatic differentiation.

float32 is the working precision for all model code; float64 graphs are
supported so finite-difference oracles can run at full accuracy. Reductions
accumulate in float64 internally regardless of tensor dtype.

The primitive set is exactly what the conv encoder/decoder stacks and the
capacity objective need: conv2d / conv_transpose2d (stride s, kernel k,
padding p), matmul, relu/sigmoid/softmax/log_softmax, elementwise
arithmetic with broadcasting, abs/clamp-min, sum/mean reductions, concat,
reshape, narrow, per-row mode selection, and a fused stable
binary-cross-entropy-with-logits.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from discondvae import backend

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference/metrics)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class GraphError(ValueError):
    """Structural misuse of the graph (shapes, non-scalar loss, ...)."""


class NumericsError(FloatingPointError):
    """A backward pass produced a NaN; names the producing op."""


_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """A dense array plus an optional position in a backward graph."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents = ()
        self._backward = None

    # -- construction used by ops ------------------------------------
    @staticmethod
    def _result(data, parents, backward, op):
        t = Tensor.__new__(Tensor)
        t.data = data
        t.grad = None
        t.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        if t.requires_grad:
            t.op = op
            t._parents = tuple(parents)
            t._backward = backward
        else:
            t.op = op
            t._parents = ()
            t._backward = None
        return t

    # -- ergonomics ----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, op={self.op!r})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else np.float32
    return Tensor(np.asarray(x), dtype=dtype)


def _unbroadcast(grad, shape):
    """Reduce a broadcast gradient back to `shape`."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out = a.data * b.data

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        )

    return Tensor._result(out, (a, b), backward, "mul")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return Tensor._result(out, (a,), backward, "exp")


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def backward(g):
        return (g / a.data,)

    return Tensor._result(out, (a,), backward, "log")


def square(a: Tensor) -> Tensor:
    out = a.data * a.data

    def backward(g):
        return (g * (2.0 * a.data),)

    return Tensor._result(out, (a,), backward, "square")


def abs_(a: Tensor) -> Tensor:
    out = np.abs(a.data)

    def backward(g):
        # subgradient at 0 taken as 0
        return (g * np.sign(a.data),)

    return Tensor._result(out, (a,), backward, "abs")


def clamp_min(a: Tensor, low: float) -> Tensor:
    out = np.maximum(a.data, a.data.dtype.type(low))

    def backward(g):
        return (g * (a.data > low).astype(a.data.dtype),)

    return Tensor._result(out, (a,), backward, "clamp_min")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, a.data.dtype.type(0))

    def backward(g):
        return (g * (a.data > 0).astype(a.data.dtype),)

    return Tensor._result(out, (a,), backward, "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        return (g * out * (1.0 - out),)

    return Tensor._result(out, (a,), backward, "sigmoid")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return Tensor._result(out, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._result(out, (a,), backward, "log_softmax")


# ---------------------------------------------------------------------
# reductions / shape ops
# ---------------------------------------------------------------------

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.data.dtype)

    def backward(g):
        gg = g
        if not keepdims and axis is not None:
            axes = axis if isinstance(axis, tuple) else (axis,)
            axes = tuple(ax % a.data.ndim for ax in axes)
            shape = tuple(
                1 if i in axes else s for i, s in enumerate(a.data.shape)
            )
            gg = g.reshape(shape)
        return (np.broadcast_to(gg, a.data.shape).astype(a.data.dtype, copy=False),)

    return Tensor._result(out, (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.data.shape[ax % a.data.ndim]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.data.shape),)

    return Tensor._result(out, (a,), backward, "reshape")


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return Tensor._result(out, tuple(tensors), backward, "concat")


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    axis = axis % a.data.ndim
    idx = tuple(
        slice(start, start + length) if i == axis else slice(None)
        for i in range(a.data.ndim)
    )
    out = np.ascontiguousarray(a.data[idx])

    def backward(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return Tensor._result(out, (a,), backward, "narrow")


def select_modes(a: Tensor, indices) -> Tensor:
    """Pick row `indices[b]` from axis 1 of a [B, d, ...] tensor.

    Gradient flows only into the selected rows; all other modes receive an
    exactly-zero gradient.
    """
    idx = np.asarray(indices)
    if idx.shape != (a.data.shape[0],):
        raise GraphError(
            f"select_modes needs one index per row, got {idx.shape} for {a.data.shape}"
        )
    rows = np.arange(a.data.shape[0])
    out = np.ascontiguousarray(a.data[rows, idx])

    def backward(g):
        full = np.zeros_like(a.data)
        full[rows, idx] = g
        return (full,)

    return Tensor._result(out, (a,), backward, "select_modes")


def expand_modes(a: Tensor, indices, num_modes: int) -> Tensor:
    """Adjoint of select_modes: place row b of a [B, ...] tensor at position
    indices[b] along a new axis 1 of extent num_modes, zeros elsewhere."""
    idx = np.asarray(indices)
    if idx.shape != (a.data.shape[0],):
        raise GraphError(
            f"expand_modes needs one index per row, got {idx.shape} for {a.data.shape}"
        )
    rows = np.arange(a.data.shape[0])
    out = np.zeros((a.data.shape[0], num_modes) + a.data.shape[1:], dtype=a.data.dtype)
    out[rows, idx] = a.data

    def backward(g):
        return (np.ascontiguousarray(g[rows, idx]),)

    return Tensor._result(out, (a,), backward, "expand_modes")


# ---------------------------------------------------------------------
# linear algebra / network primitives
# ---------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise GraphError(
            f"matmul supports 2-D operands, got {a.data.shape} @ {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise GraphError(
            f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}"
        )
    out = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._result(out, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


def _conv_out_extent(h, k, s, p):
    return (h + 2 * p - k) // s + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. x: [B,Cin,H,W], w: [Cout,Cin,kh,kw]."""
    bsz, cin, h, wid = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin != cin_w:
        raise GraphError(
            f"conv2d channel mismatch: input has {cin}, kernel expects {cin_w}"
        )
    if h + 2 * padding < kh or wid + 2 * padding < kw:
        raise GraphError(
            f"conv2d kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{wid + 2 * padding}"
        )
    ho = _conv_out_extent(h, kh, stride, padding)
    wo = _conv_out_extent(wid, kw, stride, padding)
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = backend.im2col(xp, kh, kw, stride, stride)  # [B, K, L]
    w2 = w.data.reshape(cout, -1)
    out = np.matmul(w2, cols)  # [B, Cout, L]
    if b is not None:
        out = out + b.data.reshape(1, cout, 1)
    out = out.reshape(bsz, cout, ho, wo)

    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g3 = g.reshape(bsz, cout, ho * wo)
        gt = np.ascontiguousarray(g3.transpose(1, 0, 2)).reshape(cout, -1)
        ct = np.ascontiguousarray(cols.transpose(1, 0, 2)).reshape(cols.shape[1], -1)
        dw = (gt @ ct.T).reshape(w.data.shape)
        dcols = np.matmul(w2.T, g3)
        dxp = backend.col2im(dcols, xp.shape[2], xp.shape[3], kh, kw, stride, stride)
        dx = dxp[:, :, padding : padding + h, padding : padding + wid] if padding else dxp
        dx = np.ascontiguousarray(dx)
        if b is None:
            return dx, dw
        db = g3.sum(axis=(0, 2), dtype=np.float64).astype(g.dtype)
        return dx, dw, db

    return Tensor._result(out, parents, backward, "conv2d")


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed 2-D convolution. x: [B,Cin,H,W], w: [Cin,Cout,kh,kw].

    Output extent is (H-1)*stride - 2*padding + kh.
    """
    bsz, cin, h, wid = x.data.shape
    cin_w, cout, kh, kw = w.data.shape
    if cin != cin_w:
        raise GraphError(
            f"conv_transpose2d channel mismatch: input has {cin}, kernel expects {cin_w}"
        )
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (wid - 1) * stride - 2 * padding + kw
    if ho <= 0 or wo <= 0:
        raise GraphError(
            f"conv_transpose2d output extent {ho}x{wo} is not positive"
        )
    hfull, wfull = ho + 2 * padding, wo + 2 * padding
    x3 = x.data.reshape(bsz, cin, h * wid)
    w2 = w.data.reshape(cin, cout * kh * kw)
    cols = np.matmul(w2.T, x3)  # [B, Cout*kh*kw, H*W]
    full = backend.col2im(cols, hfull, wfull, kh, kw, stride, stride)
    out = full[:, :, padding : padding + ho, padding : padding + wo] if padding else full
    out = np.ascontiguousarray(out)
    if b is not None:
        out = out + b.data.reshape(1, cout, 1, 1)

    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gp = g
        if padding:
            gp = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        gcols = backend.im2col(gp, kh, kw, stride, stride)  # [B, Cout*kh*kw, H*W]
        dx = np.matmul(w2, gcols).reshape(x.data.shape)
        xt = np.ascontiguousarray(x3.transpose(1, 0, 2)).reshape(cin, -1)
        gt = np.ascontiguousarray(gcols.transpose(1, 0, 2)).reshape(gcols.shape[1], -1)
        dw = (xt @ gt.T).reshape(w.data.shape)
        if b is None:
            return dx, dw
        db = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(g.dtype)
        return dx, dw, db

    return Tensor._result(out, parents, backward, "conv_transpose2d")


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Stable elementwise Bernoulli NLL from logits; targets carry no grad."""
    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=logits.data.dtype)
    x = logits.data
    out = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        pos = x >= 0
        sig = np.empty_like(x)
        sig[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        sig[~pos] = ex / (1.0 + ex)
        return (g * (sig - t),)

    return Tensor._result(out, (logits,), backward, "bce_with_logits")


# ---------------------------------------------------------------------
# backward driver
# ---------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss.

    Accumulates into `.grad` of every reachable tensor with
    requires_grad=True. Raises NumericsError naming the op whose backward
    produced a NaN.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = g.copy()
            else:
                node.grad = node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if not parent.requires_grad or pg is None:
                continue
            if np.isnan(pg).any():
                raise NumericsError(f"NaN gradient produced by op '{node.op}'")
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
