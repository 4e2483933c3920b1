"""Minimal dense tensor with reverse-mode automatic differentiation.

The engine is define-by-run: every differentiable operation wires its output
tensor to its operands together with a closure that routes the incoming
gradient. ``backward`` walks the recorded operations in reverse execution
order (tensors carry a monotonically increasing sequence id, so reverse
sequence order is a valid topological order and each node is visited exactly
once). The tape is implicit in the tensor graph and is rebuilt on every
forward pass.

Only f32 and f64 are supported. f32 is the training dtype; the verification
suite runs at f64 because finite-difference checks are unreliable at f32.

Thread-safety: tensors may be read from many threads; mutation (including
``backward``, which writes ``grad``) requires exclusive access.
"""

from __future__ import annotations

import itertools
import math
import threading
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import special as _sp

from .errors import ContractError, NumericError, ShapeError

_SEQ = itertools.count()

# Additive mask value for disallowed attention pairs. Chosen so that
# exp(x + MASK_NEG) underflows to exactly 0.0 at both f32 and f64 after
# max-subtraction, which keeps masked and unmasked attention bit-comparable
# on constant inputs.
MASK_NEG = -1.0e9

_grad_enabled = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_enabled, "value", True)


class no_grad:
    """Context manager disabling tape recording (inference mode)."""

    def __enter__(self):
        self._saved = is_grad_enabled()
        _grad_enabled.value = False
        return self

    def __exit__(self, *exc):
        _grad_enabled.value = self._saved
        return False


class Tensor:
    """Dense n-d array participating in reverse-mode autodiff.

    Invariants: ``data`` is a float32 or float64 ndarray; ``grad`` when
    present has the same shape and dtype as ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_bwd", "_seq",
                 "label", "clamp_min")

    def __init__(self, data, dtype=None, requires_grad: bool = False,
                 label: Optional[str] = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._bwd = None
        self._seq = next(_SEQ)
        self.label = label
        # Optional lower bound re-applied by the optimizer after each step
        # (used by the learned attention temperatures).
        self.clamp_min: Optional[float] = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return (f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, "
                f"requires_grad={self.requires_grad})")

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and
                       isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def backward(self):
        backward(self)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _check_dtypes(a: Tensor, b: Tensor, op: str):
    if a.data.dtype != b.data.dtype:
        raise NumericError(
            f"{op}: dtype mismatch {a.data.dtype.name} vs {b.data.dtype.name}")


def _from_op(data: np.ndarray, parents: Sequence[Tensor], bwd,
             label: Optional[str] = None) -> Tensor:
    req = is_grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req, label=label)
    if req:
        out._parents = tuple(parents)
        out._bwd = bwd
    return out


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape))
                 if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor):
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    ``loss`` must be scalar and produced on the current graph. Double
    backward is not supported; gradients are plain ndarrays.
    """
    if loss.data.size != 1:
        raise ContractError(
            f"backward expects a scalar loss, got shape {loss.shape}")
    # Iterative DFS over ancestors; graphs run to a few thousand nodes.
    seen = {id(loss)}
    order = [loss]
    stack = [loss]
    while stack:
        t = stack.pop()
        for p in t._parents:
            if id(p) not in seen:
                seen.add(id(p))
                order.append(p)
                stack.append(p)
    order.sort(key=lambda t: t._seq, reverse=True)
    if loss.grad is None:
        loss.grad = np.ones_like(loss.data)
    else:
        loss.grad += np.ones_like(loss.data)
    for t in order:
        if t._bwd is not None and t.grad is not None:
            t._bwd(t.grad)


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_dtypes(a, b, "add")
    out_data = a.data + b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _from_op(out_data, (a, b), bwd)


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_dtypes(a, b, "sub")
    out_data = a.data - b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _from_op(out_data, (a, b), bwd)


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_dtypes(a, b, "mul")
    out_data = a.data * b.data

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _from_op(out_data, (a, b), bwd)


def div(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_dtypes(a, b, "div")
    out_data = a.data / b.data

    def bwd(g):
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _from_op(out_data, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, -g)

    return _from_op(-a.data, (a,), bwd)


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    out_data = a.data ** p

    def bwd(g):
        _accum(a, g * p * a.data ** (p - 1.0))

    return _from_op(out_data, (a,), bwd)


def texp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bwd(g):
        _accum(a, g * out_data)

    return _from_op(out_data, (a,), bwd)


def tlog(a: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, g / a.data)

    return _from_op(np.log(a.data), (a,), bwd)


def tsqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def bwd(g):
        _accum(a, g * 0.5 / out_data)

    return _from_op(out_data, (a,), bwd)


def maximum(a: Tensor, floor: float) -> Tensor:
    """Elementwise max with a scalar; subgradient 1 on the tie."""
    out_data = np.maximum(a.data, floor)

    def bwd(g):
        _accum(a, g * (a.data >= floor))

    return _from_op(out_data, (a,), bwd)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    phi = 0.5 * (1.0 + _sp.erf(x * (1.0 / math.sqrt(2.0))))
    out_data = x * phi

    def bwd(g):
        pdf = np.exp(-0.5 * x * x) * (1.0 / math.sqrt(2.0 * math.pi))
        _accum(a, g * (phi + x * pdf))

    return _from_op(out_data, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; supports stacked (batched) operands via broadcasting."""
    if not isinstance(b, Tensor):
        b = _as_tensor(b, a)
    _check_dtypes(a, b, "matmul")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(
            f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner extents differ: {a.shape} x {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def bwd(g):
        _accum(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)),
                               a.shape))
        _accum(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g),
                               b.shape))

    return _from_op(out_data, (a, b), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def bwd(g):
        _accum(a, g.reshape(a.shape))

    return _from_op(a.data.reshape(shape), (a,), bwd)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = np.argsort(axes)

    def bwd(g):
        _accum(a, g.transpose(inv))

    return _from_op(a.data.transpose(axes), (a,), bwd)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(gg, a.shape).copy())

    return _from_op(out_data, (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = 1
        for ax in axes:
            count *= a.shape[ax]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    for t in tensors[1:]:
        _check_dtypes(tensors[0], t, "concat")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return _from_op(out_data, tuple(tensors), bwd)


def take_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """Gather ``table[index]`` where ``index`` is a constant int array.

    Backward scatter-adds into the table (used by the learned relative
    position bias tables).
    """
    index = np.asarray(index)
    out_data = table.data[index]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, index, g)
        _accum(table, gt)

    return _from_op(out_data, (table,), bwd)


def roll(a: Tensor, shifts, axes) -> Tensor:
    shifts = tuple(int(s) for s in shifts)
    axes = tuple(axes)

    def bwd(g):
        _accum(a, np.roll(g, tuple(-s for s in shifts), axis=axes))

    return _from_op(np.roll(a.data, shifts, axis=axes), (a,), bwd)


def _softmax_lastaxis(a: Tensor) -> Tensor:
    """Softmax over the last axis with max-subtraction for stability.

    The row max is treated as a constant, which leaves the gradient exact.
    """
    m = a.data.max(axis=-1, keepdims=True)
    e = np.exp(a.data - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        _accum(a, (g - (g * y).sum(axis=-1, keepdims=True)) * y)

    return _from_op(y, (a,), bwd)


# ---------------------------------------------------------------------------
# named kernels


def softmax_rows(m: Tensor) -> Tensor:
    """Row-wise softmax; each row of the last axis sums to 1.

    Raises NumericError on non-finite input.
    """
    if not np.isfinite(m.data).all():
        raise NumericError("softmax_rows: non-finite input")
    if m.shape[-1] < 1:
        raise ShapeError("softmax_rows: empty rows")
    return _softmax_lastaxis(m)


def cosine_similarity_matrix(a: Tensor, b: Tensor, eps: float = 1e-6) -> Tensor:
    """All-pairs cosine similarity between row sets.

    Entry (i, j) = dot(a_i, b_j) / (max(|a_i|, eps) * max(|b_j|, eps)).
    Supports stacked leading dimensions; the contraction axis is the last.
    The clamp is applied to the squared norm (same value, but the sqrt
    backward stays finite on exactly-zero rows).
    """
    an = div(a, tsqrt(maximum(tsum(mul(a, a), axis=-1, keepdims=True),
                              eps * eps)))
    bn = div(b, tsqrt(maximum(tsum(mul(b, b), axis=-1, keepdims=True),
                              eps * eps)))
    perm = list(range(bn.ndim))
    perm[-1], perm[-2] = perm[-2], perm[-1]
    return matmul(an, transpose(bn, perm))


def cyclic_shift(x: Tensor, dy: int, dx: int) -> Tensor:
    """Toroidal roll of an [H, W, C] or [B, H, W, C] grid.

    Positive dy moves rows down, positive dx moves columns right;
    shifting by (dy, dx) then (-dy, -dx) is the exact identity.
    """
    if x.ndim == 3:
        axes = (0, 1)
    elif x.ndim == 4:
        axes = (1, 2)
    else:
        raise ShapeError(f"cyclic_shift expects a spatial grid, got {x.shape}")
    return roll(x, (dy, dx), axes)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor,
              eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis with affine parameters."""
    mu = tmean(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = tmean(mul(xc, xc), axis=-1, keepdims=True)
    inv = power(add(var, Tensor(np.asarray(eps, dtype=x.data.dtype))), -0.5)
    return add(mul(mul(xc, inv), gamma), beta)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Affine map over the last axis: x @ w (+ b). ``w`` is [in, out]."""
    y = matmul(x, w)
    if b is not None:
        y = add(y, b)
    return y


def window_partition(x: Tensor, w: int) -> Tensor:
    """Split an [H, W, C] or [B, H, W, C] grid into flat w*w windows.

    Returns [num_windows, w*w, C] (batch folded into the window axis,
    batch-major then row-major over window positions). ``w`` must divide
    both spatial extents.
    """
    if x.ndim == 3:
        h, wd, c = x.shape
        b = None
    elif x.ndim == 4:
        b, h, wd, c = x.shape
    else:
        raise ShapeError(f"window_partition expects a grid, got {x.shape}")
    if h % w or wd % w:
        raise ShapeError(
            f"window size {w} does not divide grid {h}x{wd}")
    if b is None:
        t = reshape(x, (h // w, w, wd // w, w, c))
        t = transpose(t, (0, 2, 1, 3, 4))
        return reshape(t, ((h // w) * (wd // w), w * w, c))
    t = reshape(x, (b, h // w, w, wd // w, w, c))
    t = transpose(t, (0, 1, 3, 2, 4, 5))
    return reshape(t, (b * (h // w) * (wd // w), w * w, c))


def window_reverse(windows: Tensor, w: int, h: int, wd: int,
                   batch: Optional[int] = None) -> Tensor:
    """Inverse of :func:`window_partition`."""
    c = windows.shape[-1]
    if batch is None:
        t = reshape(windows, (h // w, wd // w, w, w, c))
        t = transpose(t, (0, 2, 1, 3, 4))
        return reshape(t, (h, wd, c))
    t = reshape(windows, (batch, h // w, wd // w, w, w, c))
    t = transpose(t, (0, 1, 3, 2, 4, 5))
    return reshape(t, (batch, h, wd, c))


def mean_pool_tokens(x: Tensor) -> Tensor:
    """Mean over all token positions, keeping the channel axis."""
    if x.ndim < 2:
        raise ShapeError(f"mean_pool_tokens expects tokens, got {x.shape}")
    axes = tuple(range(x.ndim - 1))
    return tmean(x, axis=axes)


def mean_pool_map(x: Tensor) -> Tensor:
    """Mean over the spatial axes of a batched [B, H, W, C] grid -> [B, C]."""
    if x.ndim != 4:
        raise ShapeError(f"mean_pool_map expects [B,H,W,C], got {x.shape}")
    return tmean(x, axis=(1, 2))


def cross_entropy_soft(logits: Tensor, targets: Tensor) -> Tensor:
    """Mean cross-entropy between row softmax of logits and soft targets.

    ``targets`` rows are expected to be non-negative and sum to 1 (mixup
    produces such rows); gradients flow to the logits only.
    """
    if logits.shape != targets.shape:
        raise ShapeError(
            f"cross_entropy_soft: {logits.shape} vs {targets.shape}")
    m = logits.data.max(axis=-1, keepdims=True)
    z = sub(logits, Tensor(m))
    lse = tlog(tsum(texp(z), axis=-1, keepdims=True))
    logp = sub(z, lse)
    per_row = neg(tsum(mul(Tensor(targets.data), logp), axis=-1))
    return tmean(per_row)


def identity(n: int, dtype=np.float32) -> Tensor:
    return Tensor(np.eye(n, dtype=dtype))
