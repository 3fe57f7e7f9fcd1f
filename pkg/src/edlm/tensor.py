"""Dense float tensors with a dynamic reverse-mode autodiff tape.

Training arithmetic is float32; oracle and gradient-check code builds the
same graphs in float64. Every op checks its output for NaN/Inf and raises
NumericError instead of letting them propagate. Tensors are treated as
immutable after construction except for `.grad` accumulation and optimizer
updates, which require a single writer.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import InputError, NumericError, ShapeError, UsageError

_FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / teacher passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr: np.ndarray, ctx: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced in {ctx}")


class Tensor:
    """n-d float array plus the tape handle recorded by the op that made it."""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Tensor | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Operator sugar; all arithmetic goes through the module-level ops.
    def __add__(self, other):
        return add(self, _coerce(other, self))

    def __radd__(self, other):
        return add(_coerce(other, self), self)

    def __sub__(self, other):
        return sub(self, _coerce(other, self))

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, _coerce(other, self))

    def __rmul__(self, other):
        return mul(_coerce(other, self), self)

    def __truediv__(self, other):
        return div(self, _coerce(other, self))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        raise ShapeError(f"gradient shape {g.shape} != tensor shape {t.data.shape}")
    _check_finite(g, "gradient")
    if t.grad is None:
        t.grad = Tensor(np.zeros_like(t.data))
    t.grad.data += g


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None], ctx: str) -> Tensor:
    _check_finite(data, ctx)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
    return out


def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reverse numpy broadcasting: reduce `g` back down to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / broadcast arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g):
        _accum(a, _sum_to_shape(g, a.data.shape).astype(a.data.dtype, copy=False))
        _accum(b, _sum_to_shape(g, b.data.shape).astype(b.data.dtype, copy=False))

    return _make(data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def backward(g):
        _accum(a, _sum_to_shape(g, a.data.shape).astype(a.data.dtype, copy=False))
        _accum(b, _sum_to_shape(-g, b.data.shape).astype(b.data.dtype, copy=False))

    return _make(data, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(g):
        _accum(a, _sum_to_shape(g * b.data, a.data.shape).astype(a.data.dtype, copy=False))
        _accum(b, _sum_to_shape(g * a.data, b.data.shape).astype(b.data.dtype, copy=False))

    return _make(data, (a, b), backward, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data

    def backward(g):
        _accum(a, _sum_to_shape(g / b.data, a.data.shape).astype(a.data.dtype, copy=False))
        _accum(b, _sum_to_shape(-g * a.data / (b.data * b.data), b.data.shape).astype(b.data.dtype, copy=False))

    return _make(data, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, -g)

    return _make(-a.data, (a,), backward, "neg")


def sqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)

    def backward(g):
        _accum(a, g / (2.0 * data))

    return _make(data, (a,), backward, "sqrt")


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def backward(g):
        _accum(a, g * (1.0 - data * data))

    return _make(data, (a,), backward, "tanh")


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = a.data.reshape(shape)

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(data, (a,), backward, "reshape")


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    data = a.data.transpose(axes)  # view: tied parameters rely on shared storage
    inv = tuple(np.argsort(axes))

    def backward(g):
        _accum(a, np.ascontiguousarray(g.transpose(inv)))

    return _make(data, (a,), backward, "transpose")


def take(a: Tensor, key) -> Tensor:
    """Indexing with ints, slices, or integer/bool arrays; gradient scatters back."""
    data = a.data[key]
    if not isinstance(data, np.ndarray):
        data = np.asarray(data, dtype=a.data.dtype)
    else:
        data = data.copy()
    parts = key if isinstance(key, tuple) else (key,)
    advanced = any(isinstance(p, (np.ndarray, list)) for p in parts)

    def backward(g):
        full = np.zeros_like(a.data)
        if advanced:
            np.add.at(full, key, g)  # duplicate indices must accumulate
        else:
            full[key] += g
        _accum(a, full)

    return _make(data, (a,), backward, "take")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: table (V, H), ids int array of any shape -> ids.shape + (H,)."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise InputError(f"embedding ids out of range [0, {table.data.shape[0]})")
    data = table.data[ids]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        _accum(table, full)

    return _make(data, (table,), backward, "embedding")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _restore_axes(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if not keepdims:
        if axis is None:
            g = g.reshape((1,) * len(shape))
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(ax % len(shape) for ax in axes)
            for ax in sorted(axes):
                g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        _accum(a, np.ascontiguousarray(_restore_axes(g, a.data.shape, axis, keepdims)))

    return _make(np.asarray(data, dtype=a.data.dtype), (a,), backward, "sum")


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size if axis is None else a.data.size // data.size if data.size else 1

    def backward(g):
        _accum(a, np.ascontiguousarray(_restore_axes(g, a.data.shape, axis, keepdims)) / n)

    return _make(np.asarray(data, dtype=a.data.dtype), (a,), backward, "mean")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy stacking semantics; both operands must be >= 2-d."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul requires operands with at least 2 dimensions")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}")
    data = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        _accum(a, _sum_to_shape(ga, a.data.shape))
        _accum(b, _sum_to_shape(gb, b.data.shape))

    return _make(data, (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# nonlinearities and normalization
# ---------------------------------------------------------------------------

def softmax(a: Tensor, axis: int) -> Tensor:
    """Max-subtracted softmax along `axis`; rows sum to 1."""
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {a.data.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        _accum(a, (g - inner) * data)

    return _make(data, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int) -> Tensor:
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeError(f"log_softmax axis {axis} invalid for shape {a.data.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        _accum(a, g - np.exp(data) * g.sum(axis=axis, keepdims=True))

    return _make(data, (a,), backward, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    h = x.data.shape[-1]
    if gain.data.shape != (h,) or bias.data.shape != (h,):
        raise ShapeError(f"layer_norm gain/bias must have shape ({h},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * gain.data + bias.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        _accum(gain, (g * xhat).sum(axis=lead).astype(gain.data.dtype, copy=False))
        _accum(bias, g.sum(axis=lead).astype(bias.data.dtype, copy=False))
        dxhat = g * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        _accum(x, dx.astype(x.data.dtype, copy=False))

    return _make(data, (x, gain, bias), backward, "layer_norm")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_TANH_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor, approximate: bool = False) -> Tensor:
    """x * Phi(x); exact Gaussian CDF by default, tanh approximation when asked."""
    if approximate:
        u = _TANH_C * (x.data + 0.044715 * x.data ** 3)
        t = np.tanh(u)
        data = 0.5 * x.data * (1.0 + t)

        def backward(g):
            du = _TANH_C * (1.0 + 3 * 0.044715 * x.data ** 2)
            d = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du
            _accum(x, g * d)

    else:
        phi_cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
        data = x.data * phi_cdf

        def backward(g):
            pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
            _accum(x, g * (phi_cdf + x.data * pdf))

    return _make(data.astype(x.data.dtype, copy=False), (x,), backward, "gelu")


def dropout(x: Tensor, rate: float, rng) -> Tensor:
    """Inverted dropout; only called in train mode. `rng` is a SplitRng."""
    if not 0.0 <= rate < 1.0:
        raise InputError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    keep = (rng.random(size=x.data.shape) >= rate).astype(x.data.dtype)
    scale = 1.0 / (1.0 - rate)
    mask = keep * np.asarray(scale, dtype=x.data.dtype)
    data = x.data * mask

    def backward(g):
        _accum(x, g * mask)

    return _make(data, (x,), backward, "dropout")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_index: int = -100) -> Tensor:
    """Mean negative log-softmax over non-ignored rows.

    logits (N, V), targets int (N,). Rows whose target equals `ignore_index`
    contribute nothing. If every row is ignored the loss is exactly 0 and the
    returned tensor carries `all_ignored=True`.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects 2-d logits, got shape {logits.data.shape}")
    targets = np.asarray(targets)
    n, v = logits.data.shape
    if targets.shape != (n,):
        raise ShapeError(f"targets shape {targets.shape} != ({n},)")
    active = targets != ignore_index
    checked = targets[active]
    if checked.size and (checked.min() < 0 or checked.max() >= v):
        raise InputError(f"target class out of range [0, {v})")
    m = int(active.sum())

    if m == 0:
        out = _make(np.asarray(0.0, dtype=logits.data.dtype), (logits,), lambda g: _accum(logits, np.zeros_like(logits.data)), "cross_entropy")
        out.all_ignored = True
        return out

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    idx = np.nonzero(active)[0]
    data = np.asarray(-logp[idx, targets[idx]].mean(), dtype=logits.data.dtype)

    def backward(g):
        grad = np.zeros_like(logits.data)
        p = np.exp(logp[idx])
        p[np.arange(m), targets[idx]] -= 1.0
        grad[idx] = p * (g / m)
        _accum(logits, grad)

    out = _make(data, (logits,), backward, "cross_entropy")
    out.all_ignored = False
    return out


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate `.grad` on every requires_grad tensor that produced `loss`."""
    if loss.data.ndim != 0:
        raise UsageError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise UsageError("loss is not connected to any tensor that requires grad")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))

    loss.grad = Tensor(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad.data)
