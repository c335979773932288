"""Dense tensors with reverse-mode automatic differentiation.

Row-major numpy storage, a dynamic graph built by the ops below, and a
deterministic topological-order backward pass. Precision is a process-wide
mode: float32 for training, float64 when verifying gradients.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf as _erf

__all__ = [
    "Tensor",
    "tensor",
    "backward",
    "set_default_dtype",
    "default_dtype",
    "using_dtype",
    "no_grad",
    "grad_enabled",
    "set_debug",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "sqrt",
    "gelu",
    "matmul",
    "reshape",
    "transpose",
    "concat",
    "sum_",
    "mean",
    "max_",
    "softmax",
    "layer_norm",
    "mask_fill",
    "embedding_lookup",
    "cross_entropy",
    "dropout",
]

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
_DEBUG = False


def set_default_dtype(dtype) -> None:
    """Set the process-wide tensor dtype (np.float32 or np.float64)."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported tensor dtype {dt}")
    _DEFAULT_DTYPE = dt.type


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def using_dtype(dtype):
    """Temporarily switch the default dtype (used by gradient-check suites)."""
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def set_debug(flag: bool) -> None:
    """Enable extra finiteness assertions in numerically hot ops."""
    global _DEBUG
    _DEBUG = bool(flag)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """A dense n-d array node in the differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype != _DEFAULT_DTYPE:
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._vjp: Optional[Callable] = None

    # -- introspection ------------------------------------------------
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

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- grad management ----------------------------------------------
    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, retain_graph: bool = False) -> None:
        backward(self, retain_graph=retain_graph)

    # -- operator sugar -----------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp: Optional[Callable]) -> Tensor:
    """Wrap a forward result, recording the graph edge when grad is on."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._vjp = vjp
    else:
        out._parents = ()
        out._vjp = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to `shape`, inverting numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- pointwise arithmetic ---------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(out, (a, b), vjp)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)

    def vjp(g):
        return (g / (2.0 * out),)

    return _make(out, (a,), vjp)


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a) -> Tensor:
    """Gaussian-error linear unit, exact erf form."""
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + _erf(x * _INV_SQRT2))
    out = x * cdf

    def vjp(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (cdf + x * pdf),)

    return _make(out.astype(x.dtype, copy=False), (a,), vjp)


# -- matmul ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product; leading dims broadcast, inner dims must agree."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} vs {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        ga = _unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape)
        gb = _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape)
        return ga, gb

    return _make(out, (a, b), vjp)


# -- shape ops ----------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.shape),)

    return _make(out, (a,), vjp)


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    out = np.transpose(a.data, axes)
    inv = tuple(np.argsort(axes))

    def vjp(g):
        return (np.transpose(g, inv),)

    return _make(out, (a,), vjp)


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat of zero tensors")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, parts, vjp)


# -- reductions ----------------------------------------------------------

def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if not keepdims and axis is not None:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        return (_expand_reduced(np.asarray(g), a.shape, axis, keepdims).astype(a.dtype, copy=False),)

    return _make(np.asarray(out), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.size / max(out.size, 1)

    def vjp(g):
        scaled = np.asarray(g) / count
        return (_expand_reduced(scaled, a.shape, axis, keepdims).astype(a.dtype, copy=False),)

    return _make(np.asarray(out), (a,), vjp)


def max_(a, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; gradient splits equally across tying entries."""
    a = _as_tensor(a)
    out = a.data.max(axis=axis, keepdims=keepdims)

    def vjp(g):
        full = _expand_reduced(np.asarray(out), a.shape, axis, keepdims)
        hit = (a.data == full).astype(a.dtype)
        counts = hit.sum(axis=axis, keepdims=True) if axis is not None else hit.sum()
        gfull = _expand_reduced(np.asarray(g), a.shape, axis, keepdims)
        return (gfull * hit / counts,)

    return _make(np.asarray(out), (a,), vjp)


# -- neural-net ops -------------------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    """Row-stochastic softmax along `axis`, stabilized by max subtraction."""
    a = _as_tensor(a)
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    # rows that are entirely -inf would yield NaN; callers mask responsibly
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)
    if _DEBUG and not np.all(np.isfinite(out)):
        raise FloatingPointError("softmax produced non-finite values")

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _make(out, (a,), vjp)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    a, gain, bias = _as_tensor(a), _as_tensor(gain), _as_tensor(bias)
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match last axis {d}"
        )
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xn = xc * inv
    out = xn * gain.data + bias.data

    def vjp(g):
        dxn = g * gain.data
        dx = inv * (
            dxn
            - dxn.mean(axis=-1, keepdims=True)
            - xn * (dxn * xn).mean(axis=-1, keepdims=True)
        )
        red = tuple(range(x.ndim - 1))
        dgain = (g * xn).sum(axis=red)
        dbias = g.sum(axis=red)
        return dx, dgain, dbias

    return _make(out, (a, gain, bias), vjp)


def mask_fill(a, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where `mask` is True with `value` (often -inf)."""
    a = _as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.dtype.type(value), a.data)

    def vjp(g):
        return (_unbroadcast(np.where(mask, 0.0, g), a.shape),)

    return _make(out, (a,), vjp)


def embedding_lookup(weight, ids: np.ndarray) -> Tensor:
    """Gather rows of `weight` (V, D) by integer ids of any shape."""
    weight = _as_tensor(weight)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("embedding ids must be integers")
    v = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise IndexError(f"embedding id out of range [0, {v}): min={ids.min()}, max={ids.max()}")
    out = weight.data[ids]

    def vjp(g):
        dw = np.zeros_like(weight.data)
        np.add.at(dw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (dw,)

    return _make(out, (weight,), vjp)


def cross_entropy(logits, targets: np.ndarray, ignore_id: Optional[int] = None) -> Tensor:
    """Mean token cross-entropy; positions whose target equals `ignore_id` are skipped."""
    logits = _as_tensor(logits)
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(
            f"cross_entropy target shape {targets.shape} does not match logits {logits.shape}"
        )
    v = logits.shape[-1]
    flat = logits.data.reshape(-1, v)
    tflat = targets.reshape(-1)
    valid = np.ones(tflat.shape, dtype=bool) if ignore_id is None else (tflat != ignore_id)
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("cross_entropy: every target position is ignored")
    tv = tflat[valid]
    if tv.min() < 0 or tv.max() >= v:
        raise IndexError(f"target id out of range [0, {v}): min={tv.min()}, max={tv.max()}")
    rows = flat[valid]
    m = rows.max(axis=-1, keepdims=True)
    e = np.exp(rows - m)
    z = e.sum(axis=-1, keepdims=True)
    lse = (m + np.log(z)).reshape(-1)
    picked = rows[np.arange(len(tv)), tv]
    loss = (lse - picked).sum() / n_valid

    def vjp(g):
        probs = e / z
        probs[np.arange(len(tv)), tv] -= 1.0
        dflat = np.zeros_like(flat)
        dflat[valid] = probs * (float(g) / n_valid)
        return (dflat.reshape(logits.shape),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), vjp)


def dropout(a, rate: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity outside training or at rate 0."""
    if not training or rate <= 0.0:
        return _as_tensor(a)
    a = _as_tensor(a)
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / a.dtype.type(1.0 - rate)
    out = a.data * keep

    def vjp(g):
        return (g * keep,)

    return _make(out, (a,), vjp)


# -- backward pass ---------------------------------------------------------

def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Populate grads of every requires_grad tensor reachable from `loss`.

    Gradients fan-in by summation; the graph is released afterwards unless
    `retain_graph` is set.
    """
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not require grad; nothing to differentiate")

    # iterative post-order topological sort
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._vjp is None:
            continue
        grads = node._vjp(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g
        if not retain_graph:
            node._vjp = None
            node._parents = ()
