"""Tape-based reverse-mode differentiation over numpy arrays.

Operations executed while a :class:`Tape` is active are appended to it; calling
``tape.backward(loss)`` walks the records in reverse and accumulates gradients
into every tensor created with ``requires_grad=True``.  Backward rules are
module-level functions (``_*_backward``) looked up at call time.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import InvalidState

_ACTIVE: list["Tape"] = []
_FLOATS = (np.dtype(np.float32), np.dtype(np.float64))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        self.data = arr if arr.dtype in _FLOATS else arr.astype(np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name!r})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self)))

    def __rsub__(self, other):
        return add(as_tensor(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    """Wrap a constant; with ``like`` it adopts that tensor's floating dtype."""
    if isinstance(x, Tensor):
        return x
    if like is not None:
        return Tensor(np.asarray(x, dtype=like.data.dtype))
    return Tensor(x)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


class Tape:
    """Records differentiable operations executed inside ``with tape:``."""

    def __init__(self):
        self.records: list[tuple] = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def backward(self, loss: Tensor) -> None:
        if not isinstance(loss, Tensor) or loss._tape is not self or not loss.requires_grad:
            raise InvalidState("backward requires a loss produced by a computation recorded on this tape")
        if loss.data.size != 1:
            raise InvalidState("backward requires a scalar loss")
        loss.grad = np.ones_like(loss.data)
        for out, parents, rule in reversed(self.records):
            g = out.grad
            if g is None:
                continue
            grads = rule(g)
            for p, gp in zip(parents, grads):
                if gp is None or not p.requires_grad:
                    continue
                p.grad = gp if p.grad is None else p.grad + gp
        for out, _, _ in self.records:
            out.grad = None
            out._tape = None
        self.records = []


def backward(loss: Tensor) -> None:
    """Differentiate ``loss`` on the tape that recorded it."""
    tape = loss._tape if isinstance(loss, Tensor) else None
    if tape is None:
        raise InvalidState("backward called without a recorded tape")
    tape.backward(loss)


def _emit(data, parents, rule) -> Tensor:
    out = Tensor(data)
    if _ACTIVE and any(p.requires_grad for p in parents):
        tape = _ACTIVE[-1]
        out.requires_grad = True
        out._tape = tape
        tape.records.append((out, parents, rule))
    return out


def unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --- elementwise ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def neg(a) -> Tensor:
    return _emit(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)))


def _exp_backward(y, g):
    return g * y


def exp(a) -> Tensor:
    y = np.exp(a.data)
    return _emit(y, (a,), lambda g: (_exp_backward(y, g),))


def _log_backward(x, g):
    return g / x


def log(a) -> Tensor:
    x = a.data
    return _emit(np.log(x), (a,), lambda g: (_log_backward(x, g),))


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu_backward(x, t, g):
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return g * (0.5 * (1.0 + t) + 0.5 * x * dt)


def gelu(a) -> Tensor:
    """Tanh approximation of the Gaussian error linear unit."""
    x = a.data
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x * x))
    return _emit(0.5 * x * (1.0 + t), (a,), lambda g: (_gelu_backward(x, t, g),))


# --- linear algebra and shape --------------------------------------------


def _matmul_backward(ad, bd, g):
    ga = g @ np.swapaxes(bd, -1, -2)
    if bd.ndim == 2 and ad.ndim > 2:
        gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    else:
        gb = np.swapaxes(ad, -1, -2) @ g
    return unbroadcast(ga, ad.shape), unbroadcast(gb, bd.shape)


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return _emit(ad @ bd, (a, b), lambda g: _matmul_backward(ad, bd, g))


def reshape(a, shape) -> Tensor:
    old = a.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _emit(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def _is_basic(key) -> bool:
    key = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int, type(None), type(Ellipsis))) for k in key)


def _getitem_backward(shape, key, g):
    out = np.zeros(shape, dtype=g.dtype)
    if _is_basic(key):
        out[key] = g
    else:
        np.add.at(out, key, g)
    return out


def getitem(a, key) -> Tensor:
    shape = a.shape
    return _emit(a.data[key], (a,), lambda g: (_getitem_backward(shape, key, g),))


def _take_backward(shape, idx, axis, g):
    out = np.zeros(shape, dtype=g.dtype)
    if axis == 0:
        np.add.at(out, idx, g)
    else:
        np.add.at(np.moveaxis(out, axis, 0), idx, np.moveaxis(g, axis, 0))
    return out


def take(a, idx, axis: int = 0) -> Tensor:
    """Gather along one axis with an integer array (embedding lookup)."""
    idx = np.asarray(idx, dtype=np.int64)
    shape = a.shape
    if axis != 0 and idx.ndim != 1:
        raise ValueError("non-leading take requires a 1-D index")
    return _emit(np.take(a.data, idx, axis=axis), (a,), lambda g: (_take_backward(shape, idx, axis, g),))


def _take_along_backward(shape, idx, axis, g):
    out = np.zeros(shape, dtype=g.dtype)
    grid = list(np.indices(idx.shape, sparse=True))
    grid[axis] = idx
    np.add.at(out, tuple(grid), g)
    return out


def take_along(a, idx, axis: int) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    shape = a.shape
    axis = axis % a.ndim
    return _emit(
        np.take_along_axis(a.data, idx, axis=axis), (a,), lambda g: (_take_along_backward(shape, idx, axis, g),)
    )


def concat(tensors, axis: int = 0) -> Tensor:
    like = next((t for t in tensors if isinstance(t, Tensor)), None)
    tensors = [as_tensor(t, like) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _emit(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def tsum(a, axis=None, keepdims=False) -> Tensor:
    shape = a.shape

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(a.data.sum(axis=axis, keepdims=keepdims), (a,), rule)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / float(n))


# --- fused normalizations --------------------------------------------------


def _softmax_backward(y, g, axis):
    return y * (g - (g * y).sum(axis=axis, keepdims=True))


def softmax(a, axis: int = -1) -> Tensor:
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    y = e / e.sum(axis=axis, keepdims=True)
    return _emit(y, (a,), lambda g: (_softmax_backward(y, g, axis),))


def _log_softmax_backward(y, g, axis):
    return g - np.exp(y) * g.sum(axis=axis, keepdims=True)


def log_softmax(a, axis: int = -1) -> Tensor:
    x = a.data - a.data.max(axis=axis, keepdims=True)
    y = x - np.log(np.exp(x).sum(axis=axis, keepdims=True))
    return _emit(y, (a,), lambda g: (_log_softmax_backward(y, g, axis),))


def _layer_norm_backward(xhat, inv, gamma, g):
    gg = g * gamma
    d = xhat.shape[-1]
    gx = inv / d * (d * gg - gg.sum(-1, keepdims=True) - xhat * (gg * xhat).sum(-1, keepdims=True))
    red = tuple(range(g.ndim - 1))
    return gx, (g * xhat).sum(axis=red), g.sum(axis=red)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data
    return _emit(xhat * gd + beta.data, (x, gamma, beta), lambda g: _layer_norm_backward(xhat, inv, gd, g))
