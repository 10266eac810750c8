"""Minimal reverse-mode autodiff tensor.

Values are numpy arrays, normally 4-D ``(batch, channels, height, width)``.
Every op records its parents and a closure that maps the output gradient
to parent gradients; :meth:`Tensor.backward` replays them in reverse
topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ShapeError

DTYPES = {"single": np.float32, "double": np.float64,
          "float32": np.float32, "float64": np.float64}

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def resolve_dtype(dtype) -> np.dtype:
    if isinstance(dtype, str):
        try:
            return np.dtype(DTYPES[dtype])
        except KeyError:
            raise ValueError(f"unsupported dtype {dtype!r}; use single or double") from None
    dt = np.dtype(dtype)
    if dt not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dt}; use float32 or float64")
    return dt


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def _accum(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accum(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            node._backward(node.grad)
            # interior buffers are no longer needed once propagated
            node.grad = None
            node._parents = ()
            node._backward = None

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap an op result, recording the graph only when a parent needs it."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    out = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accum(unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(unbroadcast(g, b.shape))

    return make(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accum(unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(unbroadcast(g * a.data, b.shape))

    return make(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return make(-a.data, (a,), lambda g: a._accum(-g))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return make(a.data * c, (a,), lambda g: a._accum(g * c))


def concat(tensors: Iterable[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accum(g[tuple(idx)])

    return make(out, tensors, backward)


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    out = x.data[:, start:stop]

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        x._accum(full)

    return make(out, (x,), backward)


def _pad_index(n: int, before: int, after: int, mode: str) -> np.ndarray:
    """Source index for every position of a padded axis (-1 marks zeros)."""
    idx = np.arange(-before, n + after)
    if mode == "zero":
        idx[(idx < 0) | (idx >= n)] = -1
        return idx
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def pad2d(x: Tensor, top: int, bottom: int, left: int, right: int,
          mode: str = "reflect") -> Tensor:
    """Pad the two spatial axes; ``mode`` is ``reflect`` or ``zero``."""
    if mode not in ("reflect", "zero"):
        raise ValueError(f"unknown padding mode {mode!r}")
    if top == bottom == left == right == 0:
        return x
    H, W = x.shape[-2:]
    if mode == "zero":
        out = np.pad(x.data, ((0, 0), (0, 0), (top, bottom), (left, right)))
    else:
        ih = _pad_index(H, top, bottom, mode)
        iw = _pad_index(W, left, right, mode)
        out = x.data[:, :, ih][:, :, :, iw]

    def backward(g):
        if mode == "zero":
            x._accum(g[:, :, top:top + H, left:left + W])
            return
        gx = np.zeros(x.shape, dtype=g.dtype)
        # interior first, then border rows/cols in fixed order
        gw = np.zeros(g.shape[:2] + (g.shape[2], W), dtype=g.dtype)
        gw[..., :] = g[..., left:left + W]
        for j in list(range(left)) + list(range(left + W, g.shape[3])):
            gw[..., iw[j]] += g[..., j]
        gx[...] = gw[:, :, top:top + H]
        for i in list(range(top)) + list(range(top + H, g.shape[2])):
            gx[:, :, ih[i]] += gw[:, :, i]
        x._accum(gx)

    return make(out, (x,), backward)


def crop2d(x: Tensor, height: int, width: int) -> Tensor:
    """Keep the top-left ``height x width`` window."""
    if height > x.shape[2] or width > x.shape[3]:
        raise ShapeError("crop window larger than tensor")
    if (height, width) == x.shape[2:]:
        return x
    out = x.data[:, :, :height, :width]

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, :, :height, :width] = g
        x._accum(full)

    return make(out, (x,), backward)


def _unshuffle(a: np.ndarray, r: int) -> np.ndarray:
    B, C, H, W = a.shape
    a = a.reshape(B, C, H // r, r, W // r, r).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(a).reshape(B, C * r * r, H // r, W // r)


def _shuffle(a: np.ndarray, r: int) -> np.ndarray:
    B, C, H, W = a.shape
    c = C // (r * r)
    a = a.reshape(B, c, r, r, H, W).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(a).reshape(B, c, H * r, W * r)


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """(B, C, H, W) -> (B, C*r*r, H/r, W/r); channel index is c*r*r + i*r + j."""
    if x.ndim != 4 or x.shape[2] % r or x.shape[3] % r:
        raise ShapeError(f"pixel_unshuffle: spatial dims {x.shape[2:]} not divisible by {r}")
    return make(_unshuffle(x.data, r), (x,), lambda g: x._accum(_shuffle(g, r)))


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    if x.ndim != 4 or x.shape[1] % (r * r):
        raise ShapeError(f"pixel_shuffle: channels {x.shape[1]} not divisible by {r * r}")
    return make(_shuffle(x.data, r), (x,), lambda g: x._accum(_unshuffle(g, r)))
