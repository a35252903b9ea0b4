"""Minimal reverse-mode automatic differentiation on numpy arrays.

Float64 only. The op set is exactly what the fusion model needs: elementwise
arithmetic, batched matmul, a few activations, reductions, indexing/gather,
concatenation and a differentiable median. Gradients follow the usual
conventions; the subgradient of relu/clamp at the kink is 0 and max/min route
the gradient to the first arg-extremum, so analytic and central-difference
gradients agree away from a measure-zero set.
"""

from __future__ import annotations

import contextlib

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (forward-only evals)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    """Node of the computation graph, wrapping a float64 ndarray."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._parents: tuple = ()
        self.name = name

    # -- bookkeeping ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad}{tag})"

    def backward(self):
        """Reverse pass from a scalar output; accumulates into .grad leaves."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis=axis, keepdims=keepdims)

    def min(self, axis=None, keepdims=False):
        return tmin(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def softplus(self):
        return softplus(self)

    def clamp_min(self, c):
        return clamp_min(self, c)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _accum(t: Tensor, g: np.ndarray):
    t.grad = g if t.grad is None else t.grad + g


def _result(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


# -- arithmetic -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _result(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.data.shape))

    return _result(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _result(data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _result(data, (a, b), backward)


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    data = a.data ** p

    def backward(g):
        _accum(a, g * p * a.data ** (p - 1.0))

    return _result(data, (a,), backward)


def matmul(a, b) -> Tensor:
    """Batched matrix product; both operands must be at least 2-D."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            _accum(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            _accum(b, _unbroadcast(gb, b.data.shape))

    return _result(data, (a, b), backward)


# -- elementwise nonlinearities -------------------------------------------


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)

    def backward(g):
        _accum(a, g * data)

    return _result(data, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    data = np.log(a.data)

    def backward(g):
        _accum(a, g / a.data)

    return _result(data, (a,), backward)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    data = np.sqrt(a.data)

    def backward(g):
        _accum(a, g * 0.5 / data)

    return _result(data, (a,), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0.0
    data = np.where(mask, a.data, 0.0)

    def backward(g):
        _accum(a, g * mask)

    return _result(data, (a,), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # stable in both tails
    data = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                    np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))

    def backward(g):
        _accum(a, g * data * (1.0 - data))

    return _result(data, (a,), backward)


def softplus(a) -> Tensor:
    a = as_tensor(a)
    data = np.logaddexp(0.0, a.data)

    def backward(g):
        s = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                     np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
        _accum(a, g * s)

    return _result(data, (a,), backward)


def clamp_min(a, c: float) -> Tensor:
    """max(a, c); gradient passes only where a > c (0 at the kink)."""
    a = as_tensor(a)
    c = float(c)
    mask = a.data > c
    data = np.where(mask, a.data, c)

    def backward(g):
        _accum(a, g * mask)

    return _result(data, (a,), backward)


# -- reductions -----------------------------------------------------------


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        g = np.asarray(g)
        if axis is None:
            grad = np.broadcast_to(g, a.data.shape)
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(ax % a.data.ndim for ax in axes)
            if not keepdims:
                for ax in sorted(axes):
                    g = np.expand_dims(g, ax)
            grad = np.broadcast_to(g, a.data.shape)
        _accum(a, grad.astype(np.float64))

    return _result(data, (a,), backward)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = 1
        for ax in axes:
            count *= a.data.shape[ax]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def _extremum(a, axis, keepdims, argfn, redfn) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        data = redfn(a.data)
        flat_idx = argfn(a.data)

        def backward(g):
            grad = np.zeros_like(a.data)
            grad.flat[flat_idx] = float(np.asarray(g))
            _accum(a, grad)

        return _result(np.asarray(data), (a,), backward)

    ax = axis % a.data.ndim
    data = redfn(a.data, axis=ax, keepdims=keepdims)
    idx = argfn(a.data, axis=ax)  # first occurrence on ties

    def backward(g):
        g = np.asarray(g)
        if not keepdims:
            g = np.expand_dims(g, ax)
        grad = np.zeros_like(a.data)
        np.put_along_axis(grad, np.expand_dims(idx, ax), g, axis=ax)
        _accum(a, grad)

    return _result(data, (a,), backward)


def tmax(a, axis=None, keepdims=False) -> Tensor:
    return _extremum(a, axis, keepdims, np.argmax, np.max)


def tmin(a, axis=None, keepdims=False) -> Tensor:
    return _extremum(a, axis, keepdims, np.argmin, np.min)


# -- shape ops ------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    data = a.data.reshape(shape)

    def backward(g):
        _accum(a, np.asarray(g).reshape(a.data.shape))

    return _result(data, (a,), backward)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    data = a.data.transpose(axes)
    inv = None if axes is None else np.argsort(np.asarray(axes))

    def backward(g):
        _accum(a, np.asarray(g).transpose(inv))

    return _result(data, (a,), backward)


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    data = np.swapaxes(a.data, ax1, ax2)

    def backward(g):
        _accum(a, np.swapaxes(np.asarray(g), ax1, ax2))

    return _result(data, (a,), backward)


def _is_fancy(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return any(isinstance(p, (np.ndarray, list)) for p in parts)


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    data = a.data[key]

    def backward(g):
        grad = np.zeros_like(a.data)
        if _is_fancy(key):
            np.add.at(grad, key, g)
        else:
            grad[key] += g
        _accum(a, grad)

    return _result(data, (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        g = np.asarray(g)
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accum(t, g[tuple(sl)])

    return _result(data, tuple(tensors), backward)


def stack(tensors, axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        t = as_tensor(t)
        shape = list(t.data.shape)
        shape.insert(axis, 1)
        expanded.append(reshape(t, tuple(shape)))
    return concat(expanded, axis=axis)


def take_along_axis(a, idx: np.ndarray, axis: int) -> Tensor:
    """Differentiable gather; duplicate indices accumulate in the backward."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    if idx.ndim != a.ndim:
        raise ValueError("index array must have the same ndim as the data")
    ax = axis % a.ndim
    out_shape = list(a.data.shape)
    out_shape[ax] = idx.shape[ax]
    idx_full = np.broadcast_to(idx, tuple(out_shape))
    data = np.take_along_axis(a.data, idx_full, axis=ax)

    def backward(g):
        grad = np.zeros_like(a.data)
        grids = np.ogrid[tuple(slice(0, s) for s in idx_full.shape)]
        key = tuple(idx_full if d == ax else grids[d] for d in range(a.ndim))
        np.add.at(grad, key, np.asarray(g))
        _accum(a, grad)

    return _result(data, (a,), backward)


def median_lastaxis(a) -> Tensor:
    """Median along the last axis; even counts average the two middles."""
    a = as_tensor(a)
    k = a.data.shape[-1]
    order = np.argsort(a.data, axis=-1, kind="stable")
    if k % 2 == 1:
        mids = order[..., k // 2 : k // 2 + 1]
        weights = [1.0]
    else:
        mids = order[..., k // 2 - 1 : k // 2 + 1]
        weights = [0.5, 0.5]
    data = np.median(a.data, axis=-1)

    def backward(g):
        g = np.asarray(g)[..., None]
        grad = np.zeros_like(a.data)
        for j, w in enumerate(weights):
            np.put_along_axis(
                grad, mids[..., j : j + 1],
                np.take_along_axis(grad, mids[..., j : j + 1], axis=-1) + w * g,
                axis=-1)
        _accum(a, grad)

    return _result(data, (a,), backward)


# -- stabilized composites -------------------------------------------------


def logsumexp(a, axis: int, keepdims: bool = False) -> Tensor:
    """log(sum(exp(a))) with the max shift detached (its derivative is 0)."""
    a = as_tensor(a)
    m = Tensor(a.data.max(axis=axis, keepdims=True))
    out = log(tsum(exp(a - m), axis=axis, keepdims=True)) + m
    if not keepdims:
        shape = list(out.data.shape)
        del shape[axis % a.ndim]
        out = reshape(out, tuple(shape))
    return out


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    m = Tensor(a.data.max(axis=axis, keepdims=True))
    e = exp(a - m)
    return e / tsum(e, axis=axis, keepdims=True)
