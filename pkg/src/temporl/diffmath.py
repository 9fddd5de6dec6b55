"""Reverse-mode automatic differentiation over dense 2-D float64 matrices.

Every value is a ``Tensor`` holding a ``(rows, cols)`` array. Operations build
a define-by-run graph; ``Tensor.backward`` walks it once in reverse
topological order and accumulates gradients into leaves that have
``requires_grad`` set.

Broadcasting is limited to row vectors ``(1, n)``, column vectors ``(m, 1)``
and scalars ``(1, 1)`` against an ``(m, n)`` operand.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True

LOG_2PI = math.log(2.0 * math.pi)


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """An input lies outside the domain of the operation (e.g. log of x <= 0)."""


class GraphError(RuntimeError):
    """Invalid use of the differentiation graph."""


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (used for acting and targets)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_2d(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"tensors are 2-D, got array with ndim={arr.ndim}")
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_needs", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_2d(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._needs: tuple[bool, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._consumed = False

    # -- construction helpers -------------------------------------------------
    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data[0, 0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- backward ---------------------------------------------------------------
    def backward(self) -> None:
        """Populate ``grad`` on every ``requires_grad`` leaf reachable from this scalar."""
        if self.shape != (1, 1):
            raise GraphError(f"backward needs a scalar root, got shape {self.shape}")
        if self._consumed:
            raise GraphError("backward called twice on the same graph; rebuild it with a new forward pass")
        self._consumed = True

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones((1, 1))}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg, need in zip(node._parents, node._backward(g), node._needs):
                if pg is None or not need:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar -------------------------------------------------------
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return columns(self, key)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        # frozen at construction so later flag changes cannot reroute gradients
        out._needs = tuple(p.requires_grad for p in parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._needs = ()
        out._backward = None
    return out


def _broadcast_shape(a: tuple[int, int], b: tuple[int, int], op: str) -> tuple[int, int]:
    if a == b:
        return a
    out = []
    for da, db in zip(a, b):
        if da == db or db == 1:
            out.append(da)
        elif da == 1:
            out.append(db)
        else:
            raise ShapeError(f"{op}: shapes {a} and {b} are not compatible")
    return out[0], out[1]


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


# -- binary ops ---------------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ ({a.shape} @ {b.shape})")
    ad, bd = a.data, b.data

    def backward(g):
        return (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None)

    return _make(ad @ bd, (a, b), backward)


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _make(ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a.shape, b.shape, "div")
    if np.any(b.data == 0.0):
        raise DomainError("div: division by zero")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _make(out, (a, b), backward)


def minimum(a, b) -> Tensor:
    """Elementwise minimum; ties send the gradient to ``a``."""
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape:
        raise ShapeError(f"minimum: shapes {a.shape} and {b.shape} differ")
    pick_a = a.data <= b.data

    def backward(g):
        return g * pick_a, g * ~pick_a

    return _make(np.where(pick_a, a.data, b.data), (a, b), backward)


# -- unary ops ----------------------------------------------------------------
def scale(x, c: float) -> Tensor:
    x = _lift(x)

    def backward(g):
        return (g * c,)

    return _make(x.data * c, (x,), backward)


def tanh(x) -> Tensor:
    x = _lift(x)
    out = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _make(out, (x,), backward)


def relu(x) -> Tensor:
    x = _lift(x)
    out = np.maximum(x.data, 0.0)

    def backward(g):
        return (g * (out > 0.0),)

    return _make(out, (x,), backward)


def exp(x) -> Tensor:
    x = _lift(x)
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return _make(out, (x,), backward)


def log(x) -> Tensor:
    x = _lift(x)
    if np.any(x.data <= 0.0):
        raise DomainError("log: input must be strictly positive")
    xd = x.data

    def backward(g):
        return (g / xd,)

    return _make(np.log(xd), (x,), backward)


def softplus(x) -> Tensor:
    x = _lift(x)
    xd = x.data
    out = np.logaddexp(0.0, xd)

    def backward(g):
        return (g * _sigmoid(xd),)

    return _make(out, (x,), backward)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x) -> Tensor:
    x = _lift(x)
    out = _sigmoid(x.data)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _make(out, (x,), backward)


def power(x, p: float) -> Tensor:
    x = _lift(x)
    xd = x.data
    if p != int(p) and np.any(xd < 0.0):
        raise DomainError("power: fractional exponent of a negative value")

    def backward(g):
        return (g * p * xd ** (p - 1.0),)

    return _make(xd**p, (x,), backward)


def clamp(x, lo: float, hi: float) -> Tensor:
    """Clip to ``[lo, hi]``; gradient is zero outside the interval."""
    x = _lift(x)
    inside = (x.data >= lo) & (x.data <= hi)

    def backward(g):
        return (g * inside,)

    return _make(np.clip(x.data, lo, hi), (x,), backward)


# -- reductions and reshaping ---------------------------------------------------
_AXES = {"all": None, None: None, "rows": 0, 0: 0, "cols": 1, 1: 1}


def reduce_sum(x, axis="all") -> Tensor:
    """Sum over every element (``"all"``), down the rows (``"rows"``) or across columns (``"cols"``)."""
    x = _lift(x)
    ax = _AXES[axis]
    shape = x.shape
    out = x.data.sum(keepdims=True) if ax is None else x.data.sum(axis=ax, keepdims=True)

    def backward(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (x,), backward)


def reduce_mean(x, axis="all") -> Tensor:
    x = _lift(x)
    ax = _AXES[axis]
    count = x.data.size if ax is None else x.shape[ax]
    return scale(reduce_sum(x, axis), 1.0 / count)


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    parts = [_lift(p) for p in parts]
    if axis == 1:
        rows = {p.shape[0] for p in parts}
        if len(rows) != 1:
            raise ShapeError(f"concat: row counts differ {sorted(rows)}")
        splits = np.cumsum([p.shape[1] for p in parts])[:-1]

        def backward(g):
            return tuple(np.split(g, splits, axis=1))

        return _make(np.concatenate([p.data for p in parts], axis=1), tuple(parts), backward)
    cols = {p.shape[1] for p in parts}
    if len(cols) != 1:
        raise ShapeError(f"concat: column counts differ {sorted(cols)}")
    splits = np.cumsum([p.shape[0] for p in parts])[:-1]

    def backward_rows(g):
        return tuple(np.split(g, splits, axis=0))

    return _make(np.concatenate([p.data for p in parts], axis=0), tuple(parts), backward_rows)


def columns(x, key) -> Tensor:
    """Select columns by slice or index list (``x[:, key]``)."""
    x = _lift(x)
    if isinstance(key, tuple):
        rows, key = key
        if rows != slice(None):
            raise ShapeError("only column selection is supported")
    if isinstance(key, int):
        key = slice(key, key + 1)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        if isinstance(key, slice):
            full[:, key] = g
        else:
            np.add.at(full, (slice(None), key), g)
        return (full,)

    return _make(x.data[:, key], (x,), backward)


def reparam_gaussian(mu, log_std, noise) -> Tensor:
    """``mu + exp(log_std) * noise`` with externally drawn standard-normal noise."""
    mu, log_std, noise = _lift(mu), _lift(log_std), _lift(noise)
    if not (mu.shape == log_std.shape == noise.shape):
        raise ShapeError(f"reparam_gaussian: shapes {mu.shape}, {log_std.shape}, {noise.shape} differ")
    return add(mu, mul(exp(log_std), noise.detach()))


# -- gradient checking ----------------------------------------------------------
def numeric_gradient(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of the scalar ``fn()`` with respect to ``param.data``."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            plus = fn().item()
            flat[i] = orig - h
            minus = fn().item()
            flat[i] = orig
            gflat[i] = (plus - minus) / (2.0 * h)
    return grad


def gradient_error(fn: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-6) -> float:
    """Max over entries of min(absolute, relative) error between backward and central differences."""
    params = list(params)
    for p in params:
        p.grad = None
    fn().backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        numeric = numeric_gradient(fn, p, h)
        abs_err = np.abs(analytic - numeric)
        rel_err = abs_err / np.maximum(np.abs(numeric), 1e-12)
        if abs_err.size:
            worst = max(worst, float(np.max(np.minimum(abs_err, rel_err))))
    return worst
