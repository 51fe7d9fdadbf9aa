"""A small tape-based reverse-mode differentiation engine over numpy arrays.

Usage::

    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = (x * x).sum() * 0.5
    grads = backward(tape, y)
    grads[x]            # -> array([1., 1., 1.])

Operations record onto the innermost active tape whenever one of their inputs
requires a gradient.  Elementwise binary ops follow numpy broadcasting and
reduce the adjoint back to each input's shape.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidInputError, InvalidShapeError

_TAPES: list["Tape"] = []
_CHECKED = [False]


@contextlib.contextmanager
def checked(enabled: bool = True):
    """Reject non-finite data at tensor creation while active."""
    prev = _CHECKED[0]
    _CHECKED[0] = enabled
    try:
        yield
    finally:
        _CHECKED[0] = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "__weakref__")

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if _CHECKED[0] and not np.all(np.isfinite(arr)):
            raise InvalidInputError("non-finite entries in tensor data")
        self.data = arr
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    out: Tensor
    inputs: tuple
    backward: Callable[[np.ndarray], tuple]


class Tape:
    """Ordered record of primitive applications; recording order is a
    topological order of the graph."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)


def _record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], bwd) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs and bool(_TAPES))
    if out.requires_grad:
        _TAPES[-1].nodes.append(Node(op, out, tuple(inputs), bwd))
    return out


def backward(tape: Tape, root: Tensor) -> "Gradients":
    """Adjoints of ``root`` with respect to every tensor on the tape that
    requires a gradient, keyed by tensor identity."""
    if root.data.size != 1:
        raise InvalidInputError(f"backward needs a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    keep: dict[int, Tensor] = {id(root): root}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.out))
        if g is None:
            continue
        parts = node.backward(g)
        for t, gi in zip(node.inputs, parts):
            if gi is None or not t.requires_grad:
                continue
            k = id(t)
            if k in grads:
                grads[k] = grads[k] + gi
            else:
                grads[k] = gi
                keep[k] = t
    return Gradients(grads, keep)


class Gradients:
    """Gradient lookup by tensor; tensors the root does not depend on get zeros."""

    def __init__(self, grads, keep):
        self._grads = grads
        self._keep = keep

    def __getitem__(self, t: Tensor):
        g = self._grads.get(id(t))
        if g is None or self._keep.get(id(t)) is not t:
            return np.zeros_like(t.data)
        return g

    def __contains__(self, t):
        return id(t) in self._grads and self._keep.get(id(t)) is t


def grad(f: Callable[..., Tensor], *arrays) -> list[np.ndarray]:
    """Gradient of scalar ``f`` at the given arrays."""
    leaves = [Tensor(np.array(a, dtype=float), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = f(*leaves)
    g = backward(tape, out)
    return [g[t] for t in leaves]


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise InvalidShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- primitives -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _record(
        "mul", ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise InvalidShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _record("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _record("transpose", a.data.T, (a,), lambda g: (g.T,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return _record("exp", y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _record("log", np.log(ad), (a,), lambda g: (g / ad,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _record("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _record("sum", a.data.sum(axis=axis), (a,), bwd)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    count = a.data.size if axis is None else shape[axis]

    def bwd(g):
        if axis is None:
            return (np.full(shape, g / count),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape) / count,)

    return _record("mean", a.data.mean(axis=axis), (a,), bwd)


def take_cols(a, idx) -> Tensor:
    """Columns ``idx`` of a 2-D tensor (the split half of a coupling layer)."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise InvalidShapeError("take_cols needs a 2-D tensor")
    idx = np.asarray(idx, dtype=int)
    shape = a.shape

    def bwd(g):
        out = np.zeros(shape)
        out[:, idx] = g
        return (out,)

    return _record("take_cols", a.data[:, idx], (a,), bwd)


def merge_cols(parts: Sequence, idxs: Sequence, width: int) -> Tensor:
    """Inverse of :func:`take_cols`: scatter 2-D parts into columns ``idxs``."""
    parts = [as_tensor(p) for p in parts]
    idxs = [np.asarray(i, dtype=int) for i in idxs]
    rows = parts[0].shape[0]
    for p, i in zip(parts, idxs):
        if p.ndim != 2 or p.shape != (rows, i.size):
            raise InvalidShapeError(f"merge_cols: part shape {p.shape} does not match {i.size} columns")
    covered = np.sort(np.concatenate(idxs))
    if not np.array_equal(covered, np.arange(width)):
        raise InvalidShapeError("merge_cols: column indices must partition the output")
    out = np.empty((rows, width))
    for p, i in zip(parts, idxs):
        out[:, i] = p.data
    return _record("merge_cols", out, tuple(parts), lambda g: tuple(g[:, i] for i in idxs))


def concat_rows(parts: Sequence) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = np.cumsum([p.shape[0] for p in parts])[:-1]
    return _record("concat_rows", np.concatenate([p.data for p in parts], axis=0), tuple(parts),
                   lambda g: tuple(np.split(g, sizes, axis=0)))


def scale_shift(x, log_scale, shift) -> Tensor:
    """``x * exp(log_scale) + shift`` as one fused node."""
    x, s, t = as_tensor(x), as_tensor(log_scale), as_tensor(shift)
    e = np.exp(s.data)
    xd = x.data
    out = xd * e + t.data
    shapes = (x.shape, s.shape, t.shape)

    def bwd(g):
        return (
            _unbroadcast(g * e, shapes[0]),
            _unbroadcast(g * xd * e, shapes[1]),
            _unbroadcast(g, shapes[2]),
        )

    return _record("scale_shift", out, (x, s, t), bwd)


def square(a) -> Tensor:
    return mul(a, a)
