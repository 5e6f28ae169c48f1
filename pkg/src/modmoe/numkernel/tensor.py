"""Reverse-mode autodiff over dense float64 arrays.

Each op builds its output eagerly and, when any input needs a gradient,
records its parents and a closure mapping the output gradient to input
gradients. ``Tape.from_loss`` linearises that graph in topological order and
``forward_backward`` replays it in reverse, visiting every op once.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from . import kernels


class NumericalError(FloatingPointError):
    """A kernel produced NaN or Inf. ``op`` names the producing op."""

    def __init__(self, op: str, where: str = "forward"):
        super().__init__(f"non-finite values produced by {op!r} during {where}")
        self.op = op
        self.where = where


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (evaluation, decoding)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        forward_backward(Tape.from_loss(self), self)

    # operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; multiply by a reciprocal")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericalError(op)
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


class Tape:
    """Ops reachable from a root, in topological order (inputs first)."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_loss(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in reversed(node._parents):
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def forward_backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf with ``requires_grad`` reachable from ``loss``.

    Leaf gradients accumulate across calls; intermediates are discarded.
    """
    if loss.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if not np.all(np.isfinite(pg)):
                raise NumericalError(node.op, "backward")
            key = id(p)
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ----------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, (a, b), bw, "mul")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,), "log")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


# set by the gradient checker to observe ReLU pre-activations
RELU_WATCH: list | None = None


def relu(a: Tensor) -> Tensor:
    x = a.data
    if RELU_WATCH is not None:
        RELU_WATCH.append(x.copy())
    return _make(np.maximum(x, 0.0), (a,), lambda g: (g * (x > 0),), "relu")


def gelu(a: Tensor) -> Tensor:
    """Exact (erf) GeLU."""
    x2 = a.data.reshape(-1, a.shape[-1]) if a.ndim else a.data.reshape(1, 1)
    x2 = np.ascontiguousarray(x2)
    y = kernels.gelu_fwd(x2).reshape(a.shape)

    def bw(g):
        return (kernels.gelu_bwd(x2, np.ascontiguousarray(g.reshape(x2.shape))).reshape(a.shape),)

    return _make(y, (a,), bw, "gelu")


# ----------------------------------------------------------------------
# shape
# ----------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inv),), "transpose")


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis for i in items)


def getitem(a: Tensor, index) -> Tensor:
    shape = a.shape
    basic = _is_basic(index)

    def bw(g):
        out = np.zeros(shape)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _make(np.array(a.data[index]), (a,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def take_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    """``table[idx]`` for an integer index array of any shape (embedding lookup)."""
    idx = np.asarray(idx)
    shape = table.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, shape[-1]))
        return (out,)

    return _make(table.data[idx], (table,), bw, "take_rows")


def gather_rows(x: Tensor, rows: np.ndarray) -> Tensor:
    """Rows of a 2-D tensor; ``rows`` must be unique (token dispatch)."""
    n = x.shape[0]

    def bw(g):
        out = np.zeros((n,) + g.shape[1:])
        out[rows] = g
        return (out,)

    return _make(x.data[rows], (x,), bw, "gather_rows")


def scatter_rows(n_rows: int, parts: Sequence[tuple[np.ndarray, Tensor]]) -> Tensor:
    """Sum of row-scatters: ``out[idx] += src`` for each part, in order.

    The output starts from exact zeros, so a single part covering every row
    reproduces ``src`` bitwise.
    """
    if not parts:
        raise ValueError("scatter_rows needs at least one part")
    width = parts[0][1].shape[1:]
    out = np.zeros((n_rows,) + width)
    for idx, src in parts:
        out[idx] += src.data
    idxs = [p[0] for p in parts]

    def bw(g):
        return tuple(g[i] for i in idxs)

    return _make(out, [p[1] for p in parts], bw, "scatter_rows")


def take_along_last(x: Tensor, idx: np.ndarray) -> Tensor:
    """``np.take_along_axis(x, idx, -1)``; repeated indices accumulate."""
    shape = x.shape

    def bw(g):
        out = np.zeros(shape).reshape(-1, shape[-1])
        rows = np.repeat(np.arange(out.shape[0]), idx.shape[-1])
        np.add.at(out, (rows, idx.reshape(-1)), g.reshape(-1))
        return (out.reshape(shape),)

    return _make(np.take_along_axis(x.data, idx, axis=-1), (x,), bw, "take_along_last")


# ----------------------------------------------------------------------
# reductions and linear algebra
# ----------------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tsum(a, axis, keepdims), 1.0 / float(n))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``a`` of shape (..., m, k) and ``b`` of (k, n) or (..., k, n)."""
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(bd, -1, -2)
            ga = _unbroadcast(ga, ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                k = ad.shape[-1]
                gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), bw, "matmul")


# ----------------------------------------------------------------------
# fused blocks
# ----------------------------------------------------------------------

def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    x2 = np.ascontiguousarray(a.data.reshape(-1, a.shape[-1]))
    y2 = kernels.softmax_fwd(x2)

    def bw(g):
        return (kernels.softmax_bwd(y2, np.ascontiguousarray(g.reshape(y2.shape))).reshape(a.shape),)

    return _make(y2.reshape(a.shape), (a,), bw, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    d = x.shape[-1]
    x2 = np.ascontiguousarray(x.data.reshape(-1, d))
    y, xhat, rstd = kernels.layernorm_fwd(x2, gamma.data, beta.data)

    def bw(g):
        dx, dg, db = kernels.layernorm_bwd(np.ascontiguousarray(g.reshape(-1, d)), xhat, rstd, gamma.data)
        return dx.reshape(x.shape), dg, db

    return _make(y.reshape(x.shape), (x, gamma, beta), bw, "layer_norm")


def cross_entropy(logits: Tensor, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Weighted mean token NLL; ``logits`` is (N, V), ``targets`` (N,) int.

    Rows with zero weight contribute nothing (masked prefix positions).
    """
    if logits.ndim != 2:
        raise ValueError("cross_entropy expects 2-D logits")
    targets = np.ascontiguousarray(targets, dtype=np.int64)
    w = np.ones(len(targets)) if weights is None else np.ascontiguousarray(weights, dtype=np.float64)
    if w.sum() <= 0:
        raise ValueError("cross_entropy needs at least one weighted position")
    x = np.ascontiguousarray(logits.data)
    loss, probs = kernels.xent_fwd(x, targets, w)

    def bw(g):
        return (kernels.xent_bwd(probs, targets, w, float(g)),)

    return _make(np.asarray(loss), (logits,), bw, "cross_entropy")
