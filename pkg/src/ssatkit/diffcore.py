"""Reverse-mode automatic differentiation over small dense graphs.

Graphs are define-by-run: every operation executed while a :class:`Graph` is
active appends a node, so nodes are stored in topological order by
construction. ``value_and_grad`` is the usual entry point::

    loss, (gW, gb) = value_and_grad(
        lambda p, i: mean(sqnorm(affine(i[0], p[0], p[1]), axis=-1)),
        [W, b], [X])

Outside an active graph the same functions just evaluate, which is how the
models run inference. All values are float64 numpy arrays.

Also home to the SGD update and the cosine learning-rate schedule shared by
every training loop.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DiffError", "ShapeError", "NonFiniteError",
    "Tensor", "Graph", "value_and_grad", "as_tensor",
    "add", "sub", "mul", "div", "neg", "matmul", "affine", "relu", "tanh",
    "exp", "log", "sqrt", "sin", "cos", "sum", "mean", "softmax",
    "log_softmax", "sqnorm", "kl_categorical", "concat", "take_along", "reshape",
    "cross_entropy",
    "OptimState", "sgd_step", "cosine_lr",
]


class DiffError(Exception):
    """Base class for graph errors. ``node`` names the offending node."""

    def __init__(self, message: str, node: str | None = None):
        self.node = node
        super().__init__(f"{node}: {message}" if node else message)


class ShapeError(DiffError, ValueError):
    pass


class NonFiniteError(DiffError, FloatingPointError):
    pass


_ACTIVE: list["Graph"] = []


class Tensor:
    __slots__ = ("value", "op", "parents", "backward_fn", "requires_grad", "node_id", "grad")
    # make ``ndarray * Tensor`` dispatch to Tensor.__rmul__ instead of broadcasting objects
    __array_ufunc__ = None

    def __init__(self, value, op: str = "const", parents: tuple = (), backward_fn=None,
                 requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.node_id = -1
        self.grad = None
        if _ACTIVE:
            _ACTIVE[-1]._register(self)

    @property
    def shape(self):
        return self.value.shape

    @property
    def name(self) -> str:
        return f"node {self.node_id} ({self.op})" if self.node_id >= 0 else f"({self.op})"

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape})"

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

    def __getitem__(self, index):
        return _getitem(self, index)

    def numpy(self) -> np.ndarray:
        return self.value


class Graph:
    """Ordered node list recorded while the graph is active (``with Graph() as g``)."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def _register(self, t: Tensor):
        t.node_id = len(self.nodes)
        self.nodes.append(t)

    def leaf(self, value, requires_grad: bool = True, op: str = "leaf") -> Tensor:
        with self:
            return Tensor(value, op=op, requires_grad=requires_grad)

    def backward(self, output: Tensor) -> None:
        if output.value.size != 1:
            raise ShapeError(f"output must be scalar, got shape {output.shape}", output.name)
        for node in self.nodes:
            node.grad = None
        output.grad = np.ones_like(output.value)
        for node in reversed(self.nodes):
            if node.grad is None or node.backward_fn is None:
                continue
            parent_grads = node.backward_fn(node.grad)
            for parent, g in zip(node.parents, parent_grads):
                if g is None or not parent.requires_grad:
                    continue
                g = _unbroadcast(np.asarray(g, dtype=np.float64), parent.shape)
                if not np.all(np.isfinite(g)):
                    raise NonFiniteError("non-finite adjoint during backward", parent.name)
                parent.grad = g if parent.grad is None else parent.grad + g

    def adjoint(self, t: Tensor) -> np.ndarray:
        """Adjoint of ``t`` after :meth:`backward`; zeros when unreachable."""
        return np.zeros_like(t.value) if t.grad is None else t.grad


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, op="const")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _make(op: str, value, parents: tuple, backward_fn) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    out = Tensor(value, op=op, parents=parents,
                 backward_fn=backward_fn if requires else None, requires_grad=requires)
    if not np.all(np.isfinite(out.value)):
        raise NonFiniteError("non-finite value during forward", out.name)
    return out


def _binary(op, a, b, fwd):
    a, b = as_tensor(a), as_tensor(b)
    try:
        with np.errstate(all="ignore"):
            value = fwd(a.value, b.value)
    except ValueError as exc:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}",
                         f"{op} of {a.name}, {b.name}") from exc
    return a, b, value


def add(a, b) -> Tensor:
    a, b, v = _binary("add", a, b, np.add)
    return _make("add", v, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b, v = _binary("sub", a, b, np.subtract)
    return _make("sub", v, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b, v = _binary("mul", a, b, np.multiply)
    return _make("mul", v, (a, b), lambda g: (g * b.value, g * a.value))


def div(a, b) -> Tensor:
    a, b, v = _binary("div", a, b, np.divide)
    return _make("div", v, (a, b), lambda g: (g / b.value, -g * a.value / b.value ** 2))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.value, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}",
                         f"matmul of {a.name}, {b.name}")
    return _make("matmul", a.value @ b.value, (a, b),
                 lambda g: (g @ b.value.T if a.requires_grad else None,
                            a.value.T @ g if b.requires_grad else None))


def affine(x, W, b) -> Tensor:
    """``x @ W + b`` for x of shape (n, i), W (i, o), b (o,)."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if (x.value.ndim != 2 or W.value.ndim != 2 or x.shape[1] != W.shape[0]
            or b.shape != (W.shape[1],)):
        raise ShapeError(f"affine: shapes x{x.shape} W{W.shape} b{b.shape} do not chain",
                         f"affine of {x.name}")

    def bwd(g):
        return (g @ W.value.T if x.requires_grad else None,
                x.value.T @ g if W.requires_grad else None,
                g.sum(axis=0))
    return _make("affine", x.value @ W.value + b.value, (x, W, b), bwd)


def _unary(op, a, fwd, dfn):
    a = as_tensor(a)
    with np.errstate(all="ignore"):
        v = fwd(a.value)

    def bwd(g):
        # non-finite derivatives are reported by Graph.backward, not warned about
        with np.errstate(all="ignore"):
            return (g * dfn(a.value, v),)
    return _make(op, v, (a,), bwd)


def relu(a) -> Tensor:
    return _unary("relu", a, lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(np.float64))


def tanh(a) -> Tensor:
    return _unary("tanh", a, np.tanh, lambda x, y: 1.0 - y * y)


def exp(a) -> Tensor:
    return _unary("exp", a, np.exp, lambda x, y: y)


def log(a) -> Tensor:
    return _unary("log", a, np.log, lambda x, y: 1.0 / x)


def sqrt(a) -> Tensor:
    return _unary("sqrt", a, np.sqrt, lambda x, y: 0.5 / y)


def sin(a) -> Tensor:
    return _unary("sin", a, np.sin, lambda x, y: np.cos(x))


def cos(a) -> Tensor:
    return _unary("cos", a, np.cos, lambda x, y: -np.sin(x))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    v = a.value.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)
    return _make("sum", v, (a,), bwd)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.value.size if axis is None else a.shape[axis]
    v = a.value.mean(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape) / count,)
    return _make("mean", v, (a,), bwd)


def _log_softmax_np(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    v = _log_softmax_np(a.value)

    def bwd(g):
        return (g - np.exp(v) * g.sum(axis=-1, keepdims=True),)
    return _make("log_softmax", v, (a,), bwd)


def softmax(a) -> Tensor:
    a = as_tensor(a)
    v = np.exp(_log_softmax_np(a.value))

    def bwd(g):
        return (v * (g - (g * v).sum(axis=-1, keepdims=True)),)
    return _make("softmax", v, (a,), bwd)


def sqnorm(a, axis=None) -> Tensor:
    """Sum of squares, over everything or along ``axis``."""
    a = as_tensor(a)
    v = (a.value * a.value).sum(axis=axis)

    def bwd(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (2.0 * g * a.value,)
    return _make("sqnorm", v, (a,), bwd)


def kl_categorical(p_logits, q_logits) -> Tensor:
    """Row-wise KL(softmax(p) || softmax(q)) along the last axis."""
    p_logits, q_logits = as_tensor(p_logits), as_tensor(q_logits)
    if p_logits.shape != q_logits.shape:
        raise ShapeError(f"kl: shapes {p_logits.shape} and {q_logits.shape} differ",
                         f"kl of {p_logits.name}, {q_logits.name}")
    lp = _log_softmax_np(p_logits.value)
    lq = _log_softmax_np(q_logits.value)
    p, q = np.exp(lp), np.exp(lq)
    diff = lp - lq
    v = (p * diff).sum(axis=-1)

    def bwd(g):
        g = g[..., None]
        # d/dp_logits: p * (diff - KL); d/dq_logits: q - p
        gp = g * p * (diff - v[..., None]) if p_logits.requires_grad else None
        gq = g * (q - p) if q_logits.requires_grad else None
        return gp, gq
    return _make("kl", v, (p_logits, q_logits), bwd)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        v = np.concatenate([t.value for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}",
                         "concat") from exc
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bwd(g):
        return tuple(np.split(g, sizes, axis=axis))
    return _make("concat", v, ts, bwd)


def take_along(a, indices) -> Tensor:
    """Row-wise gather: ``out[i] = a[i, indices[i]]`` for a of shape (n, k)."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    if a.value.ndim != 2 or idx.shape != (a.shape[0],):
        raise ShapeError(f"take_along: a{a.shape} with indices{idx.shape}", f"take of {a.name}")
    rows = np.arange(a.shape[0])
    v = a.value[rows, idx]

    def bwd(g):
        out = np.zeros_like(a.value)
        out[rows, idx] = g
        return (out,)
    return _make("take", v, (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        v = a.value.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}", f"reshape of {a.name}") from exc
    return _make("reshape", v, (a,), lambda g: (g.reshape(a.shape),))


def _getitem(a: Tensor, index) -> Tensor:
    v = a.value[index]

    def bwd(g):
        out = np.zeros_like(a.value)
        np.add.at(out, index, g)
        return (out,)
    return _make("getitem", v, (a,), bwd)


def cross_entropy(logits, labels, reduce: bool = True) -> Tensor:
    """Cross-entropy of integer ``labels`` under ``logits``; batch mean by default."""
    nll = neg(take_along(log_softmax(logits), labels))
    return mean(nll) if reduce else nll


def value_and_grad(fn: Callable, params: Sequence = (), inputs: Sequence = (),
                   wrt: str = "params"):
    """Evaluate ``fn(param_tensors, input_tensors)`` and differentiate it.

    ``wrt`` is one of ``"params"``, ``"inputs"`` or ``"both"``. Returns
    ``(loss, grads)`` where grads is a list aligned with the requested leaves,
    or a ``(param_grads, input_grads)`` pair for ``"both"``.
    """
    if wrt not in ("params", "inputs", "both"):
        raise ValueError(f"wrt must be params, inputs or both, got {wrt!r}")
    g = Graph()
    p_leaves = [g.leaf(p, requires_grad=wrt in ("params", "both"), op="param") for p in params]
    i_leaves = [g.leaf(x, requires_grad=wrt in ("inputs", "both"), op="input") for x in inputs]
    with g:
        out = fn(p_leaves, i_leaves)
    out = as_tensor(out)
    g.backward(out)
    loss = float(out.value.reshape(()))
    p_grads = [g.adjoint(t) for t in p_leaves]
    i_grads = [g.adjoint(t) for t in i_leaves]
    if wrt == "params":
        return loss, p_grads
    if wrt == "inputs":
        return loss, i_grads
    return loss, (p_grads, i_grads)


@dataclass
class OptimState:
    lr: float
    weight_decay: float = 0.0
    epochs: int = 1
    epoch: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be non-negative")
        if not 0 <= self.epoch <= self.epochs:
            raise ValueError(f"epoch {self.epoch} outside [0, {self.epochs}]")

    @property
    def current_lr(self) -> float:
        return cosine_lr(self.epoch, self.epochs, self.lr)


def cosine_lr(epoch: float, total: int, base: float) -> float:
    if total <= 0:
        raise ValueError("total epochs must be positive")
    if not 0 <= epoch <= total:
        raise ValueError(f"epoch {epoch} outside [0, {total}]")
    return base * 0.5 * (1.0 + math.cos(math.pi * epoch / total))


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: OptimState,
             lr: float | None = None) -> list[np.ndarray]:
    """``w - lr * (g + wd * w)``; lr defaults to the schedule value for ``state.epoch``."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    step = state.current_lr if lr is None else lr
    out = []
    for i, (w, g) in enumerate(zip(params, grads)):
        w, g = np.asarray(w, dtype=np.float64), np.asarray(g, dtype=np.float64)
        if w.shape != g.shape:
            raise ShapeError(f"param shape {w.shape} vs grad shape {g.shape}", f"param {i}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient", f"param {i}")
        out.append(w - step * (g + state.weight_decay * w))
    return out
