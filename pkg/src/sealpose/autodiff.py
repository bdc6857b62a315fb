"""Reverse-mode automatic differentiation over numpy arrays.

Every :class:`Node` holds a float array (a scalar is the 0-d case) and a
closure mapping the upstream gradient to gradients of its parents. Graphs are
built eagerly by the operations in this module. Nodes that do not depend on
any ``requires_grad`` leaf are pruned at construction time, so constant
sub-expressions never reach the tape.

Example
-------
>>> x = Node(2.0, requires_grad=True, name="x", is_param=True)
>>> y = Node(5.0, requires_grad=True, name="y", is_param=True)
>>> grads = backward(x * y)
>>> float(grads["x"]), float(grads["y"])
(5.0, 2.0)
"""
from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit

from .errors import ContractError, NumericError, StructuralError

_DTYPE = [np.dtype(np.float64)]


@contextmanager
def precision(dtype):
    """Build nodes with ``dtype`` (float32 or float64) inside the block."""
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ContractError(f"unsupported dtype {dtype}")
    _DTYPE.append(dtype)
    try:
        yield
    finally:
        _DTYPE.pop()


def current_dtype() -> np.dtype:
    return _DTYPE[-1]


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Node:
    __slots__ = ("value", "grad", "op", "parents", "name", "requires_grad", "is_param", "_backward")

    def __init__(
        self,
        value,
        parents: Sequence["Node"] = (),
        op: str = "leaf",
        backward: BackwardFn | None = None,
        *,
        name: str | None = None,
        requires_grad: bool = False,
        is_param: bool = False,
    ):
        self.value = np.asarray(value, dtype=_DTYPE[-1])
        self.grad: np.ndarray | None = None
        self.op = op
        self.parents = tuple(parents)
        self.name = name
        self.requires_grad = requires_grad
        self.is_param = is_param
        self._backward = backward

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Node<{self.op}{label} shape={self.value.shape}>"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    # operator sugar
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
        return neg(self)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def const(value) -> Node:
    """Wrap ``value`` as a leaf that never receives a gradient."""
    return value if isinstance(value, Node) else Node(value)


def variable(value, name: str | None = None) -> Node:
    """A differentiable non-parameter leaf (its gradient is not returned by :func:`backward`)."""
    return Node(value, requires_grad=True, name=name)


def _make(value, parents: Sequence[Node], op: str, bw: BackwardFn) -> Node:
    if any(p.requires_grad for p in parents):
        return Node(value, parents, op, bw, requires_grad=True)
    return Node(value, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Node:
    a, b = const(a), const(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.value + b.value, (a, b), "add", bw)


def sub(a, b) -> Node:
    a, b = const(a), const(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.value - b.value, (a, b), "sub", bw)


def mul(a, b) -> Node:
    a, b = const(a), const(b)

    def bw(g):
        ga = _unbroadcast(g * b.value, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.value, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.value * b.value, (a, b), "mul", bw)


def div(a, b) -> Node:
    a, b = const(a), const(b)
    out = a.value / b.value

    def bw(g):
        ga = _unbroadcast(g / b.value, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.value, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), "div", bw)


def neg(a) -> Node:
    a = const(a)
    return _make(-a.value, (a,), "neg", lambda g: (-g,))


def power(a, p: float) -> Node:
    a = const(a)
    av = a.value
    return _make(av**p, (a,), "pow", lambda g: (g * p * av ** (p - 1),))


def exp(a) -> Node:
    a = const(a)
    out = np.exp(a.value)
    return _make(out, (a,), "exp", lambda g: (g * out,))


def log(a) -> Node:
    a = const(a)
    av = a.value
    return _make(np.log(av), (a,), "log", lambda g: (g / av,))


def sqrt(a) -> Node:
    a = const(a)
    out = np.sqrt(a.value)
    return _make(out, (a,), "sqrt", lambda g: (g * 0.5 / out,))


def tanh(a) -> Node:
    a = const(a)
    out = np.tanh(a.value)
    return _make(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))


def relu(a) -> Node:
    """Rectifier; the derivative at exactly 0 is taken to be 0."""
    a = const(a)
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), (a,), "relu", lambda g: (g * mask,))


hinge = relu


def abs_(a) -> Node:
    a = const(a)
    sign = np.sign(a.value)
    return _make(np.abs(a.value), (a,), "abs", lambda g: (g * sign,))


def softplus(a) -> Node:
    """log(1 + exp(a)) evaluated without overflow."""
    a = const(a)
    av = a.value
    out = np.maximum(av, 0.0) + np.log1p(np.exp(-np.abs(av)))
    return _make(out, (a,), "softplus", lambda g: (g * expit(av),))


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def _expand(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims: bool = False) -> Node:
    a = const(a)
    shape = a.shape
    return _make(
        a.value.sum(axis=axis, keepdims=keepdims),
        (a,),
        "sum",
        lambda g: (_expand(g, shape, axis, keepdims),),
    )


def mean(a, axis=None, keepdims: bool = False) -> Node:
    a = const(a)
    count = a.value.size if axis is None else int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape) -> Node:
    a = const(a)
    old = a.shape
    return _make(a.value.reshape(shape), (a,), "reshape", lambda g: (g.reshape(old),))


def transpose(a, axes: Sequence[int]) -> Node:
    a = const(a)
    inverse = np.argsort(axes)
    return _make(np.transpose(a.value, axes), (a,), "transpose", lambda g: (np.transpose(g, inverse),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a, idx) -> Node:
    a = const(a)
    shape = a.shape
    basic = _is_basic_index(idx)

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make(a.value[idx], (a,), "getitem", bw)


def concat(nodes: Sequence, axis: int = -1) -> Node:
    nodes = [const(n) for n in nodes]
    sizes = [n.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([n.value for n in nodes], axis=axis), nodes, "concat", bw)


def stack(nodes: Sequence, axis: int = 0) -> Node:
    nodes = [const(n) for n in nodes]
    out = np.stack([n.value for n in nodes], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(nodes)))

    return _make(out, nodes, "stack", bw)


# ---------------------------------------------------------------------------
# linear algebra and network primitives


def matmul(a, b) -> Node:
    a, b = const(a), const(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise ContractError("matmul operands must be at least 2-D")
    # (..., n, k) @ (k, m) runs as one 2-D product, which numpy does far faster
    flat = bv.ndim == 2 and av.ndim > 2
    if flat:
        out = (av.reshape(-1, av.shape[-1]) @ bv).reshape(av.shape[:-1] + (bv.shape[-1],))
    else:
        out = av @ bv

    def bw(g):
        ga = gb = None
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                ga = (g2 @ bv.T).reshape(av.shape)
            if b.requires_grad:
                gb = av.reshape(-1, av.shape[-1]).T @ g2
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return ga, gb

    return _make(out, (a, b), "matmul", bw)


def linear(x, weight, bias=None) -> Node:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def softmax(a, axis: int = -1) -> Node:
    a = const(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (a,), "softmax", bw)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Node:
    """Normalize over the last axis, then apply an elementwise affine map."""
    x, gain, bias = const(x), const(gain), const(bias)
    xv = x.value
    mu = xv.mean(axis=-1, keepdims=True)
    centered = xv - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std

    def bw(g):
        gx = ggain = gbias = None
        if x.requires_grad:
            gxhat = g * gain.value
            gx = inv_std * (
                gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
            )
        if gain.requires_grad:
            ggain = _unbroadcast(g * xhat, gain.shape)
        if bias.requires_grad:
            gbias = _unbroadcast(g, bias.shape)
        return gx, ggain, gbias

    return _make(xhat * gain.value + bias.value, (x, gain, bias), "layer_norm", bw)


def norm(a, axis: int = -1) -> Node:
    """Euclidean norm along ``axis``; the gradient at a zero vector is 0."""
    a = const(a)
    av = a.value
    n = np.sqrt((av * av).sum(axis=axis))

    def bw(g):
        safe = np.where(n > 0, n, 1.0)
        scale = np.where(n > 0, g / safe, 0.0)
        return (np.expand_dims(scale, axis) * av,)

    return _make(n, (a,), "norm", bw)


# ---------------------------------------------------------------------------
# backward pass


def _toposort(root: Node) -> list[Node]:
    order: list[Node] = []
    state: dict[int, int] = {id(root): 1}
    stack = [(root, iter(root.parents))]
    while stack:
        node, parents = stack[-1]
        for parent in parents:
            seen = state.get(id(parent))
            if seen == 1:
                raise StructuralError(f"cycle detected through {parent!r}")
            if seen is None:
                state[id(parent)] = 1
                stack.append((parent, iter(parent.parents)))
                break
        else:
            stack.pop()
            state[id(node)] = 2
            order.append(node)
    return order


def backward(root: Node, params: Mapping[str, Node] | Iterable[Node] | None = None) -> dict[str, np.ndarray]:
    """Accumulate d(root)/d(node) into ``node.grad`` for every reachable node.

    Returns a map from parameter name to gradient. When ``params`` is given,
    every one of its entries is present in the result, with zeros for
    parameters the root does not depend on. The tape of interior nodes is
    released afterwards, so a graph can be differentiated only once.
    """
    if root.value.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    order = _toposort(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node.grad is None:
            continue
        if not np.all(np.isfinite(node.value)):
            # report where the non-finite value first appears, not where it was noticed
            origin = next(n for n in order if not np.all(np.isfinite(n.value)))
            raise NumericError(f"non-finite value at {origin!r}")
        if node._backward is None:
            continue
        for parent, g in zip(node.parents, node._backward(node.grad)):
            if g is None or not parent.requires_grad:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g

    grads: dict[str, np.ndarray] = {}
    for node in order:
        if node.is_param:
            if node.grad is None:
                node.grad = np.zeros_like(node.value)
            if not np.all(np.isfinite(node.grad)):
                raise NumericError(f"non-finite gradient for parameter {node.name!r}")
            grads[node.name] = np.array(node.grad, dtype=np.float64).reshape(node.shape)
    if params is not None:
        items = params.values() if isinstance(params, Mapping) else params
        for node in items:
            grads.setdefault(node.name, np.zeros_like(node.value))

    for node in order:
        if node.parents:
            node.parents = ()
            node._backward = None
    return grads
