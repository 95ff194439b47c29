"""Reverse-mode differentiation over dense float64 arrays.

Every op builds a :class:`Node` holding its value, its parents and a closure
that pushes the incoming gradient back to those parents. ``backward`` walks
the graph in reverse topological order and accumulates gradients additively,
so a node that feeds several consumers receives the sum of their adjoints.

Broadcasting follows numpy rules; gradients are summed back to the operand
shape.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import linalg as sla
from scipy import special

__all__ = [
    "Node", "Tape", "NonFiniteError", "ShapeError", "NotPositiveDefiniteError",
    "as_node", "constant", "variable", "backward", "finite_diff_check",
    "add", "sub", "mul", "div", "neg", "matmul", "transpose", "exp", "log",
    "pow", "sqrt", "abs", "sum", "mean", "sigmoid", "tanh", "relu", "gelu",
    "softplus", "softmax", "logsumexp", "layer_norm", "dropout", "concat",
    "slice", "take_rows", "reshape", "triangular_solve", "cholesky", "solve",
    "l1_norm", "lgamma", "square",
]


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""


class ShapeError(ValueError):
    pass


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    def __init__(self, index: int):
        super().__init__(f"matrix is not positive definite: leading minor {index} failed")
        self.index = index


_tape_stack: list["Tape"] = []


class Tape:
    """Records nodes in creation order while active.

    Creation order is a valid topological order (parents always exist before
    their children), so ``Tape.backward`` can sweep the record in reverse.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.remove(self)

    def backward(self, root: "Node") -> None:
        backward(root, tape=self)


class Node:
    __slots__ = ("value", "grad", "parents", "op", "requires_grad", "_backward", "name", "__weakref__")

    __array_priority__ = 100.0

    def __init__(self, value, requires_grad: bool = False, name: str | None = None,
                 parents: tuple["Node", ...] = (), op: str = "leaf",
                 backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.parents = parents
        self.op = op
        self.requires_grad = requires_grad
        self._backward = backward_fn
        self.name = name
        for tape in _tape_stack:
            tape.nodes.append(self)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Node{label}(op={self.op}, shape={self.shape})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __pow__(self, p): return pow(self, p)
    def __getitem__(self, idx): return slice(self, idx)

    @property
    def T(self) -> "Node":
        return transpose(self)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def constant(x) -> Node:
    return Node(x, requires_grad=False)


def variable(x, name: str | None = None) -> Node:
    return Node(np.array(x, dtype=np.float64), requires_grad=True, name=name)


def _make(value: np.ndarray, parents: tuple[Node, ...], op: str, backward_fn) -> Node:
    value = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite value produced by '{op}'")
    req = any(p.requires_grad for p in parents)
    return Node(value, requires_grad=req, parents=parents, op=op,
                backward_fn=backward_fn if req else None)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Node, b: Node, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- backward

def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node, tape: Tape | None = None) -> None:
    """Populate ``grad`` with d(root)/d(node) for every node needing it."""
    if root.value.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    if tape is not None:
        order = [n for n in tape.nodes if n.requires_grad]
    else:
        order = _topo_order(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def finite_diff_check(f: Callable[[Node], Node], x: np.ndarray, step: float = 1e-5,
                      mask: np.ndarray | None = None) -> float:
    """Max relative error between autodiff and central differences.

    ``mask`` restricts the comparison to selected coordinates (e.g. to skip
    a ReLU kink).
    """
    x = np.array(x, dtype=np.float64)
    xv = variable(x)
    out = f(xv)
    backward(out)
    analytic = np.zeros_like(x) if xv.grad is None else xv.grad
    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        if mask is not None and not mask.reshape(-1)[i]:
            continue
        orig = flat[i]
        flat[i] = orig + step
        fp = f(constant(x)).item()
        flat[i] = orig - step
        fm = f(constant(x)).item()
        flat[i] = orig
        numeric.reshape(-1)[i] = (fp - fm) / (2 * step)
    err = np.abs(analytic - numeric) / (np.abs(analytic) + 1e-8)
    if mask is not None:
        err = err[mask]
    return float(err.max()) if err.size else 0.0


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a, b, "add")
    return _make(a.value + b.value, (a, b), "add",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a, b, "sub")
    return _make(a.value - b.value, (a, b), "sub",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a, b, "mul")
    return _make(a.value * b.value, (a, b), "mul",
                 lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.value / b.value

    def bw(g):
        return (_unbroadcast(g / b.value, a.shape),
                _unbroadcast(-g * a.value / b.value ** 2, b.shape))
    return _make(out, (a, b), "div", bw)


def neg(a) -> Node:
    a = as_node(a)
    return _make(-a.value, (a,), "neg", lambda g: (-g,))


def exp(a) -> Node:
    a = as_node(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    return _make(out, (a,), "exp", lambda g: (g * out,))


def log(a) -> Node:
    a = as_node(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.value)
    return _make(out, (a,), "log", lambda g: (g / a.value,))


def pow(a, p) -> Node:
    """Elementwise ``a ** p`` for a constant (scalar or array) exponent."""
    a = as_node(a)
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out = np.power(a.value, p)

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(p == 0, 0.0, p * np.power(a.value, p - 1))
        return (_unbroadcast(g * d, a.shape),)
    return _make(out, (a,), "pow", bw)


def square(a) -> Node:
    a = as_node(a)
    return _make(a.value ** 2, (a,), "square", lambda g: (2.0 * g * a.value,))


def sqrt(a) -> Node:
    a = as_node(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.value)
    return _make(out, (a,), "sqrt", lambda g: (g * 0.5 / out,))


def abs(a) -> Node:
    a = as_node(a)
    return _make(np.abs(a.value), (a,), "abs", lambda g: (g * np.sign(a.value),))


def sigmoid(a) -> Node:
    a = as_node(a)
    out = special.expit(a.value)
    return _make(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Node:
    a = as_node(a)
    out = np.tanh(a.value)
    return _make(out, (a,), "tanh", lambda g: (g * (1.0 - out ** 2),))


def relu(a) -> Node:
    a = as_node(a)
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), (a,), "relu", lambda g: (g * mask,))


def gelu(a) -> Node:
    """Exact GELU, ``x * Phi(x)``."""
    a = as_node(a)
    x = a.value
    cdf = 0.5 * (1.0 + special.erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x ** 2) / math.sqrt(2.0 * math.pi)
    return _make(x * cdf, (a,), "gelu", lambda g: (g * (cdf + x * pdf),))


def softplus(a) -> Node:
    a = as_node(a)
    out = np.logaddexp(0.0, a.value)
    return _make(out, (a,), "softplus", lambda g: (g * special.expit(a.value),))


def lgamma(a) -> Node:
    a = as_node(a)
    return _make(special.gammaln(a.value), (a,), "lgamma",
                 lambda g: (g * special.digamma(a.value),))


# ---------------------------------------------------------------- reductions

def sum(a, axis=None, keepdims: bool = False) -> Node:
    a = as_node(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _make(out, (a,), "sum", bw)


def mean(a, axis=None, keepdims: bool = False) -> Node:
    a = as_node(a)
    count = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return div(sum(a, axis=axis, keepdims=keepdims), float(count))


def l1_norm(a) -> Node:
    return sum(abs(a))


def softmax(a, axis: int = -1) -> Node:
    a = as_node(a)
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return _make(out, (a,), "softmax", bw)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Node:
    a = as_node(a)
    out = special.logsumexp(a.value, axis=axis, keepdims=True)
    weights = np.exp(a.value - out)
    result = out if keepdims else np.squeeze(out, axis=axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * weights,)
    return _make(result, (a,), "logsumexp", bw)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.value @ b.value

    def bw(g):
        ga = g @ np.swapaxes(b.value, -1, -2)
        gb = np.swapaxes(a.value, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return _make(out, (a, b), "matmul", bw)


def transpose(a, axes: Sequence[int] | None = None) -> Node:
    a = as_node(a)
    if axes is None:
        if a.ndim < 2:
            return a
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.value, axes), (a,), "transpose",
                 lambda g: (np.transpose(g, inv),))


def reshape(a, shape: Sequence[int]) -> Node:
    a = as_node(a)
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return _make(out, (a,), "reshape", lambda g: (g.reshape(a.shape),))


def concat(nodes: Iterable, axis: int = -1) -> Node:
    nodes = [as_node(n) for n in nodes]
    try:
        out = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    splits = np.cumsum([n.shape[axis] for n in nodes])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))
    return _make(out, tuple(nodes), "concat", bw)


def slice(a, idx) -> Node:
    """Basic or integer-array indexing; repeated indices accumulate."""
    a = as_node(a)
    out = a.value[idx]

    def bw(g):
        full = np.zeros_like(a.value)
        np.add.at(full, idx, g)
        return (full,)
    return _make(np.array(out), (a,), "slice", bw)


def take_rows(table, index: np.ndarray) -> Node:
    """Row gather ``table[index]`` (embedding lookup)."""
    table = as_node(table)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise IndexError(f"row index out of range for table with {table.shape[0]} rows")
    return slice(table, index)


def triangular_solve(a, b, lower: bool = True, unit_diagonal: bool = False) -> Node:
    """Solve ``a @ x = b`` for triangular ``a`` (k x k) and ``b`` (k x m)."""
    a, b = as_node(a), as_node(b)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or b.shape[0] != a.shape[0]:
        raise ShapeError(f"triangular_solve: incompatible shapes {a.shape} and {b.shape}")
    x = sla.solve_triangular(a.value, b.value, lower=lower, unit_diagonal=unit_diagonal)
    tri = np.tril if lower else np.triu

    def bw(g):
        gb = sla.solve_triangular(a.value, g, lower=lower, unit_diagonal=unit_diagonal, trans="T")
        ga = -(gb.reshape(gb.shape[0], -1) @ x.reshape(x.shape[0], -1).T)
        offset = (-1 if lower else 1) if unit_diagonal else 0
        return tri(ga, offset), gb
    return _make(x, (a, b), "triangular_solve", bw)


def solve(a, b) -> Node:
    """General dense solve ``a @ x = b``."""
    a, b = as_node(a), as_node(b)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or b.shape[0] != a.shape[0]:
        raise ShapeError(f"solve: incompatible shapes {a.shape} and {b.shape}")
    lu = sla.lu_factor(a.value)
    x = sla.lu_solve(lu, b.value)

    def bw(g):
        gb = sla.lu_solve(lu, g, trans=1)
        ga = -(gb.reshape(gb.shape[0], -1) @ x.reshape(x.shape[0], -1).T)
        return ga, gb
    return _make(x, (a, b), "solve", bw)


def _cholesky_lower(a: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        pass
    # locate the first failing leading minor for the error report
    for k in range(1, a.shape[0] + 1):
        try:
            np.linalg.cholesky(a[:k, :k])
        except np.linalg.LinAlgError:
            raise NotPositiveDefiniteError(k) from None
    raise NotPositiveDefiniteError(a.shape[0])


def cholesky(a) -> Node:
    """Lower Cholesky factor of a symmetric positive definite matrix.

    The gradient returned for ``a`` is symmetric: perturbations are taken to
    act on the symmetric matrix, not on one triangle.
    """
    a = as_node(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"cholesky: expected square matrix, got {a.shape}")
    L = _cholesky_lower(a.value)

    def bw(g):
        phi = np.tril(L.T @ g)
        phi[np.diag_indices_from(phi)] *= 0.5
        tmp = sla.solve_triangular(L, phi.T, lower=True, trans="T")
        s = sla.solve_triangular(L, tmp.T, lower=True, trans="T")
        return (0.5 * (s + s.T),)
    return _make(L, (a,), "cholesky", bw)


# ---------------------------------------------------------------- layers

def layer_norm(x, gain=None, bias=None, eps: float = 1e-5) -> Node:
    x = as_node(x)
    mu = mean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = mean(square(centered), axis=-1, keepdims=True)
    out = div(centered, sqrt(add(var, eps)))
    if gain is not None:
        out = mul(out, gain)
    if bias is not None:
        out = add(out, bias)
    return out


def dropout(x, p: float, train: bool, rng: np.random.Generator | None = None) -> Node:
    """Inverted dropout; the identity in eval mode or when ``p == 0``."""
    x = as_node(x)
    if not train or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if rng is None:
        raise ValueError("dropout in train mode needs an explicit rng")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return mul(x, keep)
