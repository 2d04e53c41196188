"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Node` holds a dense float64 array (the tensor value), a lazily
allocated gradient of the same shape, and a closure that pushes its gradient
back to its parents.  Complex quantities never enter the graph; they are
carried as :class:`ComplexPair` objects whose real and imaginary parts are
ordinary nodes, and every complex operation is a composite of the real
primitives defined here.

Broadcasting follows numpy rules, and gradients are summed back onto the
broadcast operand's shape.  Reductions run in numpy's fixed order, so a
backward pass is bitwise reproducible for identical inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

PIVOT_TOL = 1e-12
LN_EPS = 1e-5


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class SingularMatrixError(np.linalg.LinAlgError):
    """A pivot fell below the tolerance during LU factorisation."""


class Node:
    """A value in the computation graph."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        value = np.asarray(value, dtype=np.float64)
        if value.ndim == 0:
            value = value.reshape(())
        self.value = value
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Node, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Node{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Backpropagate from this node.  ``grad`` defaults to ones."""
        if grad is None:
            grad = np.ones_like(self.value)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise ShapeError(f"seed gradient shape {grad.shape} != value shape {self.shape}")
        order = _topological_order(self)
        for node in order:
            if node is not self and node._backward is not None:
                node.grad = None
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
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

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _topological_order(root: Node) -> list[Node]:
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def constant(x) -> Node:
    return Node(x, requires_grad=False)


def parameter(x, name: str | None = None) -> Node:
    return Node(x, requires_grad=True, name=name)


def _make(value: np.ndarray, parents: Sequence[Node], backward) -> Node:
    out = Node(value)
    live = tuple(p for p in parents if p.requires_grad)
    if live:
        out.requires_grad = True
        out._parents = live
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    try:
        value = a.value + b.value
    except ValueError as exc:
        raise ShapeError(str(exc)) from None

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(value, (a, b), backward)


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    try:
        value = a.value - b.value
    except ValueError as exc:
        raise ShapeError(str(exc)) from None

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(value, (a, b), backward)


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    try:
        value = a.value * b.value
    except ValueError as exc:
        raise ShapeError(str(exc)) from None

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.value, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.value, b.shape))

    return _make(value, (a, b), backward)


def neg(a) -> Node:
    a = as_node(a)
    return _make(-a.value, (a,), lambda g: a._accumulate(-g))


def scale(a, factor: float) -> Node:
    a = as_node(a)
    factor = float(factor)
    return _make(a.value * factor, (a,), lambda g: a._accumulate(g * factor))


def square(a) -> Node:
    a = as_node(a)
    return _make(a.value * a.value, (a,), lambda g: a._accumulate(2.0 * g * a.value))


def relu(a) -> Node:
    a = as_node(a)
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), (a,), lambda g: a._accumulate(g * mask))


# ------------------------------------------------------------------ reductions


def sum(a, axis=None, keepdims: bool = False) -> Node:  # noqa: A001 - mirrors numpy
    a = as_node(a)
    value = np.sum(a.value, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _make(value, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Node:
    a = as_node(a)
    count = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# --------------------------------------------------------------------- linear


def matmul(a, b) -> Node:
    """Matrix product with numpy's batch broadcasting."""
    a, b = as_node(a), as_node(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        value = np.matmul(a.value, b.value)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.matmul(g, np.swapaxes(b.value, -1, -2)), a.shape))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k, n = b.shape
                gb = a.value.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.value, -1, -2), g), b.shape)
            b._accumulate(gb)

    return _make(value, (a, b), backward)


def linear(x, weight, bias=None) -> Node:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# ---------------------------------------------------------------- shape ops


def reshape(a, shape) -> Node:
    a = as_node(a)
    try:
        value = a.value.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _make(value, (a,), lambda g: a._accumulate(g.reshape(a.shape)))


def transpose(a, axes=None) -> Node:
    a = as_node(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.value, axes), (a,), lambda g: a._accumulate(np.transpose(g, inverse)))


def swap_last(a) -> Node:
    a = as_node(a)
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def concat(parts: Iterable, axis: int = -1) -> Node:
    parts = [as_node(p) for p in parts]
    try:
        value = np.concatenate([p.value for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    ax = axis % value.ndim
    bounds = np.cumsum([0] + [p.shape[ax] for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(lo, hi)
                p._accumulate(g[tuple(sl)])

    return _make(value, parts, backward)


def getitem(a, index) -> Node:
    """Basic or advanced indexing; repeated indices accumulate."""
    a = as_node(a)
    value = a.value[index]
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(a.value)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        a._accumulate(full)

    return _make(np.array(value, copy=True), (a,), backward)


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis or p is None for p in parts)


def take(a, indices, axis: int) -> Node:
    """Gather along one axis with an integer index array."""
    a = as_node(a)
    indices = np.asarray(indices, dtype=np.intp)
    ax = axis % a.ndim
    value = np.take(a.value, indices, axis=ax)

    def backward(g):
        full = np.zeros_like(a.value)
        moved = np.moveaxis(full, ax, 0)
        np.add.at(moved, indices, np.moveaxis(g, ax, 0))
        a._accumulate(full)

    return _make(value, (a,), backward)


# ------------------------------------------------------------ network layers


def softmax(a, axis: int = -1) -> Node:
    a = as_node(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        a._accumulate(s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _make(s, (a,), backward)


def softmax_rows(a) -> Node:
    return softmax(a, axis=-1)


def layer_norm(a, gain=None, bias=None, axis: int = -1, eps: float = LN_EPS) -> Node:
    """Normalise along ``axis`` with std floored at ``eps``, then apply gain and bias."""
    a = as_node(a)
    mu = a.value.mean(axis=axis, keepdims=True)
    centered = a.value - mu
    std = np.sqrt((centered * centered).mean(axis=axis, keepdims=True))
    floored = std < eps
    sigma = np.where(floored, eps, std)
    xhat = centered / sigma

    def backward(g):
        gm = g - g.mean(axis=axis, keepdims=True)
        proj = (g * xhat).mean(axis=axis, keepdims=True)
        ga = np.where(floored, gm / sigma, (gm - xhat * proj) / sigma)
        a._accumulate(ga)

    out = _make(xhat, (a,), backward)
    if gain is not None:
        out = mul(out, gain)
    if bias is not None:
        out = add(out, bias)
    return out


# ------------------------------------------------------------------ inverse


def lu_inverse(a: np.ndarray, tol: float = PIVOT_TOL) -> np.ndarray:
    """Batched inverse via LU factorisation with partial pivoting.

    ``a`` has shape ``(..., n, n)``.  A pivot smaller than ``tol`` times the
    largest absolute entry of its matrix raises :class:`SingularMatrixError`.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ShapeError(f"inverse needs square matrices, got {a.shape}")
    n = a.shape[-1]
    batch_shape = a.shape[:-2]
    lu = a.reshape(-1, n, n).copy()
    count = lu.shape[0]
    rows = np.arange(count)
    perm = np.tile(np.arange(n), (count, 1))
    scale_ = np.abs(lu).reshape(count, -1).max(axis=1)
    scale_ = np.where(scale_ > 0, scale_, 1.0)
    for k in range(n):
        p = k + np.argmax(np.abs(lu[:, k:, k]), axis=1)
        if np.any(p != k):
            lu_k = lu[rows, k].copy()
            lu[rows, k] = lu[rows, p]
            lu[rows, p] = lu_k
            perm_k = perm[rows, k].copy()
            perm[rows, k] = perm[rows, p]
            perm[rows, p] = perm_k
        pivot = lu[:, k, k]
        if np.any(np.abs(pivot) <= tol * scale_):
            raise SingularMatrixError("matrix is singular within pivot tolerance")
        if k + 1 < n:
            lu[:, k + 1 :, k] /= pivot[:, None]
            lu[:, k + 1 :, k + 1 :] -= lu[:, k + 1 :, k, None] * lu[:, k, None, k + 1 :]
    # solve L U X = P I
    x = np.zeros_like(lu)
    x[rows[:, None], np.arange(n)[None, :], perm] = 1.0
    for i in range(1, n):
        x[:, i, :] -= np.einsum("bj,bjc->bc", lu[:, i, :i], x[:, :i, :])
    for i in range(n - 1, -1, -1):
        if i + 1 < n:
            x[:, i, :] -= np.einsum("bj,bjc->bc", lu[:, i, i + 1 :], x[:, i + 1 :, :])
        x[:, i, :] /= lu[:, i, i, None]
    return x.reshape(*batch_shape, n, n)


def inverse(a) -> Node:
    """Real matrix inverse; backward uses d(A^-1) = -A^-1 dA A^-1."""
    a = as_node(a)
    ainv = lu_inverse(a.value)

    def backward(g):
        at = np.swapaxes(ainv, -1, -2)
        a._accumulate(-np.matmul(at, np.matmul(g, at)))

    return _make(ainv, (a,), backward)


# ------------------------------------------------------------------ complex


@dataclass
class ComplexPair:
    """A complex tensor stored as two real nodes of equal shape."""

    re: Node
    im: Node

    def __post_init__(self):
        self.re = as_node(self.re)
        self.im = as_node(self.im)
        if self.re.shape != self.im.shape:
            raise ShapeError(f"re/im shape mismatch: {self.re.shape} vs {self.im.shape}")

    @classmethod
    def from_complex(cls, z, requires_grad: bool = False) -> "ComplexPair":
        z = np.asarray(z, dtype=np.complex128)
        return cls(Node(z.real.copy(), requires_grad), Node(z.imag.copy(), requires_grad))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.re.shape

    def numpy(self) -> np.ndarray:
        return self.re.value + 1j * self.im.value

    def __getitem__(self, index) -> "ComplexPair":
        return ComplexPair(getitem(self.re, index), getitem(self.im, index))


def cadd(a: ComplexPair, b: ComplexPair) -> ComplexPair:
    return ComplexPair(add(a.re, b.re), add(a.im, b.im))


def cscale(a: ComplexPair, factor: float) -> ComplexPair:
    return ComplexPair(scale(a.re, factor), scale(a.im, factor))


def cmatmul(a: ComplexPair, b: ComplexPair) -> ComplexPair:
    """(ar br - ai bi, ar bi + ai br)."""
    re = sub(matmul(a.re, b.re), matmul(a.im, b.im))
    im = add(matmul(a.re, b.im), matmul(a.im, b.re))
    return ComplexPair(re, im)


def cinverse(a: ComplexPair) -> ComplexPair:
    """Complex inverse through the real block system [[Re, -Im], [Im, Re]]."""
    n = a.shape[-1]
    if len(a.shape) < 2 or a.shape[-2] != n:
        raise ShapeError(f"cinverse needs square matrices, got {a.shape}")
    top = concat([a.re, neg(a.im)], axis=-1)
    bottom = concat([a.im, a.re], axis=-1)
    block_inv = inverse(concat([top, bottom], axis=-2))
    return ComplexPair(block_inv[..., :n, :n], block_inv[..., n:, :n])


# ---------------------------------------------------------------- gradcheck


def numerical_grad(f: Callable[[], float], x: np.ndarray, index, step: float = 1e-6) -> float:
    """Central finite difference of scalar ``f`` w.r.t. ``x[index]`` (mutated in place)."""
    orig = x[index]
    x[index] = orig + step
    fp = f()
    x[index] = orig - step
    fm = f()
    x[index] = orig
    return (fp - fm) / (2.0 * step)


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
