"""Reverse-mode automatic differentiation on numpy arrays.

A minimal tape: every operation returns a new :class:`Tensor` holding the
result array plus vector-Jacobian callbacks into its parents.  All arithmetic
is performed in float64.  Only the ops needed by the model, objective and
attack code are provided; gradients of every op are validated against central
finite differences in the test suite.
"""

from __future__ import annotations

from typing import Callable, Sequence, Union

import numpy as np

ArrayLike = Union["Tensor", np.ndarray, float, int]


class Tensor:
    """A node in a dynamically built computation graph.

    Parameters
    ----------
    data : array_like
        Value of the node, converted to a float64 ndarray.
    requires_grad : bool
        Leaf flag; interior nodes inherit it from their parents.  Backward
        passes never descend into subgraphs where it is False.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjps")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._vjps: tuple[Callable[[np.ndarray], np.ndarray], ...] = ()

    # ------------------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # ------------------------------------------------------------------
    def backward(self, seed: np.ndarray | None = None) -> None:
        """Accumulate gradients of this node into every reachable leaf.

        ``seed`` defaults to ones, which for scalar outputs is the ordinary
        gradient.  Existing ``grad`` fields on the subgraph are overwritten.
        """
        order = _toposort(self)
        for node in order:
            node.grad = None
        self.grad = (
            np.ones_like(self.data) if seed is None else np.asarray(seed, dtype=np.float64)
        )
        for node in reversed(order):
            g = node.grad
            if g is None:
                continue
            for parent, vjp in zip(node._parents, node._vjps):
                contrib = vjp(g)
                parent.grad = contrib if parent.grad is None else parent.grad + contrib

    # -- operator sugar -------------------------------------------------
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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return asum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return amean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])


def as_tensor(x: ArrayLike) -> Tensor:
    """Wrap plain arrays/scalars as constant tensors; pass tensors through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def is_tensor(x) -> bool:
    return isinstance(x, Tensor)


def _toposort(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _make(data: np.ndarray, parents: Sequence[Tensor], vjps: Sequence[Callable]) -> Tensor:
    keep = [(p, v) for p, v in zip(parents, vjps) if p.requires_grad]
    out = Tensor(data, requires_grad=bool(keep))
    if keep:
        out._parents = tuple(p for p, _ in keep)
        out._vjps = tuple(v for _, v in keep)
    return out


# ----------------------------------------------------------------------
# elementwise arithmetic
# ----------------------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        (lambda g: _unbroadcast(g, a.data.shape), lambda g: _unbroadcast(g, b.data.shape)),
    )


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        (lambda g: _unbroadcast(g, a.data.shape), lambda g: _unbroadcast(-g, b.data.shape)),
    )


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.data, a.data.shape),
            lambda g: _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data / b.data,
        (a, b),
        (
            lambda g: _unbroadcast(g / b.data, a.data.shape),
            lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
    )


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), (lambda g: -g,))


def power(a: ArrayLike, exponent: float) -> Tensor:
    a = as_tensor(a)
    e = float(exponent)
    return _make(a.data**e, (a,), (lambda g: g * e * a.data ** (e - 1.0),))


def square(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), (lambda g: g * 2.0 * a.data,))


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)
    return _make(out_data, (a,), (lambda g: g * out_data,))


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), (lambda g: g / a.data,))


def sqrt(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out_data = np.sqrt(a.data)
    return _make(out_data, (a,), (lambda g: g * 0.5 / out_data,))


def sigmoid(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    # stable for both signs
    out_data = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-a.data)), np.exp(a.data) / (1.0 + np.exp(a.data)))
    return _make(out_data, (a,), (lambda g: g * out_data * (1.0 - out_data),))


def softplus(a: ArrayLike) -> Tensor:
    """log(1 + exp(a)) computed stably; gradient is sigmoid(a)."""
    a = as_tensor(a)
    out_data = np.logaddexp(0.0, a.data)
    sig = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-a.data)), np.exp(a.data) / (1.0 + np.exp(a.data)))
    return _make(out_data, (a,), (lambda g: g * sig,))


def leaky_relu(a: ArrayLike, slope: float) -> Tensor:
    a = as_tensor(a)
    factor = np.where(a.data > 0, 1.0, slope)
    return _make(a.data * factor, (a,), (lambda g: g * factor,))


def maximum(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise max; at ties the gradient is dropped on both sides."""
    a, b = as_tensor(a), as_tensor(b)
    mask_a = a.data > b.data
    mask_b = b.data > a.data
    return _make(
        np.maximum(a.data, b.data),
        (a, b),
        (
            lambda g: _unbroadcast(g * mask_a, a.data.shape),
            lambda g: _unbroadcast(g * mask_b, b.data.shape),
        ),
    )


def clip(a: ArrayLike, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes only strictly inside."""
    a = as_tensor(a)
    inside = (a.data > lo) & (a.data < hi)
    return _make(np.clip(a.data, lo, hi), (a,), (lambda g: g * inside,))


# ----------------------------------------------------------------------
# reductions and shape ops
# ----------------------------------------------------------------------

def asum(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g: np.ndarray) -> np.ndarray:
        if axis is None:
            return np.broadcast_to(g, a.data.shape).copy() if np.ndim(g) == 0 else np.full(a.data.shape, g)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(g2, a.data.shape).copy()

    return _make(out_data, (a,), (vjp,))


def amean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.data.shape[ax] for ax in axis]))
    else:
        count = a.data.shape[axis]
    return div(asum(a, axis=axis, keepdims=keepdims), float(count))


def logsumexp(a: ArrayLike, axis: int) -> Tensor:
    """Stable log-sum-exp along ``axis``; gradient is the softmax."""
    a = as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    out_data = (m + np.log(np.sum(np.exp(a.data - m), axis=axis, keepdims=True))).squeeze(axis)

    def vjp(g: np.ndarray) -> np.ndarray:
        soft = np.exp(a.data - np.expand_dims(out_data, axis))
        return np.expand_dims(g, axis) * soft

    return _make(out_data, (a,), (vjp,))


def reshape(a: ArrayLike, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), (lambda g: g.reshape(a.data.shape),))


def take(a: ArrayLike, index) -> Tensor:
    """Basic indexing (slices / integer tuples) with scatter-add backward."""
    a = as_tensor(a)

    def vjp(g: np.ndarray) -> np.ndarray:
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return out

    return _make(a.data[index], (a,), (vjp,))


def concat(parts: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i: int):
        def vjp(g: np.ndarray) -> np.ndarray:
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            return g[tuple(sl)]

        return vjp

    return _make(
        np.concatenate([p.data for p in parts], axis=axis),
        tuple(parts),
        tuple(make_vjp(i) for i in range(len(parts))),
    )


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """2-D matrix product (batch × in) @ (in × out)."""
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data @ b.data,
        (a, b),
        (lambda g: g @ b.data.T, lambda g: a.data.T @ g),
    )


def l2_norm(a: ArrayLike) -> Tensor:
    """Euclidean norm of a flattened tensor.

    The subgradient 0 is used at the origin so optimizers started from a zero
    vector receive a finite direction.
    """
    a = as_tensor(a)
    value = float(np.sqrt(np.sum(a.data * a.data)))

    def vjp(g: np.ndarray) -> np.ndarray:
        if value == 0.0:
            return np.zeros_like(a.data)
        return g * (a.data / value)

    return _make(np.float64(value), (a,), (vjp,))


def detach(a: ArrayLike) -> Tensor:
    return Tensor(as_tensor(a).data)


def unwrap(x):
    """Drop the Tensor wrapper when it carries no gradient structure."""
    if isinstance(x, Tensor) and not x.requires_grad:
        return x.data
    return x


def value_of(x: ArrayLike) -> np.ndarray:
    """Underlying ndarray of a tensor, or the array itself."""
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
