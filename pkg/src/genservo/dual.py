"""Vectorized forward-mode dual numbers.

A :class:`Dual` carries an ndarray of values and, for every element, a vector
of partial derivatives with respect to ``P`` seeded directions.  The partials
live in a trailing axis, so ``x.grad.shape == x.value.shape + (P,)``.

The model code is written against a handful of array operations (arithmetic,
``@``, indexing, :func:`stack`, :func:`sin`, :func:`cos`, ...), which accept
plain ndarrays and duals alike.  Seeds need not be one-hot over the full
parameter vector: when a residual depends on only one member of a group of
parameters (one camera, one feature, one timestep), the whole group can share
a single block of slots and the Jacobian is decompressed afterwards.
"""

from __future__ import annotations

import numpy as np


class Dual:
    __slots__ = ("value", "grad")
    # make numpy defer binary operators to the dual
    __array_ufunc__ = None

    def __init__(self, value, grad):
        self.value = np.asarray(value, dtype=float)
        self.grad = np.asarray(grad, dtype=float)
        if self.grad.shape[:-1] != self.value.shape:
            raise ValueError(
                f"partials shape {self.grad.shape} does not match value shape {self.value.shape}"
            )

    @classmethod
    def constant(cls, value, nparams: int) -> "Dual":
        value = np.asarray(value, dtype=float)
        return cls(value, np.zeros(value.shape + (nparams,)))

    @classmethod
    def variable(cls, value) -> "Dual":
        """Seed a flat vector with the identity: one partial per element."""
        value = np.asarray(value, dtype=float).ravel()
        return cls(value, np.eye(value.size))

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def nparams(self) -> int:
        return self.grad.shape[-1]

    def __repr__(self):
        return f"Dual(value={self.value!r}, nparams={self.nparams})"

    def __len__(self):
        return len(self.value)

    # arithmetic -----------------------------------------------------------

    def __neg__(self):
        return Dual(-self.value, -self.grad)

    def __add__(self, other):
        if isinstance(other, Dual):
            value = self.value + other.value
            grad = self.grad + other.grad
        else:
            value = self.value + other
            grad = self.grad
        return Dual(value, _broadcast_grad(grad, value.shape))

    __radd__ = __add__

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Dual):
            value = self.value * other.value
            grad = self.grad * other.value[..., None] + other.grad * self.value[..., None]
        else:
            other = np.asarray(other, dtype=float)
            value = self.value * other
            grad = self.grad * other[..., None]
        return Dual(value, _broadcast_grad(grad, value.shape))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            return self * reciprocal(other)
        return self * (1.0 / np.asarray(other, dtype=float))

    def __rtruediv__(self, other):
        return reciprocal(self) * other

    def __pow__(self, k):
        if k == 2:
            return self * self
        k = float(k)
        return Dual(self.value**k, k * (self.value ** (k - 1))[..., None] * self.grad)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    # shape manipulation ---------------------------------------------------

    def __getitem__(self, idx):
        return Dual(self.value[idx], self.grad[_grad_index(idx, self.value.ndim)])

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        value = self.value.reshape(shape)
        return Dual(value, self.grad.reshape(value.shape + (self.nparams,)))

    def swapaxes(self, a, b):
        a, b = _axis(a, self.ndim), _axis(b, self.ndim)
        return Dual(self.value.swapaxes(a, b), self.grad.swapaxes(a, b))

    def sum(self, axis=None):
        if axis is None:
            axes = tuple(range(self.ndim))
        elif isinstance(axis, int):
            axes = (_axis(axis, self.ndim),)
        else:
            axes = tuple(_axis(a, self.ndim) for a in axis)
        return Dual(self.value.sum(axis=axes), self.grad.sum(axis=axes))


def _axis(axis: int, ndim: int) -> int:
    return axis + ndim if axis < 0 else axis


def _broadcast_grad(grad, shape):
    target = tuple(shape) + (grad.shape[-1],)
    if grad.shape == target:
        return grad
    return np.broadcast_to(grad, target)


def _grad_index(idx, ndim):
    if not isinstance(idx, tuple):
        idx = (idx,)
    if any(i is Ellipsis for i in idx):
        used = 0
        for i in idx:
            if i is None or i is Ellipsis:
                continue
            if isinstance(i, np.ndarray) and i.dtype == bool:
                used += i.ndim
            else:
                used += 1
        expanded = []
        for i in idx:
            if i is Ellipsis:
                expanded.extend([slice(None)] * (ndim - used))
            else:
                expanded.append(i)
        idx = tuple(expanded)
    return idx + (slice(None),)


def is_dual(x) -> bool:
    return isinstance(x, Dual)


def value_of(x):
    return x.value if isinstance(x, Dual) else np.asarray(x, dtype=float)


def unary(x, f, df):
    """Apply an elementwise function with known derivative ``df``."""
    if not isinstance(x, Dual):
        return f(np.asarray(x, dtype=float))
    return Dual(f(x.value), df(x.value)[..., None] * x.grad)


def sin(x):
    return unary(x, np.sin, np.cos)


def cos(x):
    return unary(x, np.cos, lambda v: -np.sin(v))


def sqrt(x):
    return unary(x, np.sqrt, lambda v: 0.5 / np.sqrt(v))


def reciprocal(x):
    return unary(x, lambda v: 1.0 / v, lambda v: -1.0 / (v * v))


def matmul(a, b):
    """Batched matrix product; either operand may be a dual."""
    if isinstance(a, Dual) and isinstance(b, Dual):
        value = a.value @ b.value
        grad = np.einsum("...ijp,...jk->...ikp", a.grad, b.value) + np.einsum(
            "...ij,...jkp->...ikp", a.value, b.grad
        )
    elif isinstance(a, Dual):
        value = a.value @ b
        grad = np.einsum("...ijp,...jk->...ikp", a.grad, np.asarray(b, dtype=float))
    elif isinstance(b, Dual):
        value = a @ b.value
        grad = np.einsum("...ij,...jkp->...ikp", np.asarray(a, dtype=float), b.grad)
    else:
        return np.asarray(a) @ np.asarray(b)
    return Dual(value, _broadcast_grad(grad, value.shape))


def _nparams(items):
    for x in items:
        if isinstance(x, Dual):
            return x.nparams
    return None


def stack(items, axis=0):
    items = list(items)
    p = _nparams(items)
    if p is None:
        arrays = np.broadcast_arrays(*[np.asarray(x, dtype=float) for x in items])
        return np.stack(arrays, axis=axis)
    duals = [x if isinstance(x, Dual) else Dual.constant(x, p) for x in items]
    shape = np.broadcast_shapes(*(d.shape for d in duals))
    values = [np.broadcast_to(d.value, shape) for d in duals]
    grads = [_broadcast_grad(d.grad, shape) for d in duals]
    ndim = len(shape) + 1
    ax = _axis(axis, ndim)
    return Dual(np.stack(values, axis=ax), np.stack(grads, axis=ax))


def concatenate(items, axis=0):
    items = list(items)
    p = _nparams(items)
    if p is None:
        return np.concatenate([np.asarray(x, dtype=float) for x in items], axis=axis)
    duals = [x if isinstance(x, Dual) else Dual.constant(x, p) for x in items]
    ax = _axis(axis, duals[0].ndim)
    return Dual(
        np.concatenate([d.value for d in duals], axis=ax),
        np.concatenate([d.grad for d in duals], axis=ax),
    )


def where(cond, a, b):
    cond = np.asarray(cond, dtype=bool)
    p = _nparams([a, b])
    if p is None:
        return np.where(cond, a, b)
    a = a if isinstance(a, Dual) else Dual.constant(a, p)
    b = b if isinstance(b, Dual) else Dual.constant(b, p)
    value = np.where(cond, a.value, b.value)
    grad = np.where(cond[..., None], _broadcast_grad(a.grad, value.shape), _broadcast_grad(b.grad, value.shape))
    return Dual(value, grad)


def swapaxes(x, a, b):
    if isinstance(x, Dual):
        return x.swapaxes(a, b)
    return np.swapaxes(x, a, b)


def reshape(x, shape):
    if isinstance(x, Dual):
        return x.reshape(shape)
    return np.reshape(x, shape)


def total(x):
    """Sum of all elements, pairwise-summed by numpy."""
    if isinstance(x, Dual):
        flat = x.reshape(-1)
        return Dual(np.sum(flat.value), np.sum(flat.grad, axis=0))
    return np.sum(x)
