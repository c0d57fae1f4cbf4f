"""Minimal reverse-mode differentiation over numpy arrays.

Only the operations the SchNet-style model needs are provided: dense
affine maps, elementwise nonlinearities, row gather / segment sum, and a
handful of reductions.  Every vector-Jacobian product is itself written in
terms of these operations, so gradients can be differentiated again
(``grad(..., create_graph=True)``); this is what the force-loss term needs.

    >>> x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    >>> y = (x * x).sum()
    >>> grad(y, [x])[0].value
    array([2., 4.])
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

_recording = True


@contextmanager
def no_record():
    """Evaluate operations without building a graph."""
    global _recording
    previous = _recording
    _recording = False
    try:
        yield
    finally:
        _recording = previous


class Tensor:
    __slots__ = ("value", "requires_grad", "parents", "vjp")

    def __init__(self, value, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.parents = ()
        self.vjp = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value, parents, vjp) -> Tensor:
    out = Tensor(value)
    if _recording and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.vjp = vjp
    return out


class SegmentIndex:
    """Row index ``idx`` into an axis of length ``n``.

    Gathering rows is fancy indexing; the adjoint (segment sum) is a sparse
    product, which is much faster than ``np.add.at`` for wide rows.
    """

    __slots__ = ("idx", "n", "_scatter")

    def __init__(self, idx, n):
        self.idx = np.asarray(idx, dtype=np.int64)
        self.n = int(n)
        self._scatter = None

    @property
    def scatter_matrix(self):
        if self._scatter is None:
            m = len(self.idx)
            self._scatter = sp.csr_matrix(
                (np.ones(m), (self.idx, np.arange(m))), shape=(self.n, m)
            )
        return self._scatter


# ---------------------------------------------------------------- shape ops


def _sum_to_shape(value, shape):
    if value.shape == shape:
        return value
    lead = value.ndim - len(shape)
    if lead:
        value = value.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and value.shape[i] != 1)
    if axes:
        value = value.sum(axis=axes, keepdims=True)
    return value


def sum_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if a.shape == shape:
        return a
    return _make(_sum_to_shape(a.value, shape), (a,), lambda g: (broadcast_to(g, a.shape),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if a.shape == shape:
        return a
    return _make(np.broadcast_to(a.value, shape), (a,), lambda g: (sum_to(g, a.shape),))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.value.reshape(shape), (a,), lambda g: (reshape(g, old),))


def transpose(a: Tensor) -> Tensor:
    return _make(a.value.T, (a,), lambda g: (transpose(g),))


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            kept = list(shape)
            kept[axis] = 1
            g = reshape(g, kept)
        elif axis is None:
            g = reshape(g, (1,) * len(shape))
        return (broadcast_to(g, shape),)

    return _make(a.value.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def gather(a: Tensor, index: SegmentIndex) -> Tensor:
    """Rows ``a[index.idx]``."""
    return _make(a.value[index.idx], (a,), lambda g: (segment_sum(g, index),))


def segment_sum(a: Tensor, index: SegmentIndex) -> Tensor:
    """``out[k] = sum of a[r] over rows r with index.idx[r] == k``."""
    value = index.scatter_matrix @ a.value
    return _make(np.asarray(value), (a,), lambda g: (gather(g, index),))


# ----------------------------------------------------------- arithmetic ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.value + b.value, (a, b), lambda g: (sum_to(g, a.shape), sum_to(g, b.shape))
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.value - b.value, (a, b), lambda g: (sum_to(g, a.shape), sum_to(neg(g), b.shape))
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.value, (a,), lambda g: (neg(g),))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.value * b.value,
        (a, b),
        lambda g: (sum_to(mul(g, b), a.shape), sum_to(mul(g, a), b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        ga = div(g, b)
        return sum_to(ga, a.shape), sum_to(neg(mul(ga, div(a, b))), b.shape)

    return _make(a.value / b.value, (a, b), vjp)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.value @ b.value,
        (a, b),
        lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)),
    )


# ---------------------------------------------------------- elementwise ops


def exp(a: Tensor) -> Tensor:
    out = None

    def vjp(g):
        return (mul(g, out),)

    out = _make(np.exp(a.value), (a,), vjp)
    return out


def sqrt(a: Tensor) -> Tensor:
    out = None

    def vjp(g):
        return (div(mul(g, 0.5), out),)

    out = _make(np.sqrt(a.value), (a,), vjp)
    return out


def cos(a: Tensor) -> Tensor:
    return _make(np.cos(a.value), (a,), lambda g: (neg(mul(g, sin(a))),))


def sin(a: Tensor) -> Tensor:
    return _make(np.sin(a.value), (a,), lambda g: (mul(g, cos(a)),))




def sigmoid(a: Tensor) -> Tensor:
    out = None

    def vjp(g):
        return (mul(g, mul(out, sub(1.0, out))),)

    out = _make(expit(a.value), (a,), vjp)
    return out


LN2 = np.log(2.0)


def _softplus_parts(x):
    # logaddexp(x, 0) = max(x, 0) + log1p(exp(-|x|)); keep t = exp(-|x|)
    t = np.array(np.abs(x))
    np.negative(t, out=t)
    np.exp(t, out=t)
    sp = np.log1p(t)
    sp += np.maximum(x, 0.0)
    sp -= LN2
    return sp, t


def np_shifted_softplus(x):
    out = _softplus_parts(np.asarray(x, dtype=np.float64))[0]
    return float(out) if out.ndim == 0 else out


def shifted_softplus(a: Tensor) -> Tensor:
    """ln(0.5 e^x + 0.5); its derivative is the logistic sigmoid."""
    value, t = _softplus_parts(a.value)

    def vjp(g):
        # sigmoid from the cached exp(-|x|), no second exp
        s = np.where(a.value >= 0, 1.0, t) / (1.0 + t)
        out = None

        def svjp(gs):
            return (mul(gs, mul(out, sub(1.0, out))),)

        out = _make(s, (a,), svjp)
        return (mul(g, out),)

    return _make(value, (a,), vjp)


# ---------------------------------------------------------------- backward


def _toposort(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
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


def grad(output: Tensor, inputs, grad_output=None, create_graph=False):
    """Gradients of ``output`` (weighted by ``grad_output``) w.r.t. ``inputs``.

    With ``create_graph=True`` the returned tensors are part of a new graph
    and can be differentiated again.  Inputs that ``output`` does not depend
    on get zero gradients.
    """
    if grad_output is None:
        grad_output = np.ones_like(output.value)
    seed = as_tensor(grad_output)
    if seed.shape != output.shape:
        raise ValueError(f"grad_output shape {seed.shape} != output shape {output.shape}")

    global _recording
    previous = _recording
    _recording = create_graph
    try:
        grads = {id(output): seed}
        if output.requires_grad:
            for node in reversed(_toposort(output)):
                g = grads.get(id(node))
                if g is None or node.vjp is None:
                    continue
                for parent, pg in zip(node.parents, node.vjp(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    grads[key] = pg if key not in grads else add(grads[key], pg)
        result = []
        for x in inputs:
            g = grads.get(id(x))
            result.append(Tensor(np.zeros_like(x.value)) if g is None else g)
        return result
    finally:
        _recording = previous
