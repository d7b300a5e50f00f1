"""Reverse-mode automatic differentiation over dense numpy arrays.

Only the operation set the codec needs is provided. Every value is a
float64 array wrapped in a :class:`Tensor`; ops build a small graph of
parent references plus a closure that routes the output gradient back to
the parents. Backward traversal is a deterministic reverse topological
walk, so repeated backward passes over the same graph produce bit
identical gradients.
"""

from __future__ import annotations

import numpy as np
from scipy import special as _special

from .errors import ContractError

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """Node in the differentiation graph holding a float64 array."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn", "name")

    def __init__(self, data, requires_grad=False, _parents=(), _grad_fn=None, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        needs = requires_grad or any(p.requires_grad for p in _parents)
        self.requires_grad = needs
        self._parents = tuple(_parents) if needs else ()
        self._grad_fn = _grad_fn if needs else None
        self.name = name

    # -- introspection ----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- gradient plumbing -------------------------------------------------
    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        The root must be scalar.
        """
        if self.data.size != 1:
            raise ContractError("backward root must be a scalar")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._grad_fn is None or node.grad is None:
                continue
            grads = node._grad_fn(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += g

    # -- operator sugar ----------------------------------------------------
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None):
        return sum_(self, axis=axis)

    def mean(self, axis=None):
        return mean(self, axis=axis)


def _toposort(root):
    order = []
    seen = set()
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
        # reversed so parents are visited in declaration order
        for parent in reversed(node._parents):
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x):
    return Tensor(x, requires_grad=False)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (adjoint of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise arithmetic -------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.data + b.data,
        _parents=(a, b),
        _grad_fn=lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.data - b.data,
        _parents=(a, b),
        _grad_fn=lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.data * b.data,
        _parents=(a, b),
        _grad_fn=lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.data / b.data,
        _parents=(a, b),
        _grad_fn=lambda g: (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
    )


def power(a, exponent):
    a = as_tensor(a)
    exponent = float(exponent)
    out = a.data**exponent

    def grad_fn(g):
        if exponent == 0.0:
            return (np.zeros_like(a.data),)
        return (g * exponent * a.data ** (exponent - 1.0),)

    return Tensor(out, _parents=(a,), _grad_fn=grad_fn)


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor(out, _parents=(a,), _grad_fn=lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return Tensor(np.log(a.data), _parents=(a,), _grad_fn=lambda g: (g / a.data,))


def sigmoid(a):
    a = as_tensor(a)
    out = _special.expit(a.data)
    return Tensor(out, _parents=(a,), _grad_fn=lambda g: (g * out * (1.0 - out),))


def softplus(a):
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    return Tensor(out, _parents=(a,), _grad_fn=lambda g: (g * _special.expit(a.data),))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return Tensor(out, _parents=(a,), _grad_fn=lambda g: (g * (1.0 - out * out),))


def leaky_relu(a, slope=0.2):
    a = as_tensor(a)
    mask = a.data > 0.0
    scale = np.where(mask, 1.0, slope)
    return Tensor(a.data * scale, _parents=(a,), _grad_fn=lambda g: (g * scale,))


def normal_cdf(a):
    """Standard normal CDF, differentiable (derivative is the pdf)."""
    a = as_tensor(a)
    out = _special.ndtr(a.data)

    def grad_fn(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * a.data * a.data)
        return (g * pdf,)

    return Tensor(out, _parents=(a,), _grad_fn=grad_fn)


def maximum(a, floor):
    """Elementwise max against a constant; gradient passes where a > floor."""
    a = as_tensor(a)
    floor = float(floor)
    mask = a.data > floor
    return Tensor(
        np.where(mask, a.data, floor),
        _parents=(a,),
        _grad_fn=lambda g: (g * mask,),
    )


def minimum(a, ceil):
    a = as_tensor(a)
    ceil = float(ceil)
    mask = a.data < ceil
    return Tensor(
        np.where(mask, a.data, ceil),
        _parents=(a,),
        _grad_fn=lambda g: (g * mask,),
    )


def clamp(a, lo, hi):
    return minimum(maximum(a, lo), hi)


# -- reductions and shape ops ------------------------------------------------

def sum_(a, axis=None):
    a = as_tensor(a)
    out = a.data.sum(axis=axis)

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return Tensor(out, _parents=(a,), _grad_fn=grad_fn)


def mean(a, axis=None):
    a = as_tensor(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum_(a, axis=axis), 1.0 / count)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ContractError("matmul expects 2-D operands")
    return Tensor(
        a.data @ b.data,
        _parents=(a, b),
        _grad_fn=lambda g: (g @ b.data.T, a.data.T @ g),
    )


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    widths = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(widths)[:-1]

    def grad_fn(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return Tensor(
        np.concatenate([t.data for t in tensors], axis=axis),
        _parents=tuple(tensors),
        _grad_fn=grad_fn,
    )


def reshape(a, shape):
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return Tensor(out, _parents=(a,), _grad_fn=lambda g: (g.reshape(a.data.shape),))


def cols(a, start, stop):
    """Column slice [:, start:stop] of a 2-D tensor."""
    a = as_tensor(a)

    def grad_fn(g):
        out = np.zeros_like(a.data)
        out[:, start:stop] = g
        return (out,)

    return Tensor(a.data[:, start:stop].copy(), _parents=(a,), _grad_fn=grad_fn)


def gather_rows(a, index, unique=False):
    """Row selection ``a[index]``; adjoint scatter-adds into the source.

    ``unique=True`` promises no duplicate indices, enabling a faster
    scatter in the backward pass.
    """
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)

    def grad_fn(g):
        out = np.zeros_like(a.data)
        if unique:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return Tensor(a.data[index], _parents=(a,), _grad_fn=grad_fn)


def sparse_affine(x, weights, bias, taps, pad_index):
    """Fused gather-matmul kernel shared by all sparse convolutions.

    out[i] = sum_t x_pad[taps[i, t]] @ weights[t] (+ bias)

    ``x`` is (n_in, c_in); ``weights`` is (T, c_in, c_out); ``taps`` is an
    int (n_out, T) map whose entries address rows of x, with ``pad_index``
    (== n_in) selecting an implicit zero row for absent neighbours. Each
    tap column must be injective on its non-pad entries, which holds for
    every translation-style neighbourhood map in this codec and lets the
    backward scatter use plain fancy indexing.
    """
    x, weights = as_tensor(x), as_tensor(weights)
    bias = as_tensor(bias) if bias is not None else None
    taps = np.asarray(taps, dtype=np.int64)
    n_in, c_in = x.data.shape
    n_taps, _, c_out = weights.data.shape
    if pad_index != n_in:
        raise ContractError("pad_index must equal the input row count")
    if weights.data.shape[1] != c_in:
        raise ContractError(
            f"channel mismatch: input has {c_in}, weights expect {weights.data.shape[1]}"
        )

    xp = np.vstack([x.data, np.zeros((1, c_in))])
    gathered = xp[taps].reshape(taps.shape[0], n_taps * c_in)
    w_flat = weights.data.reshape(n_taps * c_in, c_out)
    out = gathered @ w_flat
    if bias is not None:
        out += bias.data

    def grad_fn(g):
        gw = (gathered.T @ g).reshape(n_taps, c_in, c_out)
        gx_rows = (g @ w_flat.T).reshape(taps.shape[0], n_taps, c_in)
        gx_pad = np.zeros((n_in + 1, c_in))
        for t in range(n_taps):
            idx = taps[:, t]
            valid = idx < n_in
            gx_pad[idx[valid]] += gx_rows[valid, t, :]
        gb = g.sum(axis=0) if bias is not None else None
        return (gx_pad[:n_in], gw, gb)

    parents = (x, weights, bias) if bias is not None else (x, weights)
    if bias is None:
        return Tensor(out, _parents=parents, _grad_fn=lambda g: grad_fn(g)[:2])
    return Tensor(out, _parents=parents, _grad_fn=grad_fn)


# -- finite-difference validation --------------------------------------------

def gradient_check(fn, inputs, h=1e-4, rtol=1e-4, atol=1e-7):
    """Compare analytic gradients of ``fn`` against central differences.

    ``fn`` maps a list of Tensors to a scalar Tensor and is re-executed for
    every probe, so it must be deterministic. Returns the worst violation
    ratio |analytic - numeric| / (atol + rtol * max(|analytic|, |numeric|));
    values <= 1 pass.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(leaves)
    out.backward()
    analytic = [
        leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        for leaf in leaves
    ]

    def evaluate(probe_arrays):
        tensors = [Tensor(a) for a in probe_arrays]
        return float(fn(tensors).data)

    worst = 0.0
    for i, base in enumerate(arrays):
        flat = base.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = evaluate(arrays)
            flat[j] = orig - h
            down = evaluate(arrays)
            flat[j] = orig
            numeric = (up - down) / (2.0 * h)
            ana = analytic[i].reshape(-1)[j]
            denom = atol + rtol * max(abs(ana), abs(numeric))
            worst = max(worst, abs(ana - numeric) / denom)
    return worst
