"""Minimal reverse-mode automatic differentiation on numpy arrays.

The tape covers exactly the operator + unrolled-flow + loss composition used
by the learning code; it is not a general-purpose autodiff system.  A
:class:`Var` wraps an ndarray and records its parents together with a
vector-Jacobian closure; :func:`backward` accumulates gradients by reverse
topological traversal.

Every module-level function (``roll``, ``vsum``, ``tanh``, ``conv2d``, ...)
dispatches on its arguments: called on plain ndarrays it computes with numpy
and returns an ndarray, called on Vars it extends the tape.  Code written
against these functions therefore runs identically in fast evaluation mode
and in differentiation mode, which is what keeps the two in lockstep.

Broadcasting follows numpy; gradients of broadcast operands are summed back
to the operand shape.  Replaying the forward pass from recorded values is
bitwise reproducible since no op introduces randomness.
"""
from __future__ import annotations

import numpy as np

Array = np.ndarray


class Var:
    """Node of the tape: a value plus the recipe for its vector-Jacobian
    products with respect to its parents."""

    __slots__ = ("value", "parents", "vjp", "grad", "requires_grad")

    # make numpy defer mixed ndarray/Var expressions to the reflected
    # operators below instead of broadcasting elementwise over objects
    __array_ufunc__ = None

    def __init__(self, value, parents=(), vjp=None, requires_grad=True):
        self.value = np.asarray(value, dtype=float)
        self.parents = parents
        self.vjp = vjp
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, key):
        return getitem(self, key)


def leaf(value) -> Var:
    """Differentiable graph input."""
    return Var(value, requires_grad=True)


def is_var(x) -> bool:
    return isinstance(x, Var)


def value_of(x) -> Array:
    return x.value if is_var(x) else np.asarray(x, dtype=float)


def _unbroadcast(g: Array, shape: tuple) -> Array:
    """Sum a broadcast gradient back down to the operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _record(value, parents, vjp) -> Var:
    parents = tuple(p for p in parents if is_var(p))
    if not any(p.requires_grad for p in parents):
        return Var(value, requires_grad=False)
    return Var(value, parents, vjp)


def _binary(a, b, fwd, vjp_a, vjp_b):
    if not (is_var(a) or is_var(b)):
        return fwd(np.asarray(a, float), np.asarray(b, float))
    av, bv = value_of(a), value_of(b)
    out = fwd(av, bv)

    def vjp(g):
        grads = []
        if is_var(a):
            grads.append(_unbroadcast(vjp_a(g, av, bv), av.shape))
        if is_var(b):
            grads.append(_unbroadcast(vjp_b(g, av, bv), bv.shape))
        return grads

    return _record(out, (a, b), vjp)


def add(a, b):
    return _binary(a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _binary(a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _binary(a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b):
    return _binary(a, b, lambda x, y: x / y,
                   lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


def _unary(a, fwd, vjp_fn):
    if not is_var(a):
        return fwd(np.asarray(a, float))
    out = fwd(a.value)
    av = a.value
    return _record(out, (a,), lambda g: [vjp_fn(g, av, out)])


def exp(a):
    return _unary(a, np.exp, lambda g, x, out: g * out)


def log(a):
    return _unary(a, np.log, lambda g, x, out: g / x)


def sqrt(a):
    return _unary(a, np.sqrt, lambda g, x, out: 0.5 * g / out)


def tanh(a):
    return _unary(a, np.tanh, lambda g, x, out: g * (1.0 - out * out))


def sin(a):
    return _unary(a, np.sin, lambda g, x, out: g * np.cos(x))


def cos(a):
    return _unary(a, np.cos, lambda g, x, out: -g * np.sin(x))


def sigmoid(a):
    def fwd(x):
        return 1.0 / (1.0 + np.exp(-x))

    return _unary(a, fwd, lambda g, x, out: g * out * (1.0 - out))


def power(a, exponent: float):
    return _unary(a, lambda x: x**exponent,
                  lambda g, x, out: g * exponent * x ** (exponent - 1.0))


def roll(a, shift: int, axis: int):
    if not is_var(a):
        return np.roll(a, shift, axis=axis)
    out = np.roll(a.value, shift, axis=axis)
    return _record(out, (a,), lambda g: [np.roll(g, -shift, axis=axis)])


def vsum(a, axis=None, keepdims=False):
    if not is_var(a):
        return np.sum(np.asarray(a, float), axis=axis, keepdims=keepdims)
    av = a.value
    out = np.sum(av, axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is None:
            return [np.broadcast_to(g, av.shape).copy()]
        if not keepdims:
            g = np.expand_dims(g, axis)
        return [np.broadcast_to(g, av.shape).copy()]

    return _record(out, (a,), vjp)


def vmean(a, axis=None, keepdims=False):
    av = value_of(a)
    n = av.size if axis is None else av.shape[axis]
    return mul(vsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def matmul(a, b):
    return _binary(a, b, lambda x, y: x @ y,
                   lambda g, x, y: g @ y.T,
                   lambda g, x, y: x.T @ g)


def reshape(a, shape):
    if not is_var(a):
        return np.reshape(a, shape)
    old = a.value.shape
    return _record(np.reshape(a.value, shape), (a,),
                   lambda g: [np.reshape(g, old)])


def getitem(a, key):
    if not is_var(a):
        return np.asarray(a, float)[key]
    av = a.value
    out = av[key]

    def vjp(g):
        full = np.zeros_like(av)
        np.add.at(full, key, g)
        return [full]

    return _record(out, (a,), vjp)


def take_labels(a, labels: Array):
    """Gather ``a[n, labels[n]]`` for every row n of a 2-D array."""
    rows = np.arange(len(labels))
    if not is_var(a):
        return np.asarray(a, float)[rows, labels]
    av = a.value
    out = av[rows, labels]

    def vjp(g):
        full = np.zeros_like(av)
        full[rows, labels] = g
        return [full]

    return _record(out, (a,), vjp)


def log_softmax(a, axis=-1):
    """Stable log-softmax; the stabilizing shift is detached, which leaves
    value and gradient unchanged by shift invariance."""
    m = np.max(value_of(a), axis=axis, keepdims=True)
    z = sub(a, m)
    return sub(z, log(vsum(exp(z), axis=axis, keepdims=True)))


def softmax(a, axis=-1):
    return exp(log_softmax(a, axis=axis))


def project_tangent(a, axis=-1):
    return sub(a, vmean(a, axis=axis, keepdims=True))


def _pad_periodic(x: Array, r: int) -> Array:
    H, W = x.shape[:2]
    ih = np.arange(-r, H + r) % H
    iw = np.arange(-r, W + r) % W
    return x[ih][:, iw]


def _im2col(x: Array, ksz: int) -> Array:
    """Stack the K x K periodic neighborhoods: (H, W, C) -> (H*W, K*K*C)."""
    H, W, C = x.shape
    r = (ksz - 1) // 2
    xp = _pad_periodic(x, r)
    cols = np.empty((H, W, ksz * ksz, C))
    for dk in range(ksz):
        for dl in range(ksz):
            cols[:, :, dk * ksz + dl, :] = xp[dk:dk + H, dl:dl + W]
    return cols.reshape(H * W, ksz * ksz * C)


def _conv2d_value(x: Array, k: Array) -> Array:
    ksz, _, cin, f = k.shape
    H, W = x.shape[:2]
    out = _im2col(x, ksz) @ k.reshape(ksz * ksz * cin, f)
    return out.reshape(H, W, f)


def conv2d(x, k):
    """Periodic 2-D convolution: x (H, W, Cin) with kernel (K, K, Cin, F)
    for odd K, wrap-around padding preserving the grid size."""
    ksz = value_of(k).shape[0]
    if ksz % 2 != 1:
        raise ValueError("kernel size must be odd")
    if not (is_var(x) or is_var(k)):
        return _conv2d_value(np.asarray(x, float), np.asarray(k, float))
    xv, kv = value_of(x), value_of(k)
    out = _conv2d_value(xv, kv)

    def vjp(g):
        grads = []
        f = kv.shape[3]
        if is_var(x):
            kf = kv[::-1, ::-1].transpose(0, 1, 3, 2)  # (K, K, F, Cin)
            grads.append(_conv2d_value(g, np.ascontiguousarray(kf)))
        if is_var(k):
            gk = _im2col(xv, ksz).T @ g.reshape(-1, f)
            grads.append(gk.reshape(kv.shape))
        return grads

    return _record(out, (x, k), vjp)


def backward(root: Var, seed: Array | float = 1.0):
    """Accumulate gradients of a (typically scalar) root into ``.grad`` of
    every tape node that requires one."""
    order: list[Var] = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if id(node) in seen:
            continue
        if expanded:
            seen.add(id(node))
            order.append(node)
            continue
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    root.grad = np.broadcast_to(np.asarray(seed, float), root.value.shape).copy()
    for node in reversed(order):
        if node.vjp is None or node.grad is None:
            continue
        grads = node.vjp(node.grad)
        for parent, g in zip(node.parents, grads):
            if not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.array(g, dtype=float)
            else:
                parent.grad = parent.grad + g
