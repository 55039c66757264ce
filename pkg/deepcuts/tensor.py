#!/usr/bin/env python3

"""Reverse-mode automatic differentiation over numpy arrays.

Every operation returns a new Tensor. When any input requires a gradient
the output remembers its inputs and a closure that maps the output
gradient to input gradients; `Tensor.backward` walks that graph in
reverse topological order.
"""

import threading
from contextlib import contextmanager

import numpy as np
from scipy.special import expit

from .common import StateError

_state = threading.local()

GELU_C = np.sqrt(2.0 / np.pi)
GELU_K = 0.044715


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    previous = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev", "_op")

    def __init__(self, data, requires_grad=False, _children=(), _op=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None
        self._prev = _children
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return "Tensor(shape={}, op={!r})".format(self.shape, self._op)

    def zero_grad(self):
        self.grad = None

    def accumulate(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self):
        if self._backward is None:
            raise StateError(
                "backward called without a recorded forward graph "
                "(no forward pass, or the graph was already consumed)"
            )
        order = _topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        # consume the graph, leaves keep their gradients
        for node in order:
            if node._backward is not None:
                node._backward = None
                node._prev = ()
                node.grad = None

    # operator sugar

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

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
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data, parents, backward, op):
    """Output tensor for an op; graph edges only when gradients are tracked."""
    requires = grad_enabled() and any(p.requires_grad for p in parents)
    if not requires:
        return Tensor(data, _op=op)
    out = Tensor(data, requires_grad=True, _children=tuple(parents), _op=op)
    out._backward = backward
    return out


def _topo_order(root):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for child in node._prev:
            if id(child) not in visited:
                stack.append((child, False))
    return order


def unbroadcast(g, shape):
    """Sum a broadcast gradient back down to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, dim in enumerate(shape):
        if dim == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


## elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        a.accumulate(unbroadcast(g, a.shape))
        b.accumulate(unbroadcast(g, b.shape))

    return make_node(a.data + b.data, (a, b), backward, "add")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a.accumulate(unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate(unbroadcast(g * a.data, b.shape))

    return make_node(a.data * b.data, (a, b), backward, "mul")


def neg(a):
    def backward(g):
        a.accumulate(-g)

    return make_node(-a.data, (a,), backward, "neg")


def exp(a):
    out_data = np.exp(a.data)

    def backward(g):
        a.accumulate(g * out_data)

    return make_node(out_data, (a,), backward, "exp")


def log(a):
    def backward(g):
        a.accumulate(g / a.data)

    return make_node(np.log(a.data), (a,), backward, "log")


def tanh(a):
    t = np.tanh(a.data)

    def backward(g):
        a.accumulate(g * (1.0 - t * t))

    return make_node(t, (a,), backward, "tanh")


def sigmoid(a):
    s = expit(a.data)

    def backward(g):
        a.accumulate(g * s * (1.0 - s))

    return make_node(s, (a,), backward, "sigmoid")


def relu(a):
    on = a.data > 0

    def backward(g):
        a.accumulate(g * on)

    return make_node(np.where(on, a.data, 0.0), (a,), backward, "relu")


def gelu(a):
    """tanh approximation 0.5x(1+tanh(sqrt(2/pi)(x+0.044715x^3)))"""
    x = a.data
    t = np.tanh(GELU_C * (x + GELU_K * x ** 3))

    def backward(g):
        du = GELU_C * (1.0 + 3.0 * GELU_K * x * x)
        a.accumulate(g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du))

    return make_node(0.5 * x * (1.0 + t), (a,), backward, "gelu")


## shape


def reshape(a, shape):
    def backward(g):
        a.accumulate(g.reshape(a.shape))

    return make_node(a.data.reshape(shape), (a,), backward, "reshape")


def transpose(a, axes):
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))

    def backward(g):
        a.accumulate(g.transpose(inverse))

    return make_node(a.data.transpose(axes), (a,), backward, "transpose")


def getitem(a, index):
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        a.accumulate(full)

    return make_node(a.data[index], (a,), backward, "getitem")


def embedding(table, ids):
    ids = np.asarray(ids, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        table.accumulate(full)

    return make_node(table.data[ids], (table,), backward, "embedding")


## reductions


def tsum(a, axis=None, keepdims=False):
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate(np.broadcast_to(g, a.shape))

    return make_node(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    count = a.data.size if axis is None else np.prod(
        [a.shape[i] for i in np.atleast_1d(axis)]
    )
    return mul(tsum(a, axis, keepdims), 1.0 / count)


## linear algebra


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a.accumulate(unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b.accumulate(unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return make_node(a.data @ b.data, (a, b), backward, "matmul")


def linear(x, weight, bias):
    """y = x W^T + b over the last axis of x."""
    x = as_tensor(x)
    out_features, in_features = weight.shape

    def backward(g):
        g2 = g.reshape(-1, out_features)
        if x.requires_grad:
            x.accumulate(g @ weight.data)
        if weight.requires_grad:
            weight.accumulate(g2.T @ x.data.reshape(-1, in_features))
        if bias.requires_grad:
            bias.accumulate(g2.sum(axis=0))

    data = x.data @ weight.data.T + bias.data
    return make_node(data, (x, weight, bias), backward, "linear")


def softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        a.accumulate(s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return make_node(s, (a,), backward, "softmax")


def layer_norm(x, scale, shift, eps=1e-5):
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    width = x.shape[-1]

    def backward(g):
        if shift.requires_grad:
            shift.accumulate(g.reshape(-1, width).sum(axis=0))
        if scale.requires_grad:
            scale.accumulate((g * xhat).reshape(-1, width).sum(axis=0))
        if x.requires_grad:
            gx = g * scale.data
            x.accumulate(
                inv
                * (
                    gx
                    - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
                )
            )

    return make_node(xhat * scale.data + shift.data, (x, scale, shift), backward, "layernorm")
