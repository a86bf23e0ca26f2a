"""Minimal dense reverse-mode differentiation over numpy arrays.

Only the primitives the networks and losses here need: matmul, broadcasting
add/sub/mul, tanh, relu, sqrt, sums and means, max over an axis, batch
normalization and softmax cross-entropy.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Optional[Callable] = None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op})"

    def numpy(self) -> np.ndarray:
        return self.data

    @staticmethod
    def _make(data, parents, backward, op):
        if not np.all(np.isfinite(data)):
            raise NonFiniteError(f"non-finite value produced by {op}")
        rg = any(p.requires_grad for p in parents)
        return Tensor(data, rg, parents if rg else (), backward if rg else None, op)

    # -- arithmetic ----------------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def back(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
        return Tensor._make(a.data + b.data, (a, b), back, "add")

    __radd__ = __add__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def back(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
        return Tensor._make(a.data * b.data, (a, b), back, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not a supported primitive")
        return self * (1.0 / float(other))

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self, other
        if b.data.ndim != 2:
            raise ValueError("right operand of matmul must be 2-D")

        def back(g):
            ga = g @ b.data.T
            a2 = a.data.reshape(-1, a.data.shape[-1])
            gb = a2.T @ g.reshape(-1, g.shape[-1])
            return ga, gb
        return Tensor._make(a.data @ b.data, (a, b), back, "matmul")

    # -- elementwise ---------------------------------------------------------
    def tanh(self):
        out = np.tanh(self.data)
        return Tensor._make(out, (self,), lambda g: (g * (1.0 - out * out),), "tanh")

    def relu(self):
        mask = self.data > 0
        return Tensor._make(self.data * mask, (self,), lambda g: (g * mask,), "relu")

    def square(self):
        x = self.data
        return Tensor._make(x * x, (self,), lambda g: (2.0 * x * g,), "square")

    def sqrt(self):
        with np.errstate(invalid="ignore"):
            out = np.sqrt(self.data)
        return Tensor._make(out, (self,), lambda g: (g * 0.5 / out,), "sqrt")

    def activation(self, name: str):
        if name == "tanh":
            return self.tanh()
        if name == "relu":
            return self.relu()
        if name == "none":
            return self
        raise ValueError(f"unknown activation {name!r}")

    # -- reductions ----------------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)
        return Tensor._make(np.sum(self.data, axis=axis, keepdims=keepdims), (self,), back, "sum")

    def mean(self, axis=None, keepdims=False):
        count = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis, keepdims) * (1.0 / count)

    def squared_norm(self):
        return self.square().sum()

    def norm(self):
        return self.squared_norm().sqrt()

    def max(self, axis: int):
        """Max over one axis; ties send the gradient to the first maximizer."""
        x = self.data
        idx = np.argmax(x, axis=axis)
        out = np.take_along_axis(x, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

        def back(g):
            gx = np.zeros_like(x)
            np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
            return (gx,)
        return Tensor._make(out, (self,), back, "max")

    def reshape(self, *shape):
        old = self.shape
        return Tensor._make(self.data.reshape(*shape), (self,), lambda g: (g.reshape(old),), "reshape")

    # -- backward ------------------------------------------------------------
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order, seen, stack = [], set(), [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if p.requires_grad:
                    grads[id(p)] = grads[id(p)] + pg if id(p) in grads else pg


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5):
    """Normalize over every axis but the last using batch statistics.

    Returns (output, batch_mean, batch_var) so callers can update running
    statistics.
    """
    axes = tuple(range(x.data.ndim - 1))
    cnt = np.prod([x.shape[a] for a in axes])
    mu = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def back(g):
        gg = np.sum(g * xhat, axis=axes)
        gb = np.sum(g, axis=axes)
        gxhat = g * gamma.data
        gx = inv / cnt * (cnt * gxhat - np.sum(gxhat, axis=axes) - xhat * np.sum(gxhat * xhat, axis=axes))
        return gx, gg, gb
    return Tensor._make(out, (x, gamma, beta), back, "batch_norm"), mu, var


def affine_norm(x: Tensor, mean: np.ndarray, var: np.ndarray, gamma: Tensor, beta: Tensor,
                eps: float = 1e-5) -> Tensor:
    """Batch normalization with frozen statistics (inference mode)."""
    inv = 1.0 / np.sqrt(var + eps)
    return (x - mean) * inv * gamma + beta


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of (B, C) logits against integer labels."""
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    labels = np.asarray(labels, dtype=np.int64)
    B = labels.shape[0]
    loss = -logp[np.arange(B), labels].mean()

    def back(g):
        p = np.exp(logp)
        p[np.arange(B), labels] -= 1.0
        return (g * p / B,)
    return Tensor._make(np.asarray(loss), (logits,), back, "cross_entropy")


def forward_backward(fn: Callable[..., Tensor], *inputs: np.ndarray,
                     wrt: Optional[Sequence[int]] = None):
    """Evaluate a scalar function of arrays and return (value, gradients).

    ``wrt`` selects which positional inputs get gradients (default: all).
    """
    wrt = range(len(inputs)) if wrt is None else wrt
    tensors = [Tensor(x, requires_grad=i in wrt) for i, x in enumerate(inputs)]
    out = fn(*tensors)
    if out.data.size != 1:
        raise ValueError("function must return a scalar tensor")
    out.backward()
    grads = [tensors[i].grad if tensors[i].grad is not None else np.zeros_like(tensors[i].data)
             for i in wrt]
    return float(out.data), grads
