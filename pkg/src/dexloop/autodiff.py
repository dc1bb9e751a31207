"""Minimal reverse-mode automatic differentiation over numpy arrays.

Define-by-run: every op returns a Var holding its value and the pullbacks
into its parents; backward() walks the tape in reverse topological order
and accumulates gradients into the leaves. The op set is deliberately
small: affine layers, activations, elementwise arithmetic (which covers
dropout mask multiplies), and sum/MSE reductions.
"""

from __future__ import annotations

import numpy as np


class UnsupportedOp(ValueError):
    """Requested graph op is not part of the supported set."""


class ShapeMismatch(ValueError):
    """Operand shapes are incompatible for the requested op."""


class Var:
    """A node in the tape: value, accumulated gradient, and parent pullbacks."""

    __slots__ = ("value", "grad", "requires_grad", "_parents")

    def __init__(self, value, requires_grad=False, parents=()):
        self.value = np.asarray(value, dtype=float)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents

    @property
    def shape(self):
        return self.value.shape


def param(value) -> Var:
    return Var(value, requires_grad=True)


def constant(value) -> Var:
    return Var(value, requires_grad=False)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to shape, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def matmul(x: Var, w: Var) -> Var:
    if x.value.ndim != 2 or w.value.ndim != 2 or x.value.shape[1] != w.value.shape[0]:
        raise ShapeMismatch(f"matmul {x.value.shape} @ {w.value.shape}")
    out = Var(x.value @ w.value, requires_grad=True, parents=(
        (x, lambda g: g @ w.value.T),
        (w, lambda g: x.value.T @ g),
    ))
    return out


def add(x: Var, y: Var) -> Var:
    value = x.value + y.value
    return Var(value, requires_grad=True, parents=(
        (x, lambda g: _unbroadcast(g, x.value.shape)),
        (y, lambda g: _unbroadcast(g, y.value.shape)),
    ))


def sub(x: Var, y: Var) -> Var:
    value = x.value - y.value
    return Var(value, requires_grad=True, parents=(
        (x, lambda g: _unbroadcast(g, x.value.shape)),
        (y, lambda g: _unbroadcast(-g, y.value.shape)),
    ))


def mul(x: Var, y: Var) -> Var:
    value = x.value * y.value
    return Var(value, requires_grad=True, parents=(
        (x, lambda g: _unbroadcast(g * y.value, x.value.shape)),
        (y, lambda g: _unbroadcast(g * x.value, y.value.shape)),
    ))


def scale(x: Var, c: float) -> Var:
    return Var(x.value * c, requires_grad=True, parents=((x, lambda g: g * c),))


def relu(x: Var) -> Var:
    keep = x.value > 0
    return Var(x.value * keep, requires_grad=True, parents=((x, lambda g: g * keep),))


def tanh(x: Var) -> Var:
    out_value = np.tanh(x.value)
    return Var(out_value, requires_grad=True,
               parents=((x, lambda g: g * (1.0 - out_value ** 2)),))


def vsum(x: Var) -> Var:
    return Var(x.value.sum(), requires_grad=True,
               parents=((x, lambda g: np.full_like(x.value, float(g))),))


def mean(x: Var) -> Var:
    n = x.value.size
    return Var(x.value.mean(), requires_grad=True,
               parents=((x, lambda g: np.full_like(x.value, float(g) / n)),))


def mse(pred: Var, target: Var, mask: np.ndarray | None = None) -> Var:
    """Mean squared error; with a mask, averaged over unmasked entries only."""
    if pred.value.shape != target.value.shape:
        raise ShapeMismatch(f"mse {pred.value.shape} vs {target.value.shape}")
    diff = sub(pred, target)
    sq = mul(diff, diff)
    if mask is None:
        return mean(sq)
    if mask.shape != pred.value.shape:
        raise ShapeMismatch(f"mse mask {mask.shape} vs {pred.value.shape}")
    denom = float(mask.sum())
    if denom == 0:
        raise ShapeMismatch("mse mask selects no entries")
    return scale(vsum(mul(sq, constant(mask))), 1.0 / denom)


_OPS = {
    "matmul": matmul, "add": add, "sub": sub, "mul": mul, "scale": scale,
    "relu": relu, "tanh": tanh, "sum": vsum, "mean": mean, "mse": mse,
}


def apply(name: str, *args, **kwargs) -> Var:
    """Build a graph node by op name; unknown names raise UnsupportedOp."""
    try:
        op = _OPS[name]
    except KeyError:
        raise UnsupportedOp(f"unknown graph op {name!r}") from None
    return op(*args, **kwargs)


def backward(loss: Var) -> None:
    """Accumulate dloss/dleaf into .grad for every reachable requires_grad leaf."""
    if loss.value.ndim != 0:
        raise ShapeMismatch("backward expects a scalar loss")
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._parents:
            stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.asarray(1.0)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None:
            continue
        for parent, pullback in node._parents:
            if not parent.requires_grad and not parent._parents:
                continue
            contrib = pullback(g)
            prev = grads.get(id(parent))
            grads[id(parent)] = contrib if prev is None else prev + contrib
        if node.requires_grad and not node._parents:
            node.grad = g if node.grad is None else node.grad + g


def zero_grad(params) -> None:
    for p in params:
        p.grad = None
