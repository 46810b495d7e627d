"""Dense float64 tensors with reverse-mode automatic differentiation.

Only what is needed to train small multilayer perceptrons: elementwise
arithmetic with broadcasting, matmul, relu, reductions, softmax, a clamped
log and cross-entropy, plus an SGD optimizer with momentum and coupled
weight decay.

Graph nodes are recorded only when at least one input requires a gradient,
so a forward pass over parameters with ``requires_grad=False`` (the teacher)
builds no graph at all.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .errors import ContractError, DimensionError

LOG_EPS = 1e-12


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = ""):
        arr = np.array(data, dtype=np.float64, copy=True)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op

    @classmethod
    def _wrap(cls, arr: np.ndarray, parents: tuple, op: str) -> "Tensor":
        # internal constructor: skips the defensive copy
        out = cls.__new__(cls)
        out.data = arr
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = parents if out.requires_grad else ()
        out._backward = None
        out.op = op
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out_data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from exc
    out = Tensor._wrap(out_data, (a, b), "add")
    if out.requires_grad:
        def _backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.shape))
        out._backward = _backward
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out_data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from exc
    out = Tensor._wrap(out_data, (a, b), "mul")
    if out.requires_grad:
        def _backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.shape))
        out._backward = _backward
    return out


def scale(t: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor._wrap(t.data * c, (t,), "scale")
    if out.requires_grad:
        out._backward = lambda g: t._accumulate(g * c)
    return out


def neg(t: Tensor) -> Tensor:
    out = Tensor._wrap(-t.data, (t,), "neg")
    if out.requires_grad:
        out._backward = lambda g: t._accumulate(-g)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = Tensor._wrap(a.data @ b.data, (a, b), "matmul")
    if out.requires_grad:
        def _backward(g):
            if a.requires_grad:
                a._accumulate(g @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ g)
        out._backward = _backward
    return out


def relu(t: Tensor) -> Tensor:
    mask = t.data > 0
    out = Tensor._wrap(np.where(mask, t.data, 0.0), (t,), "relu")
    if out.requires_grad:
        out._backward = lambda g: t._accumulate(g * mask)
    return out


def tsum(t: Tensor, axis=None) -> Tensor:
    out = Tensor._wrap(np.sum(t.data, axis=axis), (t,), "sum")
    if out.requires_grad:
        def _backward(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            t._accumulate(np.broadcast_to(g, t.shape))
        out._backward = _backward
    return out


def mean(t: Tensor, axis=None) -> Tensor:
    n = t.data.size if axis is None else t.data.shape[axis]
    return scale(tsum(t, axis), 1.0 / n)


def exp(t: Tensor) -> Tensor:
    e = np.exp(t.data)
    out = Tensor._wrap(e, (t,), "exp")
    if out.requires_grad:
        out._backward = lambda g: t._accumulate(g * e)
    return out


def log(t: Tensor, eps: float = LOG_EPS) -> Tensor:
    """Natural log with inputs clamped below at ``eps``; clamped entries get zero gradient."""
    x = t.data
    live = x > eps
    safe = np.where(live, x, eps)
    out = Tensor._wrap(np.log(safe), (t,), "log")
    if out.requires_grad:
        out._backward = lambda g: t._accumulate(np.where(live, g / safe, 0.0))
    return out


def softmax_array(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    logits = as_tensor(logits)
    if logits.data.ndim == 0 or logits.shape[axis] < 1:
        raise DimensionError("softmax needs a non-empty last dimension")
    p = softmax_array(logits.data, axis)
    out = Tensor._wrap(p, (logits,), "softmax")
    if out.requires_grad:
        def _backward(g):
            dot = np.sum(g * p, axis=axis, keepdims=True)
            logits._accumulate(p * (g - dot))
        out._backward = _backward
    return out


def cross_entropy(target_dist, predicted_dist: Tensor) -> Tensor:
    """Row-wise ``-sum(a * log b)`` over the last axis, log clamped at 1e-12.

    Returns a tensor with the leading (batch) shape; a scalar for 1-D input.
    """
    a, b = as_tensor(target_dist), as_tensor(predicted_dist)
    if a.shape != b.shape:
        raise DimensionError(f"cross_entropy: target {a.shape} vs prediction {b.shape}")
    return neg(tsum(mul(a, log(b)), axis=-1))


def detach(t: Tensor) -> Tensor:
    """Value-identical tensor that is cut off from the graph."""
    return Tensor._wrap(t.data.copy(), (), "detach")


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every graph leaf that requires a gradient."""
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            # interior buffers are not needed once propagated
            if node._parents:
                node.grad = None
    # keep the loss gradient visible for callers who inspect it
    if loss.grad is None:
        loss.grad = np.ones_like(loss.data)


@dataclass
class SgdState:
    params: list[Tensor]
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocity: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ContractError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ContractError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ContractError("weight_decay must be nonnegative")
        if not self.velocity:
            self.velocity = [np.zeros_like(p.data) for p in self.params]
        elif [v.shape for v in self.velocity] != [p.shape for p in self.params]:
            raise ContractError("velocity buffers do not match parameter shapes")


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.data)


def sgd_step(state: SgdState, lr: float | None = None) -> None:
    """One SGD update, then clear gradients.

    v <- momentum * v + (grad + weight_decay * param);  param <- param - lr * v
    """
    lr = state.learning_rate if lr is None else lr
    for i, p in enumerate(state.params):
        if p.grad is None:
            raise ContractError(f"parameter {i} (shape {p.shape}) has no gradient")
    for p, v in zip(state.params, state.velocity):
        g = p.grad + state.weight_decay * p.data if state.weight_decay else p.grad
        v *= state.momentum
        v += g
        p.data -= lr * v
        p.grad = None

