"""Minimal reverse-mode gradient engine over float64 numpy arrays.

Covers exactly the operations the training losses compose: matrix products,
broadcast add/multiply, ReLU, axis reductions, row gathering, softmax, and a
fused negative-log-softmax. Everything runs in double precision and is
deterministic for fixed inputs and thread count.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

Array = np.ndarray


class Tensor:
    """A node in the computation graph wrapping a float64 ndarray.

    Leaves created with ``requires_grad=True`` accumulate gradients in
    ``.grad`` after ``backward()`` on a downstream scalar. Interior nodes
    propagate only if some ancestor requires gradients.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable[[Array], None] | None = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def _accumulate(self, grad: Array) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def backward(self) -> None:
        """Reverse sweep from a scalar output."""
        if self.data.ndim != 0:
            raise ValueError("backward() requires a scalar tensor")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                stack.append((parent, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Operator sugar for the handful of binary ops used in losses.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return add(self, scale(other, -1.0))

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _node(data: Array, parents: Sequence[Tensor], backward) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    return Tensor(
        data,
        requires_grad=requires,
        _parents=tuple(parents),
        _backward=backward if requires else None,
    )


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _node(out_data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(out_data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out_data = a.data * c

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g * c)

    return _node(out_data, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; ``a`` may be N-d (batched), ``b`` must be 2-d."""
    if b.ndim != 2:
        raise ValueError("matmul requires a 2-d right operand")
    out_data = a.data @ b.data

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            if a.ndim == 2:
                b._accumulate(a.data.T @ g)
            else:
                batch_axes = tuple(range(a.ndim - 1))
                b._accumulate(np.tensordot(a.data, g, axes=(batch_axes, batch_axes)))

    return _node(out_data, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ValueError("transpose supports 2-d tensors")
    out_data = a.data.T

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g.T)

    return _node(out_data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out_data = np.where(mask, a.data, 0.0)

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g * mask)

    return _node(out_data, (a,), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out_data = a.data.reshape(shape)

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _node(out_data, (a,), backward)


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    out_data = a.data.sum(axis=axis)

    def backward(g: Array) -> None:
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).copy())
        else:
            a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

    return _node(out_data, (a,), backward)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis=axis), 1.0 / n)


def take_rows(a: Tensor, index: Array) -> Tensor:
    """Gather rows of a 2-d tensor by an integer index array."""
    index = np.asarray(index, dtype=np.intp)
    out_data = a.data[index]

    def backward(g: Array) -> None:
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            np.add.at(ga, index, g)
            a._accumulate(ga)

    return _node(out_data, (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g: Array) -> None:
        if a.requires_grad:
            gy = g * out_data
            a._accumulate(gy - out_data * gy.sum(axis=axis, keepdims=True))

    return _node(out_data, (a,), backward)


def neg_log_softmax_at(logits: Tensor, labels: Array) -> Tensor:
    """Per-row ``-log softmax(logits)[label]`` along the last axis.

    ``labels`` must have shape ``logits.shape[:-1]``. Fusing keeps the
    softmax numerically stable and the graph small.
    """
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != logits.shape[:-1]:
        raise ValueError(
            f"labels shape {labels.shape} does not match logits rows {logits.shape[:-1]}"
        )
    x = logits.data
    x_max = x.max(axis=-1, keepdims=True)
    e = np.exp(x - x_max)
    lse = np.log(e.sum(axis=-1, keepdims=True)) + x_max
    picked = np.take_along_axis(x, labels[..., None], axis=-1)
    out_data = (lse - picked)[..., 0]
    probs = e / e.sum(axis=-1, keepdims=True)

    def backward(g: Array) -> None:
        if logits.requires_grad:
            gl = probs * g[..., None]
            np.subtract.at(
                gl.reshape(-1, gl.shape[-1]),
                (np.arange(labels.size), labels.reshape(-1)),
                g.reshape(-1),
            )
            logits._accumulate(gl)

    return _node(out_data, (logits,), backward)
