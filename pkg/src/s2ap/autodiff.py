"""Tape-based reverse-mode differentiation over dense float64 arrays.

Ops execute eagerly and are appended to a :class:`Graph`.  ``backward`` walks
the tape in strict reverse insertion order, so gradients are bit-reproducible.
Only the primitives the pruning pipeline needs are provided.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape:
        return
    # b may omit the leading batch dimension of a
    if a.data.ndim == b.data.ndim + 1 and a.shape[1:] == b.shape:
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return grad.sum(axis=0)


class Graph:
    """Append-only record of primitive ops; one graph per forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._produced: set[int] = set()

    def _record(self, op: str, inputs: Sequence[Tensor], value: np.ndarray,
                backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
        out = Tensor(value, requires_grad=any(t.requires_grad for t in inputs))
        self.nodes.append(_Node(op, tuple(inputs), out, backward))
        self._produced.add(id(out))
        return out

    # -- primitives ---------------------------------------------------------

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        av, bv = a.data, b.data
        return self._record("matmul", (a, b), av @ bv,
                            lambda g: (g @ bv.T, av.T @ g))

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        _check_broadcast("add", a, b)
        sa, sb = a.shape, b.shape
        return self._record("add", (a, b), a.data + b.data,
                            lambda g: (g, _unbroadcast(g, sb)))

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        _check_broadcast("mul", a, b)
        av, bv, sb = a.data, b.data, b.shape
        return self._record("mul", (a, b), av * bv,
                            lambda g: (g * bv, _unbroadcast(g * av, sb)))

    def relu(self, a: Tensor) -> Tensor:
        # subgradient at 0 is 0
        pos = a.data > 0
        return self._record("relu", (a,), np.where(pos, a.data, 0.0),
                            lambda g: (g * pos,))

    def clamp(self, a: Tensor, lo: float, hi: float) -> Tensor:
        inside = (a.data >= lo) & (a.data <= hi)
        return self._record("clamp", (a,), np.clip(a.data, lo, hi),
                            lambda g: (g * inside,))

    def log_softmax(self, a: Tensor) -> Tensor:
        if a.data.ndim != 2:
            raise ShapeError(f"log_softmax: expected (batch, classes), got {a.shape}")
        shifted = a.data - a.data.max(axis=1, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        p = np.exp(out)
        return self._record("log_softmax", (a,), out,
                            lambda g: (g - p * g.sum(axis=1, keepdims=True),))

    def nll(self, logp: Tensor, labels) -> Tensor:
        """Per-row negative log-likelihood ``-logp[i, y_i]``."""
        y = np.asarray(labels, dtype=np.intp)
        if logp.data.ndim != 2 or y.shape != (logp.shape[0],):
            raise ShapeError(f"nll: logp {logp.shape} vs labels {y.shape}")
        rows = np.arange(y.shape[0])

        def back(g):
            out = np.zeros_like(logp.data)
            out[rows, y] = -g
            return (out,)

        return self._record("nll", (logp,), -logp.data[rows, y], back)

    def kl(self, logp: Tensor, logq: Tensor) -> Tensor:
        """Per-row ``KL(p || q)`` from log-probability rows."""
        if logp.shape != logq.shape or logp.data.ndim != 2:
            raise ShapeError(f"kl: incompatible shapes {logp.shape} and {logq.shape}")
        p = np.exp(logp.data)
        diff = logp.data - logq.data
        return self._record("kl", (logp, logq), (p * diff).sum(axis=1),
                            lambda g: (g[:, None] * p * (diff + 1.0), -g[:, None] * p))

    def sum(self, a: Tensor) -> Tensor:
        shape = a.shape
        return self._record("sum", (a,), np.asarray(a.data.sum()),
                            lambda g: (np.broadcast_to(g, shape).copy(),))

    def mean(self, a: Tensor) -> Tensor:
        shape, n = a.shape, a.data.size
        return self._record("mean", (a,), np.asarray(a.data.sum() / n),
                            lambda g: (np.full(shape, g / n),))

    def scale(self, a: Tensor, c: float) -> Tensor:
        return self._record("scale", (a,), a.data * c, lambda g: (g * c,))

    def straight_through(self, a: Tensor, value) -> Tensor:
        """Forward returns ``value``; backward passes the gradient to ``a`` unchanged."""
        v = np.asarray(value, dtype=np.float64)
        if v.shape != a.shape:
            raise ShapeError(f"straight_through: value {v.shape} vs input {a.shape}")
        return self._record("straight_through", (a,), v, lambda g: (g,))

    # -- reverse pass -------------------------------------------------------

    def backward(self, root: Tensor) -> dict[Tensor, np.ndarray]:
        """Accumulate d(root)/d(leaf) into every reachable ``requires_grad`` tensor.

        Returns a map from each requires_grad leaf seen on the tape to its gradient
        (zeros when the leaf does not influence ``root``).
        """
        if id(root) not in self._produced:
            raise GraphError("backward called on a tensor not produced by this graph")
        if root.data.size != 1:
            raise GraphError(f"backward needs a scalar root, got shape {root.shape}")

        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            for t in node.inputs:
                if t.requires_grad and id(t) not in self._produced:
                    leaves.setdefault(id(t), t)
            if g is None or not node.output.requires_grad:
                continue
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        out: dict[Tensor, np.ndarray] = {}
        for key, t in leaves.items():
            g = grads.get(key)
            g = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=np.float64).reshape(t.shape)
            t.grad = g if t.grad is None else t.grad + g
            out[t] = g
        return out


def check_finite(*tensors: Tensor) -> None:
    """Debug pass: raise if any data or grad entry is NaN/Inf."""
    for t in tensors:
        if not np.all(np.isfinite(t.data)):
            raise FloatingPointError(f"non-finite data in {t!r}")
        if t.grad is not None and not np.all(np.isfinite(t.grad)):
            raise FloatingPointError(f"non-finite grad in {t!r}")
