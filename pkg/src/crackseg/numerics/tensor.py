"""Reverse-mode autodiff tape over numpy arrays.

A Tensor wraps a float64 ndarray plus an optional backward closure. Ops in
ops.py / fft.py build the graph; Tensor.backward() runs an iterative
topological sort and accumulates gradients into every tensor with
requires_grad set. Nodes whose parents are all constant carry no tape at all,
so masks and frozen inputs cost nothing on the backward pass.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when an operation rejects its input shapes."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = tuple(parents)
        self._backward = backward

    # -- introspection ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, grad={self.requires_grad})"

    # -- graph --------------------------------------------------------------

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def _topo(self):
        # iterative DFS; recursion would overflow on long scan chains
        order, seen, stack = [], set(), [(self, False)]
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
        return order

    def backward(self):
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.data.shape}")
        order = self._topo()
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None:
                    continue
                acc = grads.get(id(p))
                grads[id(p)] = pg if acc is None else acc + pg

    def walk_nonfinite(self):
        """Return (op, shape) of the first non-finite node in this graph, or None."""
        for node in self._topo():
            if not np.all(np.isfinite(node.data)):
                return node.op, node.data.shape
        return None


def astensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make(data: np.ndarray, parents, backward, op: str) -> Tensor:
    """Create an op node; drops the tape when no parent needs gradients."""
    if any(p.requires_grad or p._backward is not None for p in parents):
        return Tensor(data, op=op, parents=parents, backward=backward)
    return Tensor(data, op=op)


def grad_check(fn, wrt, eps: float = 1e-5) -> float:
    """Max relative error between tape gradients of fn() and central differences.

    fn is a closure returning a scalar Tensor; wrt is a list of leaf Tensors it
    reads. Relative error per element is |a - fd| / (|a| + |fd| + 1e-12).
    """
    wrt = list(wrt)
    for t in wrt:
        t.zero_grad()
        t.requires_grad = True
    out = fn()
    bad = out.walk_nonfinite()
    if bad is not None:
        raise FloatingPointError(f"non-finite value in op {bad[0]!r} of shape {bad[1]}")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in wrt]
    worst = 0.0
    for t, a in zip(wrt, analytic):
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            f_plus = float(fn().data)
            flat[i] = keep - eps
            f_minus = float(fn().data)
            flat[i] = keep
            fd = (f_plus - f_minus) / (2.0 * eps)
            ai = a.reshape(-1)[i]
            worst = max(worst, abs(ai - fd) / (abs(ai) + abs(fd) + 1e-12))
    return worst
