"""Minimal reverse-mode autodiff over dense float64 matrices.

Every node value is a 2-D numpy array; scalars are (1,1). The graph is built
eagerly by the primitive functions below, each registering a backward closure
that receives the output gradient and accumulates into the parents. Closures
capture parents and forward-time arrays only, never the node they belong to,
so a released graph frees itself by reference counting instead of waiting on
the cycle collector; gradient buffers are materialised lazily, so forward-only
graphs never allocate them. `backward(loss)` topologically sorts the subgraph
reachable from the scalar loss (iteratively; recurrent graphs get deep) and
accumulates gradients in reverse. Single pass, first-order only: nothing here
supports differentiating through a gradient, and the training objectives are
formulated so they never need to.

Broadcasting is deliberately narrow: add/sub/mul accept equal shapes, a (1,k)
row, an (n,1) column, or a (1,1) scalar on the right operand. The backward
rules sum over the broadcast axes.
"""

from __future__ import annotations

from typing import Iterable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


def _check2d(value: np.ndarray, op: str) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"{op}: expected matrix, got ndim={arr.ndim}")
    return arr


class Node:
    """One value in the computation graph."""

    __slots__ = ("value", "_grad", "op", "parents", "_backward")

    def __init__(self, value, op: str = "leaf", parents: tuple = ()):
        self.value = _check2d(value, op)
        self._grad = None
        self.op = op
        self.parents = parents
        self._backward = None

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, value: np.ndarray) -> None:
        self._grad = value

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(op={self.op}, shape={self.shape})"

    # Small amount of operator sugar; the named functions below do the work.
    def __add__(self, other: "Node") -> "Node":
        return add(self, other)

    def __sub__(self, other: "Node") -> "Node":
        return sub(self, other)

    def __mul__(self, other: "Node") -> "Node":
        return mul(self, other)

    def __matmul__(self, other: "Node") -> "Node":
        return matmul(self, other)


def leaf(value) -> Node:
    """A leaf node: parameter or constant. Gradients accumulate into `.grad`."""
    return Node(value, op="leaf")


def constant(value) -> Node:
    return Node(value, op="const")


def zero_grads(nodes: Iterable[Node]) -> None:
    for n in nodes:
        n.grad = np.zeros_like(n.value)


def _binary_shapes(a: Node, b: Node, op: str) -> str:
    """Classify the allowed broadcast pattern; raises on anything else."""
    if a.shape == b.shape:
        return "same"
    if b.shape == (1, 1):
        return "scalar"
    if b.shape == (1, a.shape[1]):
        return "row"
    if b.shape == (a.shape[0], 1):
        return "col"
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(grad: np.ndarray, pattern: str) -> np.ndarray:
    if pattern == "same":
        return grad
    if pattern == "scalar":
        return grad.sum(keepdims=True)
    if pattern == "row":
        return grad.sum(axis=0, keepdims=True)
    return grad.sum(axis=1, keepdims=True)


def add(a: Node, b: Node) -> Node:
    pattern = _binary_shapes(a, b, "add")
    out = Node(a.value + b.value, op="add", parents=(a, b))

    def _backward(g):
        a.grad += g
        b.grad += _reduce_to(g, pattern)

    out._backward = _backward
    return out


def sub(a: Node, b: Node) -> Node:
    pattern = _binary_shapes(a, b, "sub")
    out = Node(a.value - b.value, op="sub", parents=(a, b))

    def _backward(g):
        a.grad += g
        b.grad -= _reduce_to(g, pattern)

    out._backward = _backward
    return out


def mul(a: Node, b: Node) -> Node:
    pattern = _binary_shapes(a, b, "mul")
    out = Node(a.value * b.value, op="mul", parents=(a, b))

    def _backward(g):
        a.grad += g * b.value
        b.grad += _reduce_to(g * a.value, pattern)

    out._backward = _backward
    return out


def scale(a: Node, c: float) -> Node:
    c = float(c)
    out = Node(a.value * c, op="scale", parents=(a,))

    def _backward(g):
        a.grad += g * c

    out._backward = _backward
    return out


def matmul(a: Node, b: Node) -> Node:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Node(a.value @ b.value, op="matmul", parents=(a, b))

    def _backward(g):
        a.grad += g @ b.value.T
        b.grad += a.value.T @ g

    out._backward = _backward
    return out


def transpose(a: Node) -> Node:
    out = Node(a.value.T, op="transpose", parents=(a,))

    def _backward(g):
        a.grad += g.T

    out._backward = _backward
    return out


def sigmoid(a: Node) -> Node:
    # Stable in both tails.
    v = a.value
    s = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))), np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
    out = Node(s, op="sigmoid", parents=(a,))

    def _backward(g):
        a.grad += g * s * (1.0 - s)

    out._backward = _backward
    return out


def tanh(a: Node) -> Node:
    t = np.tanh(a.value)
    out = Node(t, op="tanh", parents=(a,))

    def _backward(g):
        a.grad += g * (1.0 - t * t)

    out._backward = _backward
    return out


def exp(a: Node) -> Node:
    e = np.exp(a.value)
    out = Node(e, op="exp", parents=(a,))

    def _backward(g):
        a.grad += g * e

    out._backward = _backward
    return out


def log(a: Node) -> Node:
    if np.any(a.value <= 0):
        raise ValueError("log: non-positive input")
    out = Node(np.log(a.value), op="log", parents=(a,))

    def _backward(g):
        a.grad += g / a.value

    out._backward = _backward
    return out


def square(a: Node) -> Node:
    out = Node(a.value * a.value, op="square", parents=(a,))

    def _backward(g):
        a.grad += g * 2.0 * a.value

    out._backward = _backward
    return out


def sqrt(a: Node) -> Node:
    if np.any(a.value < 0):
        raise ValueError("sqrt: negative input")
    root = np.sqrt(a.value)
    out = Node(root, op="sqrt", parents=(a,))

    def _backward(g):
        # Derivative is unbounded at 0; callers keep strictly positive inputs.
        a.grad += g * 0.5 / root

    out._backward = _backward
    return out


def sum_(a: Node, axis: Optional[int] = None) -> Node:
    if axis not in (None, 0, 1):
        raise ValueError(f"sum: bad axis {axis}")
    if axis is None:
        val = a.value.sum().reshape(1, 1)
    else:
        val = a.value.sum(axis=axis, keepdims=True)
    out = Node(val, op="sum", parents=(a,))

    def _backward(g):
        a.grad += np.broadcast_to(g, a.shape)

    out._backward = _backward
    return out


def mean(a: Node, axis: Optional[int] = None) -> Node:
    if axis is None:
        denom = a.value.size
    elif axis == 0:
        denom = a.shape[0]
    elif axis == 1:
        denom = a.shape[1]
    else:
        raise ValueError(f"mean: bad axis {axis}")
    return scale(sum_(a, axis=axis), 1.0 / denom)


def var_rows(a: Node, ddof: int = 0) -> Node:
    """Per-column variance across rows -> (1, k).

    ddof=0 is the population convention, ddof=1 the unbiased sample one.
    The mean's contribution to the derivative cancels, leaving
    d var_j / d a_ij = 2 (a_ij - mean_j) / (n - ddof).
    """
    n = a.shape[0]
    if n - ddof <= 0:
        raise ShapeError(f"var_rows: need more than {ddof} rows, got {n}")
    centered = a.value - a.value.mean(axis=0, keepdims=True)
    val = (centered * centered).sum(axis=0, keepdims=True) / (n - ddof)
    out = Node(val, op="var_rows", parents=(a,))

    def _backward(g):
        a.grad += g * 2.0 * centered / (n - ddof)

    out._backward = _backward
    return out


def concat_rows(nodes: Sequence[Node]) -> Node:
    if not nodes:
        raise ShapeError("concat_rows: empty input")
    k = nodes[0].shape[1]
    for n in nodes:
        if n.shape[1] != k:
            raise ShapeError(f"concat_rows: column mismatch {n.shape} vs (*, {k})")
    out = Node(np.concatenate([n.value for n in nodes], axis=0), op="concat_rows", parents=tuple(nodes))

    def _backward(g):
        offset = 0
        for n in nodes:
            rows = n.shape[0]
            n.grad += g[offset : offset + rows, :]
            offset += rows

    out._backward = _backward
    return out


def concat_cols(nodes: Sequence[Node]) -> Node:
    if not nodes:
        raise ShapeError("concat_cols: empty input")
    r = nodes[0].shape[0]
    for n in nodes:
        if n.shape[0] != r:
            raise ShapeError(f"concat_cols: row mismatch {n.shape} vs ({r}, *)")
    out = Node(np.concatenate([n.value for n in nodes], axis=1), op="concat_cols", parents=tuple(nodes))

    def _backward(g):
        offset = 0
        for n in nodes:
            cols = n.shape[1]
            n.grad += g[:, offset : offset + cols]
            offset += cols

    out._backward = _backward
    return out


def slice_block(a: Node, rows: slice, cols: slice) -> Node:
    out_val = a.value[rows, cols]
    if out_val.size == 0:
        raise ShapeError(f"slice: empty result from {a.shape} [{rows}, {cols}]")
    out = Node(out_val, op="slice", parents=(a,))

    def _backward(g):
        a.grad[rows, cols] += g

    out._backward = _backward
    return out


def gather_rows(a: Node, indices) -> Node:
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1 or idx.size == 0:
        raise ShapeError("gather_rows: need a non-empty 1-d index array")
    out = Node(a.value[idx, :], op="gather_rows", parents=(a,))

    def _backward(g):
        np.add.at(a.grad, idx, g)

    out._backward = _backward
    return out


def bce_with_logits(logits: Node, targets: np.ndarray) -> Node:
    """Elementwise binary cross-entropy from logits, numerically stable.

    `targets` is a plain array of 0/1 (same shape); it is data, not a node.
    """
    y = _check2d(targets, "bce_with_logits")
    if y.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: targets {y.shape} vs logits {logits.shape}")
    s = logits.value
    val = np.maximum(s, 0.0) - s * y + np.log1p(np.exp(-np.abs(s)))
    out = Node(val, op="bce", parents=(logits,))
    p = np.where(s >= 0, 1.0 / (1.0 + np.exp(-np.abs(s))), np.exp(-np.abs(s)) / (1.0 + np.exp(-np.abs(s))))

    def _backward(g):
        logits.grad += g * (p - y)

    out._backward = _backward
    return out


def frob_sq(a: Node) -> Node:
    """Squared Frobenius norm as a scalar node."""
    return sum_(square(a))


def euclid_norm(a: Node) -> Node:
    """Euclidean (Frobenius) norm; gradient undefined at exactly zero."""
    return sqrt(frob_sq(a))


def topo_order(loss: Node) -> list[Node]:
    """Topologically ordered reachable subgraph; parents precede children.

    Iterative DFS: recurrent models chain thousands of nodes, far past the
    interpreter's recursion limit.
    """
    topo: list[Node] = []
    visited: set[int] = set()
    stack: list[tuple[Node, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return topo


def backward(loss: Node) -> list[Node]:
    """Reverse-mode sweep from a scalar loss; returns the tape that was walked.

    Gradients accumulate (`+=`) so shared subexpressions and repeated
    parameter use come out right. Callers zero parameter grads beforehand
    (`zero_grads`); intermediate nodes start from lazily-created zeros.
    """
    if loss.shape != (1, 1):
        raise ShapeError(f"backward: loss must be scalar (1,1), got {loss.shape}")
    tape = topo_order(loss)
    loss.grad = np.ones((1, 1))
    for node in reversed(tape):
        if node._backward is not None:
            node._backward(node.grad)
    return tape
