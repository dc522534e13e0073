"""Reverse-mode automatic differentiation over numpy arrays.

Small tape-based engine: every op returns a Tensor remembering its parents
and a closure that pushes the output gradient back to them.  Computation is
float64 throughout.  Only the ops the completion networks need exist; no
general broadcasting rules beyond what those ops use.

The chamfer op differentiates through nearest-neighbor distances by holding
the assignment fixed at forward time, which is the correct one-sided
derivative everywhere except on assignment-switch boundaries (a measure-zero
set the training loop crosses between steps, not within one).
"""

from __future__ import annotations

import numpy as np

from .errors import NonScalarLoss
from .geometry import PointCloud
from .spatial import SpatialIndex, nearest_batch


class Tensor:
    """Node in the computation graph: value, accumulated gradient, tape links."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g


def _node(data, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # Reduce a broadcasted gradient back to the original operand shape.
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    def backward(out):
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad, b.data.shape))

    return _node(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def backward(out):
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-out.grad, b.data.shape))

    return _node(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def backward(out):
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad * a.data, b.data.shape))

    return _node(a.data * b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    def backward(out):
        if a.requires_grad:
            a._accumulate(out.grad * c)

    return _node(a.data * c, (a,), backward)


def shift(a: Tensor, c: float) -> Tensor:
    def backward(out):
        if a.requires_grad:
            a._accumulate(out.grad)

    return _node(a.data + c, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    def backward(out):
        if a.requires_grad:
            a._accumulate(out.grad @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ out.grad)

    return _node(a.data @ b.data, (a, b), backward)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    # Subgradient 1 at exactly zero, so zero-initialized layers still learn.
    mask = a.data >= 0.0

    def backward(out):
        if a.requires_grad:
            a._accumulate(out.grad * mask)

    return _node(np.where(mask, a.data, 0.0), (a,), backward)


def tanh(a: Tensor) -> Tensor:
    value = np.tanh(a.data)

    def backward(out):
        if a.requires_grad:
            a._accumulate(out.grad * (1.0 - value * value))

    return _node(value, (a,), backward)


# ---------------------------------------------------------------------------
# shape and routing
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape

    def backward(out):
        if a.requires_grad:
            a._accumulate(out.grad.reshape(old))

    return _node(a.data.reshape(shape), (a,), backward)


def concat_cols(parts: list[Tensor]) -> Tensor:
    widths = [p.data.shape[1] for p in parts]
    edges = np.cumsum([0] + widths)

    def backward(out):
        for p, lo, hi in zip(parts, edges[:-1], edges[1:]):
            if p.requires_grad:
                p._accumulate(out.grad[:, lo:hi])

    return _node(np.concatenate([p.data for p in parts], axis=1), tuple(parts), backward)


def concat_rows(parts: list[Tensor]) -> Tensor:
    heights = [p.data.shape[0] for p in parts]
    edges = np.cumsum([0] + heights)

    def backward(out):
        for p, lo, hi in zip(parts, edges[:-1], edges[1:]):
            if p.requires_grad:
                p._accumulate(out.grad[lo:hi])

    return _node(np.concatenate([p.data for p in parts], axis=0), tuple(parts), backward)


def max_rows(a: Tensor) -> Tensor:
    # Coordinate-wise max over rows; gradient routes to the first argmax row,
    # matching numpy's tie rule.
    winners = np.argmax(a.data, axis=0)

    def backward(out):
        if a.requires_grad:
            g = np.zeros_like(a.data)
            g[winners, np.arange(a.data.shape[1])] = out.grad
            a._accumulate(g)

    return _node(a.data.max(axis=0), (a,), backward)


def broadcast_row(v: Tensor, n: int) -> Tensor:
    def backward(out):
        if v.requires_grad:
            v._accumulate(out.grad.sum(axis=0))

    return _node(np.tile(v.data, (n, 1)), (v,), backward)


def repeat_rows(a: Tensor, k: int) -> Tensor:
    n, m = a.data.shape

    def backward(out):
        if a.requires_grad:
            a._accumulate(out.grad.reshape(n, k, m).sum(axis=1))

    return _node(np.repeat(a.data, k, axis=0), (a,), backward)


def gather_rows(a: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)

    def backward(out):
        if a.requires_grad:
            g = np.zeros_like(a.data)
            np.add.at(g, ids, out.grad)
            a._accumulate(g)

    return _node(a.data[ids], (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    def backward(out):
        if a.requires_grad:
            a._accumulate(np.full_like(a.data, float(out.grad)))

    return _node(a.data.sum(), (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    inv = 1.0 / a.data.size

    def backward(out):
        if a.requires_grad:
            a._accumulate(np.full_like(a.data, float(out.grad) * inv))

    return _node(a.data.mean(), (a,), backward)


# ---------------------------------------------------------------------------
# chamfer loss
# ---------------------------------------------------------------------------


def chamfer_to_const(x: Tensor, target: np.ndarray, *, mode: str = "mean") -> Tensor:
    """Chamfer between a differentiable cloud (n, 3) and a fixed target (m, 3).

    Nearest-neighbor assignments are computed once on the forward values and
    treated as constants by the backward pass.
    """
    if mode not in ("mean", "sum"):
        raise ValueError(f"unknown mode {mode!r}")
    pts = x.data
    tgt = np.asarray(target, dtype=np.float64)
    ids_xt, sq_xt = nearest_batch(SpatialIndex(PointCloud(tgt)), pts)
    ids_tx, sq_tx = nearest_batch(SpatialIndex(PointCloud(pts)), tgt)
    n, m = pts.shape[0], tgt.shape[0]
    wx = 1.0 / n if mode == "mean" else 1.0
    wt = 1.0 / m if mode == "mean" else 1.0
    value = wx * sq_xt.sum() + wt * sq_tx.sum()

    def backward(out):
        if not x.requires_grad:
            return
        g = float(out.grad)
        dx = (2.0 * wx) * (pts - tgt[ids_xt])
        np.add.at(dx, ids_tx, (2.0 * wt) * (pts[ids_tx] - tgt))
        x._accumulate(g * dx)

    return _node(value, (x,), backward)


# ---------------------------------------------------------------------------
# backward driver
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate .grad on every reachable requires_grad Tensor from a scalar loss."""
    if loss.data.shape != ():
        raise NonScalarLoss(f"loss must be a scalar, got shape {loss.data.shape}")
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
    loss.grad = np.ones(())
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node)
