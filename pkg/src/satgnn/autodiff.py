"""Tape-based reverse-mode autodiff over numpy arrays.

Dense tensors carry node features and parameters; graph structure stays
sparse and enters only through the per-edge segment operations at the
bottom of this module. Everything is float64.

A `Tensor` produced by an op keeps references to its parents and a
closure mapping the output gradient to one gradient per parent. Calling
`backward()` on a scalar walks the graph once in reverse topological
order. Leaf tensors created with ``requires_grad=True`` accumulate into
``.grad`` across calls until `zero_grad` is used.
"""

from __future__ import annotations

import os
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

_DEBUG = bool(int(os.environ.get("SATGNN_DEBUG", "0")))


def set_debug(enabled: bool) -> None:
    """Turn per-op NaN/Inf checks on or off."""
    global _DEBUG
    _DEBUG = bool(enabled)


class ShapeError(ValueError):
    pass


_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Build no tape inside the block; ops return plain constant tensors."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "name")
    __array_ufunc__ = None  # ndarray <op> Tensor defers to the reflected Tensor method

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        *,
        name: Optional[str] = None,
        op: str = "leaf",
        parents: Sequence["Tensor"] = (),
        backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = tuple(parents)
        self._backward = backward
        self.name = name

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, op={self.op})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite output from op {op!r}")
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, op=op, parents=parents, backward=backward_fn)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``."""
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------- dense ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _make(out, (a, b), bw, "div")


def matmul(a, b) -> Tensor:
    """Matrix product of two 2-D tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def spmm(matrix, x) -> Tensor:
    """Constant scipy sparse matrix times a dense tensor."""
    x = as_tensor(x)
    if matrix.shape[1] != x.shape[0]:
        raise ShapeError(f"spmm shape mismatch: {matrix.shape} x {x.shape}")
    return _make(np.asarray(matrix @ x.data), (x,), lambda g: (np.asarray(matrix.T @ g),), "spmm")


def linear(x, weight) -> Tensor:
    """``x @ weight`` where ``x`` may be a constant scipy sparse matrix."""
    if sp.issparse(x):
        return spmm(x, weight)
    return matmul(x, weight)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.T, (a,), lambda g: (g.T,), "transpose")


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def elu(a, alpha: float = 1.0) -> Tensor:
    a = as_tensor(a)
    neg = a.data <= 0
    ex = np.expm1(np.minimum(a.data, 0.0))
    out = np.where(neg, alpha * ex, a.data)
    return _make(out, (a,), lambda g: (np.where(neg, g * alpha * (ex + 1.0), g),), "elu")


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope)
    return _make(a.data * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = np.exp(a.data - a.data.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


def take_rows(a, index) -> Tensor:
    """``a[index]`` along the first axis; backward scatters with add."""
    a = as_tensor(a)
    index = np.asarray(index)

    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(a.data[index], (a,), bw, "take_rows")


def take_cols(a, k) -> Tensor:
    """``a[..., k]`` for an int or slice ``k`` on the last axis."""
    a = as_tensor(a)

    def bw(g):
        out = np.zeros_like(a.data)
        out[..., k] = g
        return (out,)

    return _make(a.data[..., k], (a,), bw, "take_cols")


def dropout(a, p: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout; identity outside training or when p == 0.

    A scipy sparse input stays sparse: only stored entries are masked,
    which is equivalent because dropping a zero leaves it zero.
    """
    if not training or p <= 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    if sp.issparse(a):
        out = a.tocsr(copy=True)
        out.data = out.data * ((rng.random(out.data.shape) >= p) / (1.0 - p))
        return out
    a = as_tensor(a)
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return mul(a, keep)


def cross_entropy(logits, labels, index) -> Tensor:
    """Mean softmax cross-entropy of ``logits[index]`` against ``labels[index]``."""
    logits = as_tensor(logits)
    index = np.asarray(index)
    y = np.asarray(labels)[index]
    z = logits.data[index]
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    n = len(index)
    loss = float(np.mean(lse - z[np.arange(n), y]))

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), y] -= 1.0
        out = np.zeros_like(logits.data)
        out[index] = p * (g / n)
        return (out,)

    return _make(np.asarray(loss), (logits,), bw, "cross_entropy")


# ----------------------------------------------------------- edge (CSR) ops
#
# ``graph`` supplies ``indptr`` (row offsets), ``row`` (destination node of
# each directed edge), ``indices`` (source node of each edge) and
# ``reverse`` (edge id of the opposite direction). Edges are sorted by
# destination and every segment is non-empty because each node has a
# self-loop, so ``np.maximum.reduceat`` over ``indptr[:-1]`` gives segment
# maxima. Segment sums go through the graph's cached N x E incidence
# matrices (``dst_incidence``, ``src_incidence``).


def _incidence_sum(incidence, values: np.ndarray) -> np.ndarray:
    # a sparse N x E product beats reduceat by a wide margin on 3-D edge arrays
    flat = values.reshape(values.shape[0], -1)
    return np.asarray(incidence @ flat).reshape((incidence.shape[0],) + values.shape[1:])


def segment_reduce_sum(values: np.ndarray, graph) -> np.ndarray:
    """Sum edge rows into their destination node."""
    return _incidence_sum(graph.dst_incidence, values)


def _scatter_src(values: np.ndarray, graph) -> np.ndarray:
    return _incidence_sum(graph.src_incidence, values)


def _check_edge_len(t: Tensor, graph, what: str) -> None:
    if t.shape[0] != graph.num_edges:
        raise ShapeError(f"{what}: expected {graph.num_edges} edges, got {t.shape[0]}")


def gather_dst(a, graph) -> Tensor:
    """Per-edge copy of the destination (central) node's row."""
    a = as_tensor(a)
    return _make(a.data[graph.row], (a,), lambda g: (segment_reduce_sum(g, graph),), "gather_dst")


def gather_src(a, graph) -> Tensor:
    """Per-edge copy of the source (neighbor) node's row."""
    a = as_tensor(a)
    return _make(a.data[graph.indices], (a,), lambda g: (_scatter_src(g, graph),), "gather_src")


def segment_sum(values, graph) -> Tensor:
    """Sum edge values into their destination node."""
    values = as_tensor(values)
    _check_edge_len(values, graph, "segment_sum")
    return _make(
        segment_reduce_sum(values.data, graph),
        (values,),
        lambda g: (g[graph.row],),
        "segment_sum",
    )


def edge_segment_softmax(logits, graph) -> Tensor:
    """Softmax of edge logits within each destination node's neighborhood.

    Trailing axes (e.g. heads) are independent.
    """
    logits = as_tensor(logits)
    _check_edge_len(logits, graph, "edge_segment_softmax")
    starts = graph.indptr[:-1]
    x = logits.data
    seg_max = np.maximum.reduceat(x, starts, axis=0)
    z = np.exp(x - seg_max[graph.row])
    out = z / segment_reduce_sum(z, graph)[graph.row]

    def bw(g):
        dot = segment_reduce_sum(g * out, graph)
        return (out * (g - dot[graph.row]),)

    return _make(out, (logits,), bw, "edge_segment_softmax")


def edge_weighted_aggregate(weights, src_feats, graph) -> Tensor:
    """``out[i] = sum_{j in N_i} weights[ij] * src_feats[j]``.

    ``weights`` has shape (E,) or (E, K); ``src_feats`` has shape (N, F)
    or (N, K, F) correspondingly.
    """
    weights, src_feats = as_tensor(weights), as_tensor(src_feats)
    _check_edge_len(weights, graph, "edge_weighted_aggregate")
    if src_feats.shape[0] != graph.num_nodes or src_feats.ndim != weights.ndim + 1:
        raise ShapeError(
            f"edge_weighted_aggregate: weights {weights.shape} vs features {src_feats.shape}"
        )
    w = weights.data[..., None]
    xs = src_feats.data[graph.indices]
    out = segment_reduce_sum(w * xs, graph)

    def bw(g):
        gd = g[graph.row]
        return (gd * xs).sum(axis=-1), _scatter_src(w * gd, graph)

    return _make(out, (weights, src_feats), bw, "edge_weighted_aggregate")


# --------------------------------------------------------------- checking


def numerical_gradient(fn: Callable[[], Tensor], param: Tensor, step: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` with respect to ``param.data``."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        up = fn().item()
        flat[k] = orig - step
        down = fn().item()
        flat[k] = orig
        gflat[k] = (up - down) / (2.0 * step)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    return float(np.max(2.0 * np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def gradcheck(
    fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5, floor: float = 1e-6
) -> float:
    """Worst relative error between backprop and central differences over ``params``.

    The error of each entry is |a - n| / max(|a| + |n|, floor) * 2, so
    entries whose true gradient is ~0 are judged on absolute error.
    """
    zero_grad(params)
    fn().backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        numeric = numerical_gradient(fn, p, step)
        worst = max(worst, max_relative_error(analytic, numeric, floor))
    zero_grad(params)
    return worst
