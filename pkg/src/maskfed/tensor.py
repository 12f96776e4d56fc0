"""Dense tensors with reverse-mode autodiff and MAC accounting.

A Tensor wraps a row-major numpy buffer (float32 for training, float64 for
the gradient-check suite). Operations executed inside a ``with Graph()``
block are recorded on that graph's tape; ``backward(loss, graph)`` then
fills ``.grad`` on every requires_grad leaf. Each graph also accumulates a
multiply-accumulate counter: matrix products add m*k*q per pair on the
forward pass and the matching transpose-product counts when their backward
runs. Non-matmul ops count zero MACs.

Shape-trace mode: a tensor built with ``Tensor.shape_only`` carries no data
buffer. Ops on traced tensors validate shapes and count MACs without
touching memory, which is how ViT-B-scale configurations are costed
instantly (see cost.measured_macs).

Broadcasting is deliberately narrow: binary ops accept equal shapes or one
operand whose shape equals the trailing suffix of the other (leading batch
dims broadcast); matmul accepts equal leading dims or one unbatched 2-D
operand. Everything else needs an explicit reshape.
"""

from __future__ import annotations

import threading
from math import prod

import numpy as np

from . import _kernels
from .errors import (
    DimensionError,
    GraphConsumedError,
    LabelError,
    NumericsError,
)

_TLS = threading.local()


def _graph_stack():
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = _TLS.stack = []
    return stack


def active_graph():
    stack = _graph_stack()
    return stack[-1] if stack else None


class _Node:
    __slots__ = ("out", "inputs", "backward", "backward_macs")

    def __init__(self, out, inputs, backward, backward_macs=0):
        self.out = out
        self.inputs = inputs
        self.backward = backward
        self.backward_macs = backward_macs


class Graph:
    """Tape of executed operations, confined to one execution lane.

    mac_counter grows monotonically while ops run under the graph and,
    once backward() executes, by each node's backward MAC count.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.mac_counter = 0
        self._consumed = False

    def __enter__(self):
        _graph_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _graph_stack().pop()
        assert popped is self, "graphs must unwind in LIFO order"
        return False

    def pending_backward_macs(self) -> int:
        """MACs the backward pass will add (all recorded nodes)."""
        return sum(n.backward_macs for n in self.nodes)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if not np.isfinite(arr).all():
            raise NumericsError("tensor initialized with non-finite values")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @classmethod
    def shape_only(cls, shape, dtype=np.float32, requires_grad=False):
        """Build a traced tensor: shape and dtype only, no buffer."""
        t = cls.__new__(cls)
        t.data = _TracedArray(tuple(int(s) for s in shape), np.dtype(dtype))
        t.grad = None
        t.requires_grad = bool(requires_grad)
        return t

    @property
    def shape(self):
        return tuple(self.data.shape)

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return len(self.data.shape)

    @property
    def size(self):
        return prod(self.data.shape) if self.data.shape else 1

    @property
    def is_traced(self):
        return isinstance(self.data, _TracedArray)

    def detach_array(self) -> np.ndarray:
        """Copy of the buffer with no graph or grad attached."""
        return np.array(self.data, copy=True)

    def item(self) -> float:
        if self.size != 1:
            raise DimensionError(f"item() needs a scalar, shape is {self.shape}")
        return float(np.asarray(self.data).reshape(()))

    def __repr__(self):
        tag = "traced " if self.is_traced else ""
        return f"Tensor({tag}shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other, self), -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _TracedArray:
    """Stand-in for a numpy buffer in shape-trace mode."""

    __slots__ = ("shape", "dtype")

    def __init__(self, shape, dtype):
        self.shape = shape
        self.dtype = dtype


def _check_finite(arr, op_name):
    if not np.isfinite(arr).all():
        raise NumericsError(f"{op_name} produced non-finite values")


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _same_dtype(a: Tensor, b: Tensor, op_name):
    if a.dtype != b.dtype:
        raise DimensionError(f"{op_name}: dtype mismatch {a.dtype} vs {b.dtype}")


def _record(out: Tensor, inputs, backward, backward_macs=0):
    g = active_graph()
    if g is not None and out.requires_grad:
        g.nodes.append(_Node(out, inputs, backward, backward_macs))
    return out


def _count_macs(n: int):
    g = active_graph()
    if g is not None and n:
        g.mac_counter += int(n)


def _out(a_traced, value, dtype, requires_grad, op_name, check=True):
    if a_traced:
        return Tensor.shape_only(value, dtype, requires_grad)  # value is a shape
    if check:
        _check_finite(value, op_name)
    t = Tensor.__new__(Tensor)
    t.data = value
    t.grad = None
    t.requires_grad = requires_grad
    return t


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros(t.shape, dtype=t.dtype)
    t.grad += g


def backward(loss: Tensor, graph: Graph):
    """Populate dLoss/dLeaf on every requires_grad leaf of the graph.

    Leaves that entered the graph but do not influence the loss get zero
    gradients; frozen tensors keep grad=None. A graph can be walked once.
    """
    if graph._consumed:
        raise GraphConsumedError("backward() already ran on this graph")
    graph._consumed = True
    if loss.shape not in ((), (1,)):
        raise DimensionError(f"loss must be scalar, shape is {loss.shape}")
    if loss.is_traced:
        raise DimensionError("cannot backward a shape-traced tensor")

    produced = {id(n.out) for n in graph.nodes}
    for node in graph.nodes:
        for t in node.inputs:
            if t.requires_grad and id(t) not in produced:
                t.grad = np.zeros(t.shape, dtype=t.dtype)

    loss.grad = np.ones(loss.shape, dtype=loss.dtype)
    for node in reversed(graph.nodes):
        if node.out.grad is None:
            continue
        graph.mac_counter += node.backward_macs
        node.backward(node.out.grad)


# ---------------------------------------------------------------------------
# elementwise / broadcast ops


def _suffix_broadcast(a: Tensor, b: Tensor, op_name):
    """Validate the leading-batch-only broadcast rule; return out shape."""
    if a.shape == b.shape:
        return a.shape
    if len(a.shape) > len(b.shape) and a.shape[len(a.shape) - len(b.shape):] == b.shape:
        return a.shape
    if len(b.shape) > len(a.shape) and b.shape[len(b.shape) - len(a.shape):] == a.shape:
        return b.shape
    raise DimensionError(
        f"{op_name}: shapes {a.shape} and {b.shape} differ beyond leading batch dims"
    )


def _reduce_to(shape, grad):
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad


def _coerce_pair(a, b):
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    if isinstance(b, Tensor):
        return _as_tensor(a, b), b
    raise DimensionError("binary op needs at least one Tensor operand")


def add(a, b):
    a, b = _coerce_pair(a, b)
    _same_dtype(a, b, "add")
    out_shape = _suffix_broadcast(a, b, "add")
    rg = a.requires_grad or b.requires_grad
    traced = a.is_traced or b.is_traced
    out = _out(traced, out_shape if traced else a.data + b.data, a.dtype, rg, "add")

    def bwd(dout):
        _accum(a, _reduce_to(a.shape, dout))
        _accum(b, _reduce_to(b.shape, dout))

    return _record(out, (a, b), bwd)


def mul(a, b):
    a, b = _coerce_pair(a, b)
    _same_dtype(a, b, "mul")
    out_shape = _suffix_broadcast(a, b, "mul")
    rg = a.requires_grad or b.requires_grad
    traced = a.is_traced or b.is_traced
    out = _out(traced, out_shape if traced else a.data * b.data, a.dtype, rg, "mul")

    def bwd(dout):
        if a.requires_grad:
            _accum(a, _reduce_to(a.shape, dout * b.data))
        if b.requires_grad:
            _accum(b, _reduce_to(b.shape, dout * a.data))

    return _record(out, (a, b), bwd)


# ---------------------------------------------------------------------------
# matmul


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with identical-leading-dim batching.

    Counts prod(batch)*m*k*q MACs forward; each needed input gradient
    costs the same again on backward.
    """
    _same_dtype(a, b, "matmul")
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-D")
    m, ka = a.shape[-2], a.shape[-1]
    kb, q = b.shape[-2], b.shape[-1]
    if ka != kb:
        raise DimensionError(f"matmul: inner dims {ka} and {kb} disagree")
    la, lb = a.shape[:-2], b.shape[:-2]
    if la and lb and la != lb:
        raise DimensionError(f"matmul: batch dims {la} and {lb} disagree")
    lead = la or lb
    batch = prod(lead) if lead else 1
    fwd_macs = batch * m * ka * q
    _count_macs(fwd_macs)

    rg = a.requires_grad or b.requires_grad
    traced = a.is_traced or b.is_traced
    out = _out(traced, lead + (m, q) if traced else a.data @ b.data, a.dtype, rg, "matmul")

    bwd_macs = (fwd_macs if a.requires_grad else 0) + (fwd_macs if b.requires_grad else 0)

    def bwd(dout):
        if a.requires_grad:
            da = dout @ np.swapaxes(b.data, -1, -2)
            _accum(a, _reduce_to(a.shape, da))
        if b.requires_grad:
            if not lb and la:
                # unbatched weight: one flat GEMM instead of batched+sum
                db = a.data.reshape(-1, ka).T @ dout.reshape(-1, q)
            else:
                db = np.swapaxes(a.data, -1, -2) @ dout
            _accum(b, db)

    return _record(out, (a, b), bwd, bwd_macs)


# ---------------------------------------------------------------------------
# fused kernels (softmax / layer norm / gelu)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-stabilized softmax over the last axis."""
    if x.ndim < 1:
        raise DimensionError("softmax_rows needs at least one axis")
    q = x.shape[-1]
    traced = x.is_traced
    if traced:
        out = Tensor.shape_only(x.shape, x.dtype, x.requires_grad)
        y2 = None
    else:
        y2 = _kernels.impl().softmax_fwd(np.ascontiguousarray(x.data.reshape(-1, q)))
        out = _out(False, y2.reshape(x.shape), x.dtype, x.requires_grad, "softmax_rows")

    def bwd(dout):
        dx = _kernels.impl().softmax_bwd(y2, np.ascontiguousarray(dout.reshape(-1, q)))
        _accum(x, dx.reshape(x.shape))

    return _record(out, (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Standardize the last axis per row, then scale and shift.

    Zero-variance rows map to zero pre-affine (eps keeps the division
    finite).
    """
    _same_dtype(x, gain, "layer_norm")
    _same_dtype(x, bias, "layer_norm")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm: gain/bias must be ({d},), got {gain.shape} and {bias.shape}"
        )
    traced = x.is_traced
    rg = x.requires_grad or gain.requires_grad or bias.requires_grad
    if traced:
        out = Tensor.shape_only(x.shape, x.dtype, rg)
        x2 = mu = rstd = None
    else:
        x2 = np.ascontiguousarray(x.data.reshape(-1, d))
        y2, mu, rstd = _kernels.impl().layernorm_fwd(x2, gain.data, bias.data, x.dtype.type(eps))
        out = _out(False, y2.reshape(x.shape), x.dtype, rg, "layer_norm")

    def bwd(dout):
        dx, dg, db = _kernels.impl().layernorm_bwd(
            x2, gain.data, mu, rstd, np.ascontiguousarray(dout.reshape(-1, d))
        )
        _accum(x, dx.reshape(x.shape))
        _accum(gain, dg)
        _accum(bias, db)

    return _record(out, (x, gain, bias), bwd)


def gelu(x: Tensor) -> Tensor:
    traced = x.is_traced
    if traced:
        out = Tensor.shape_only(x.shape, x.dtype, x.requires_grad)
    else:
        out = _out(False, _kernels.impl().gelu_fwd(x.data), x.dtype, x.requires_grad, "gelu")

    def bwd(dout):
        _accum(x, _kernels.impl().gelu_bwd(x.data, dout))

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# loss


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax probability of the true class."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects [batch, classes], got {logits.shape}")
    b, c = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (b,):
        raise DimensionError(f"labels must have shape ({b},), got {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise LabelError("labels must be integers")
    if labels.min(initial=0) < 0 or labels.max(initial=-1) >= c:
        raise LabelError(f"labels must lie in [0, {c})")

    traced = logits.is_traced
    if traced:
        out = Tensor.shape_only((), logits.dtype, logits.requires_grad)
        probs = None
    else:
        z = logits.data - logits.data.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
        logp = z - lse
        loss = -logp[np.arange(b), labels].mean(dtype=logits.dtype)
        probs = np.exp(logp)
        out = _out(False, np.asarray(loss, dtype=logits.dtype), logits.dtype,
                   logits.requires_grad, "cross_entropy")

    def bwd(dout):
        dlogits = probs.copy()
        dlogits[np.arange(b), labels] -= 1.0
        dlogits *= dout / b
        _accum(logits, dlogits)

    return _record(out, (logits,), bwd)


# ---------------------------------------------------------------------------
# movement ops (zero MACs; data-preserving, so no finiteness re-check)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if prod(shape) != x.size:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}")
    traced = x.is_traced
    out = _out(traced, shape if traced else x.data.reshape(shape), x.dtype,
               x.requires_grad, "reshape", check=False)

    def bwd(dout):
        _accum(x, dout.reshape(x.shape))

    return _record(out, (x,), bwd)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose axes {axes} invalid for rank {x.ndim}")
    traced = x.is_traced
    out_shape = tuple(x.shape[a] for a in axes)
    out = _out(traced, out_shape if traced else np.ascontiguousarray(np.transpose(x.data, axes)),
               x.dtype, x.requires_grad, "transpose", check=False)
    inv = np.argsort(axes)

    def bwd(dout):
        _accum(x, np.transpose(dout, inv))

    return _record(out, (x,), bwd)


def concat(tensors, axis: int) -> Tensor:
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    first = tensors[0]
    for t in tensors[1:]:
        _same_dtype(first, t, "concat")
        if t.ndim != first.ndim:
            raise DimensionError("concat: rank mismatch")
        for ax in range(first.ndim):
            if ax != axis and t.shape[ax] != first.shape[ax]:
                raise DimensionError(
                    f"concat: shapes {first.shape} and {t.shape} differ off axis {axis}"
                )
    rg = any(t.requires_grad for t in tensors)
    traced = any(t.is_traced for t in tensors)
    out_shape = list(first.shape)
    out_shape[axis] = sum(t.shape[axis] for t in tensors)
    out = _out(traced, tuple(out_shape) if traced else
               np.concatenate([t.data for t in tensors], axis=axis),
               first.dtype, rg, "concat", check=False)
    sizes = [t.shape[axis] for t in tensors]

    def bwd(dout):
        start = 0
        for t, s in zip(tensors, sizes):
            sl = [slice(None)] * dout.ndim
            sl[axis] = slice(start, start + s)
            _accum(t, dout[tuple(sl)])
            start += s

    return _record(out, tuple(tensors), bwd)


def gather_rows(table: Tensor, indices) -> Tensor:
    """Select rows of a [rows, d] table by an integer index array.

    Output shape is indices.shape + (d,); backward scatter-adds into the
    table gradient.
    """
    if table.ndim != 2:
        raise DimensionError(f"gather_rows table must be 2-D, got {table.shape}")
    indices = np.asarray(indices)
    if not np.issubdtype(indices.dtype, np.integer):
        raise DimensionError("gather_rows indices must be integers")
    rows, d = table.shape
    if indices.size and (indices.min() < 0 or indices.max() >= rows):
        raise DimensionError(f"gather_rows: index out of range [0, {rows})")
    traced = table.is_traced
    out_shape = tuple(indices.shape) + (d,)
    out = _out(traced, out_shape if traced else table.data[indices],
               table.dtype, table.requires_grad, "gather_rows", check=False)

    def bwd(dout):
        if not table.requires_grad:
            return
        if table.grad is None:
            table.grad = np.zeros(table.shape, dtype=table.dtype)
        np.add.at(table.grad, indices.ravel(), dout.reshape(-1, d))

    return _record(out, (table,), bwd)


def take_token(x: Tensor, index: int) -> Tensor:
    """Extract token `index` from a [b, s, d] sequence -> [b, d]."""
    if x.ndim != 3:
        raise DimensionError(f"take_token expects [b, s, d], got {x.shape}")
    b, s, d = x.shape
    if not 0 <= index < s:
        raise DimensionError(f"token index {index} out of range [0, {s})")
    traced = x.is_traced
    out = _out(traced, (b, d) if traced else np.ascontiguousarray(x.data[:, index, :]),
               x.dtype, x.requires_grad, "take_token", check=False)

    def bwd(dout):
        dx = np.zeros(x.shape, dtype=x.dtype)
        dx[:, index, :] = dout
        _accum(x, dx)

    return _record(out, (x,), bwd)


def tile_batch(x: Tensor, b: int) -> Tensor:
    """Repeat x along a new leading batch axis: shape -> (b,) + x.shape."""
    if b < 1:
        raise DimensionError("tile_batch needs b >= 1")
    traced = x.is_traced
    out_shape = (b,) + x.shape
    out = _out(traced, out_shape if traced else
               np.ascontiguousarray(np.broadcast_to(x.data, out_shape)),
               x.dtype, x.requires_grad, "tile_batch", check=False)

    def bwd(dout):
        _accum(x, dout.sum(axis=0))

    return _record(out, (x,), bwd)


def sum_all(x: Tensor) -> Tensor:
    traced = x.is_traced
    out = _out(traced, () if traced else np.asarray(x.data.sum(dtype=x.dtype)),
               x.dtype, x.requires_grad, "sum_all")

    def bwd(dout):
        _accum(x, np.broadcast_to(dout, x.shape))

    return _record(out, (x,), bwd)


def mean_all(x: Tensor) -> Tensor:
    return mul(sum_all(x), 1.0 / x.size)
