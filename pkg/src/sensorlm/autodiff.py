"""Reverse-mode automatic differentiation over dense real arrays.

Tensors wrap numpy arrays (float32 by default) and record a computation
graph of closures. Calling ``backward`` on a scalar zeroes every reachable
gradient, then accumulates d(loss)/d(leaf) into each ``requires_grad``
leaf. A graph can only be walked backward once.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

DEFAULT_DTYPE = np.float32

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class GraphError(RuntimeError):
    """Misuse of the computation graph (non-scalar backward, reuse, ...)."""


@contextmanager
def no_grad():
    """Disable graph recording inside the block (pure inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class GraphNode:
    """One recorded operation: tag, parent tensors, and a backward closure."""

    __slots__ = ("op_kind", "inputs", "backward_fn", "consumed")

    def __init__(self, op_kind, inputs, backward_fn):
        self.op_kind = op_kind
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.consumed = False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad=False, node=None):
        # float64 passes through only when handed an explicit float64 array
        # or numpy scalar (the finite-difference checker relies on this);
        # everything else is stored at the engine's 32-bit precision.
        if isinstance(data, (np.ndarray, np.generic)) and data.dtype == np.float64:
            arr = np.asarray(data)
        else:
            arr = np.asarray(data).astype(DEFAULT_DTYPE, copy=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if (requires_grad and node is None) else None
        self.node = node

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def is_leaf(self) -> bool:
        return self.node is None

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={list(self.shape)}, requires_grad={self.requires_grad})"

    # thin operator sugar over the functional ops
    def __add__(self, other):
        return add(self, _lift(other))

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DEFAULT_DTYPE))


def tensor_from(shape, values, requires_grad=False) -> Tensor:
    """Build a leaf tensor from an explicit shape and flat row-major values."""
    shape = tuple(int(s) for s in shape)
    vals = np.asarray(values, dtype=DEFAULT_DTYPE).reshape(-1)
    expected = int(np.prod(shape)) if shape else 1
    if vals.size != expected:
        raise ShapeError(f"shape {list(shape)} needs {expected} values, got {vals.size}")
    return Tensor(vals.reshape(shape), requires_grad=requires_grad)


def zeros(shape, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=DEFAULT_DTYPE), requires_grad=requires_grad)


def _make(data, op_kind, inputs, backward_fn):
    """Wrap an op result, recording the node only when a grad path exists."""
    req = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    if not req:
        return Tensor(data)
    out = Tensor(data, requires_grad=True, node=GraphNode(op_kind, inputs, backward_fn))
    return out


def _check_trailing_broadcast(a_shape, b_shape):
    """Allow equal shapes or one shape being a trailing suffix of the other."""
    if a_shape == b_shape:
        return
    small, big = (a_shape, b_shape) if len(a_shape) <= len(b_shape) else (b_shape, a_shape)
    if len(small) == len(big) or big[len(big) - len(small):] != small:
        raise ShapeError(f"shapes {list(a_shape)} and {list(b_shape)} are not trailing-broadcastable")


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to the original leaf shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    return grad


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_trailing_broadcast(a.shape, b.shape)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(out_data, "add", (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_trailing_broadcast(a.shape, b.shape)
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(-_unbroadcast(g, b.shape))

    return _make(out_data, "sub", (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_trailing_broadcast(a.shape, b.shape)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(out_data, "mul", (a, b), backward)


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    out_data = a.data * factor

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * factor)

    return _make(out_data, "scale", (a,), backward)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (a.data > 0))

    return _make(out_data, "relu", (a,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    # tanh approximation; derivative matches the same approximation
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * (x2 * x)))
    out_data = 0.5 * x * (1.0 + t)

    def backward(g):
        if a.requires_grad:
            d = 0.5 * (1.0 + t) + (0.5 * _GELU_C) * x * (1.0 - t * t) * (1.0 + 0.134145 * x2)
            a._accumulate(g * d)

    return _make(out_data, "gelu", (a,), backward)


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (1.0 - t ** 2))

    return _make(t, "tanh", (a,), backward)


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * e)

    return _make(e, "exp", (a,), backward)


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "relu": relu,
    "gelu": gelu,
    "tanh": tanh,
    "exp": exp,
    "scale": scale,
}


def elementwise(op_tag: str, a: Tensor, b=None) -> Tensor:
    """Dispatch an elementwise op by tag. Binary tags take a second tensor;
    ``scale`` takes a plain float."""
    if op_tag not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise op {op_tag!r}")
    fn = _ELEMENTWISE[op_tag]
    if op_tag in ("add", "sub", "mul"):
        if b is None:
            raise ValueError(f"{op_tag} is binary")
        return fn(a, _lift(b))
    if op_tag == "scale":
        if b is None:
            raise ValueError("scale needs a factor")
        return fn(a, float(b))
    return fn(a)


# ---------------------------------------------------------------------------
# linear algebra and structure ops


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused x @ w + b for x [t, d_in], w [d_in, d_out], b [d_out]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise ShapeError("affine expects x[t,d_in], w[d_in,d_out], b[d_out]")
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ShapeError(f"affine shapes differ: {list(x.shape)} @ {list(w.shape)} + {list(b.shape)}")
    out_data = x.data @ w.data + b.data

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ w.data.T)
        if w.requires_grad:
            w._accumulate(x.data.T @ g)
        if b.requires_grad:
            b._accumulate(g.sum(axis=0))

    return _make(out_data, "affine", (x, w, b), backward)


def multihead_attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
                        causal_mask: bool) -> Tensor:
    """Fused scaled dot-product attention over [t, d] inputs split into
    ``heads`` column groups; causal masking hides keys beyond the query
    position."""
    t, d = q.shape
    if k.shape != (t, d) or v.shape != (t, d):
        raise ShapeError("q, k, v must share one [t, d] shape")
    if d % heads != 0:
        raise ShapeError(f"width {d} not divisible by {heads} heads")
    dh = d // heads
    dtype = q.data.dtype

    def split(m):
        return np.ascontiguousarray(m.reshape(t, heads, dh).transpose(1, 0, 2))

    qh, kh, vh = split(q.data), split(k.data), split(v.data)
    scores = (qh @ kh.transpose(0, 2, 1)) * (1.0 / math.sqrt(dh))
    if causal_mask:
        scores = scores + np.triu(np.full((t, t), -1e9, dtype=dtype), k=1)
    scores -= scores.max(axis=2, keepdims=True)
    e = np.exp(scores)
    attn = e / e.sum(axis=2, keepdims=True)   # [h, t, t]
    out_h = attn @ vh                          # [h, t, dh]
    out_data = out_h.transpose(1, 0, 2).reshape(t, d)

    def backward(g):
        gh = np.ascontiguousarray(g.reshape(t, heads, dh).transpose(1, 0, 2))
        if v.requires_grad:
            dv = attn.transpose(0, 2, 1) @ gh
            v._accumulate(dv.transpose(1, 0, 2).reshape(t, d))
        if q.requires_grad or k.requires_grad:
            da = gh @ vh.transpose(0, 2, 1)
            ds = attn * (da - (da * attn).sum(axis=2, keepdims=True))
            ds *= 1.0 / math.sqrt(dh)
            if q.requires_grad:
                q._accumulate((ds @ kh).transpose(1, 0, 2).reshape(t, d))
            if k.requires_grad:
                k._accumulate((ds.transpose(0, 2, 1) @ qh).transpose(1, 0, 2).reshape(t, d))

    return _make(out_data, "attention", (q, k, v), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects two rank-2 tensors")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dims differ: {list(a.shape)} @ {list(b.shape)}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(out_data, "matmul", (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("transpose expects a rank-2 tensor")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.T)

    return _make(a.data.T.copy(), "transpose", (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out_data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _make(out_data.copy(), "reshape", (a,), backward)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("slice_rows expects a rank-2 tensor")
    if not (0 <= start <= stop <= a.shape[0]):
        raise ShapeError(f"row slice [{start}:{stop}] out of range for {list(a.shape)}")

    def backward(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[start:stop] += g

    return _make(a.data[start:stop].copy(), "slice_rows", (a,), backward)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("slice_cols expects a rank-2 tensor")
    if not (0 <= start <= stop <= a.shape[1]):
        raise ShapeError(f"col slice [{start}:{stop}] out of range for {list(a.shape)}")

    def backward(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[:, start:stop] += g

    return _make(a.data[:, start:stop].copy(), "slice_cols", (a,), backward)


def _concat(parts, axis: int, op_kind: str) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat needs at least one part")
    for p in parts:
        if p.data.ndim != 2:
            raise ShapeError(f"{op_kind} expects rank-2 parts")
    other = 1 - axis
    width = parts[0].shape[other]
    for p in parts[1:]:
        if p.shape[other] != width:
            raise ShapeError(f"{op_kind}: mismatched widths {width} vs {p.shape[other]}")
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    offsets = np.cumsum([0] + [p.shape[axis] for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p._accumulate(g[lo:hi] if axis == 0 else g[:, lo:hi])

    return _make(out_data, op_kind, tuple(parts), backward)


def concat_tokens(parts) -> Tensor:
    """Concatenate token blocks [t_i x d] along the token axis."""
    return _concat(parts, axis=0, op_kind="concat_tokens")


def concat_cols(parts) -> Tensor:
    return _concat(parts, axis=1, op_kind="concat_cols")


def gather_rows(table: Tensor, ids) -> Tensor:
    if table.data.ndim != 2:
        raise ShapeError("gather_rows expects a rank-2 table")
    ids = [int(i) for i in ids]
    v = table.shape[0]
    for i in ids:
        if not (0 <= i < v):
            raise IndexError(f"row id {i} out of range for table with {v} rows")
    idx = np.asarray(ids, dtype=np.int64)
    out_data = table.data[idx].copy() if ids else np.zeros((0, table.shape[1]), dtype=table.data.dtype)

    def backward(g):
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, idx, g)

    return _make(out_data, "gather_rows", (table,), backward)


def reduce(a: Tensor, kind: str, axis=None) -> Tensor:
    if kind not in ("sum", "mean"):
        raise ValueError(f"unknown reduce kind {kind!r}")
    if axis is not None:
        axis = int(axis)
        if not (-a.data.ndim <= axis < a.data.ndim):
            raise ShapeError(f"axis {axis} invalid for shape {list(a.shape)}")
    count = a.data.size if axis is None else a.shape[axis]
    out_data = a.data.sum(axis=axis)
    if kind == "mean":
        out_data = out_data / count

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            grad = np.full(a.shape, g if np.ndim(g) == 0 else g.reshape(()), dtype=a.data.dtype)
        else:
            grad = np.broadcast_to(np.expand_dims(g, axis), a.shape).copy()
        if kind == "mean":
            grad = grad / count
        a._accumulate(grad.astype(a.data.dtype, copy=False))

    return _make(out_data, f"reduce_{kind}", (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not (-a.data.ndim <= axis < a.data.ndim):
        raise ShapeError(f"axis {axis} invalid for shape {list(a.shape)}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    sm = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            dot = (g * sm).sum(axis=axis, keepdims=True)
            a._accumulate(sm * (g - dot))

    return _make(sm, "softmax", (a,), backward)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply elementwise gain and bias."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("gain/bias must match the last axis")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data

    def backward(g):
        gy = g * gain.data
        if a.requires_grad:
            sum_gy = gy.sum(axis=-1, keepdims=True)
            sum_gy_xhat = (gy * xhat).sum(axis=-1, keepdims=True)
            a._accumulate((inv / d) * (d * gy - sum_gy - xhat * sum_gy_xhat))
        if gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, d).sum(axis=0))

    return _make(out_data, "layer_norm", (a, gain, bias), backward)


# ---------------------------------------------------------------------------
# backward pass


def _toposort(root: Tensor):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in t.node.inputs:
                if id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Propagate gradients from a scalar loss to every reachable leaf.

    Zeroes reachable grads first, then accumulates; a node can only be
    walked once per graph.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    if not loss.requires_grad:
        return
    order = _toposort(loss)
    for t in order:
        if t.node is not None and t.node.consumed:
            raise GraphError("backward was already called on this graph")
    # leaves persist across graphs and must start from zero; intermediates
    # are fresh per graph and allocate on first accumulation
    for t in order:
        if t.requires_grad:
            if t.node is None:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                else:
                    t.grad[...] = 0.0
            else:
                t.grad = None
    loss.grad = np.ones_like(loss.data)
    for t in reversed(order):
        if t.node is not None:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.node.backward_fn(t.grad)
            t.node.consumed = True
            t.grad = None  # free intermediate buffers as we go


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class FiniteDiffReport:
    max_rel_err: float
    tol: float
    n_coords: int
    worst_param: int = -1
    worst_coord: int = -1
    per_param: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def finite_diff_check(f, params, h: float = 1e-3, tol: float = 1e-3,
                      max_coords_per_param=None, seed: int = 0) -> FiniteDiffReport:
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` rebuilds its graph from the given leaf tensors on every call.
    Evaluation runs in float64 (the float32 rounding floor of a central
    difference at h=1e-3 would swamp small gradients); relative errors use
    denominators clamped at 1e-6. ``max_coords_per_param`` subsamples
    coordinates for large models; None checks every coordinate.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    params = list(params)
    originals = [p.data for p in params]
    for p in params:
        p.data = p.data.astype(np.float64)
        p.grad = np.zeros_like(p.data)
    rng = np.random.default_rng(seed)
    try:
        loss = f()
        backward(loss)
        analytic = [p.grad.copy() for p in params]

        max_rel = 0.0
        worst = (-1, -1)
        n_checked = 0
        per_param = []
        for pi, p in enumerate(params):
            flat = p.data.reshape(-1)
            n = flat.size
            if max_coords_per_param is not None and n > max_coords_per_param:
                coords = rng.choice(n, size=max_coords_per_param, replace=False)
                coords = np.sort(coords)
            else:
                coords = np.arange(n)
            a_flat = analytic[pi].reshape(-1)
            p_max = 0.0
            for ci in coords:
                orig = flat[ci]
                flat[ci] = orig + h
                with no_grad():
                    f_plus = float(f().data.reshape(()))
                flat[ci] = orig - h
                with no_grad():
                    f_minus = float(f().data.reshape(()))
                flat[ci] = orig
                numeric = (f_plus - f_minus) / (2.0 * h)
                a = float(a_flat[ci])
                rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
                n_checked += 1
                if rel > p_max:
                    p_max = rel
                if rel > max_rel:
                    max_rel = rel
                    worst = (pi, int(ci))
            per_param.append(p_max)
    finally:
        for p, orig in zip(params, originals):
            p.data = orig
            p.grad = np.zeros_like(orig)
    return FiniteDiffReport(max_rel_err=max_rel, tol=tol, n_coords=n_checked,
                            worst_param=worst[0], worst_coord=worst[1], per_param=per_param)
