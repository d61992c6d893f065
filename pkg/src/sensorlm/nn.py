"""Neural building blocks over the autodiff engine.

Holds the named parameter table (with a frozen partition), linear /
attention / transformer-block forwards, the two losses, Adam, and the
binary parameter-table codec shared with checkpoints.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

INIT_STD = 0.02


class ContractError(RuntimeError):
    """A caller violated an operation's precondition."""


class FormatError(ValueError):
    """Malformed serialized bytes."""


class ParamSet:
    """Named map from dot-separated path to parameter tensor.

    Iteration is always sorted by path so update order and serialization
    are deterministic. Paths in ``frozen_paths`` are never touched by the
    optimizer.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.frozen_paths: set[str] = set()

    def add(self, path: str, tensor: Tensor) -> Tensor:
        if path in self._params:
            raise ContractError(f"duplicate parameter path {path!r}")
        self._params[path] = tensor
        return tensor

    def __getitem__(self, path: str) -> Tensor:
        try:
            return self._params[path]
        except KeyError:
            raise ContractError(f"missing parameter path {path!r}") from None

    def __contains__(self, path: str) -> bool:
        return path in self._params

    def __len__(self) -> int:
        return len(self._params)

    def paths(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        for path in self.paths():
            yield path, self._params[path]

    def freeze(self, paths) -> None:
        for p in paths:
            if p not in self._params:
                raise ContractError(f"cannot freeze unknown path {p!r}")
            self.frozen_paths.add(p)

    def freeze_prefix(self, prefix: str) -> None:
        self.freeze([p for p in self._params if p.startswith(prefix)])

    def trainable_paths(self) -> list[str]:
        return [p for p in self.paths() if p not in self.frozen_paths]

    def subset(self, paths) -> "ParamSet":
        """View sharing the same tensors, restricted to ``paths``."""
        out = ParamSet()
        for p in paths:
            out.add(p, self[p])
        out.frozen_paths = {p for p in paths if p in self.frozen_paths}
        return out

    def n_values(self, paths=None) -> int:
        paths = self.paths() if paths is None else paths
        return sum(self._params[p].size for p in paths)

    def zero_grads(self) -> None:
        for _, t in self.items():
            t.zero_grad()

    def collect_grads(self, paths=None) -> dict[str, np.ndarray]:
        paths = self.trainable_paths() if paths is None else paths
        out = {}
        for p in paths:
            t = self[p]
            out[p] = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        return out


def normal_param(rng: np.random.Generator, shape, std=INIT_STD) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape).astype(np.float32), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)


# ---------------------------------------------------------------------------
# forward blocks


def linear_apply(weights: Tensor, bias: Tensor, x: Tensor) -> Tensor:
    """Row-wise x @ W + b for x of shape [t, d_in]."""
    return ad.affine(x, weights, bias)


def attention_apply(q: Tensor, k: Tensor, v: Tensor, heads: int, causal_mask: bool) -> Tensor:
    """Scaled dot-product attention over [t, d] inputs split into
    ``heads`` column groups. With the causal mask, position i sees keys <= i."""
    if q.shape[1] % heads != 0:
        raise ContractError(f"width {q.shape[1]} not divisible by {heads} heads")
    return ad.multihead_attention(q, k, v, heads, causal_mask)


def transformer_block_apply(params: ParamSet, prefix: str, x: Tensor, heads: int,
                            causal_mask: bool = True) -> Tensor:
    """Pre-norm block: LN -> attention -> residual, LN -> GELU MLP -> residual."""
    p = lambda name: params[f"{prefix}.{name}"]
    h = ad.layer_norm(x, p("ln1.gain"), p("ln1.bias"))
    q = linear_apply(p("attn.wq"), p("attn.bq"), h)
    k = linear_apply(p("attn.wk"), p("attn.bk"), h)
    v = linear_apply(p("attn.wv"), p("attn.bv"), h)
    a = attention_apply(q, k, v, heads, causal_mask)
    x = ad.add(x, linear_apply(p("attn.wo"), p("attn.bo"), a))
    h = ad.layer_norm(x, p("ln2.gain"), p("ln2.bias"))
    m = ad.gelu(linear_apply(p("mlp.w1"), p("mlp.b1"), h))
    return ad.add(x, linear_apply(p("mlp.w2"), p("mlp.b2"), m))


def init_transformer_block(params: ParamSet, prefix: str, d: int, rng: np.random.Generator) -> None:
    params.add(f"{prefix}.ln1.gain", Tensor(np.ones(d, dtype=np.float32), requires_grad=True))
    params.add(f"{prefix}.ln1.bias", zeros_param(d))
    for name in ("wq", "wk", "wv", "wo"):
        params.add(f"{prefix}.attn.{name}", normal_param(rng, (d, d)))
        params.add(f"{prefix}.attn.b{name[1]}", zeros_param(d))
    params.add(f"{prefix}.ln2.gain", Tensor(np.ones(d, dtype=np.float32), requires_grad=True))
    params.add(f"{prefix}.ln2.bias", zeros_param(d))
    params.add(f"{prefix}.mlp.w1", normal_param(rng, (d, 4 * d)))
    params.add(f"{prefix}.mlp.b1", zeros_param(4 * d))
    params.add(f"{prefix}.mlp.w2", normal_param(rng, (4 * d, d)))
    params.add(f"{prefix}.mlp.b2", zeros_param(d))


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits: Tensor, targets, ignore_index: int = -1) -> Tensor:
    """Mean negative log-softmax at the target ids; ``ignore_index``
    positions contribute nothing. All-ignored input gives zero loss and
    zero gradient."""
    t, v = logits.shape
    targets = [int(x) for x in targets]
    if len(targets) != t:
        raise ContractError(f"{t} logit rows but {len(targets)} targets")
    for tgt in targets:
        if tgt != ignore_index and not (0 <= tgt < v):
            raise IndexError(f"target {tgt} out of range for vocab {v}")
    kept = [i for i, tgt in enumerate(targets) if tgt != ignore_index]
    if not kept:
        return Tensor(np.zeros((), dtype=logits.data.dtype))

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    sm = e / e.sum(axis=1, keepdims=True)
    logp = shifted - np.log(e.sum(axis=1, keepdims=True))
    n = len(kept)
    loss = -sum(logp[i, targets[i]] for i in kept) / n

    def backward(g):
        if logits.requires_grad:
            dl = np.zeros_like(logits.data)
            for i in kept:
                dl[i] = sm[i]
                dl[i, targets[i]] -= 1.0
            logits._accumulate(dl * (g / n))

    return ad._make(np.asarray(loss), "cross_entropy", (logits,), backward)


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ad.ShapeError(f"mse shapes differ: {list(pred.shape)} vs {list(target.shape)}")
    diff = ad.sub(pred, target)
    return ad.reduce(ad.mul(diff, diff), "mean")


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_update(params: ParamSet, state: AdamState, grads: dict) -> None:
    """One bias-corrected Adam step on every non-frozen parameter.

    Frozen parameters are left bit-for-bit untouched; a trainable path
    without a gradient entry is a contract violation.
    """
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for path in params.trainable_paths():
        if path not in grads:
            raise ContractError(f"no gradient supplied for trainable path {path!r}")
        g = grads[path]
        t = params[path]
        if g.shape != t.data.shape:
            raise ContractError(f"gradient shape mismatch at {path!r}")
        if path not in state.m:
            state.m[path] = np.zeros_like(t.data)
            state.v[path] = np.zeros_like(t.data)
        m = state.m[path]
        v = state.v[path]
        m[...] = b1 * m + (1.0 - b1) * g
        v[...] = b2 * v + (1.0 - b2) * g * g
        mhat = m / bc1
        vhat = v / bc2
        t.data -= (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(t.data.dtype)


# ---------------------------------------------------------------------------
# binary parameter table (shared with the checkpoint format)

_U32 = struct.Struct("<I")


def _write_u32(out: bytearray, value: int) -> None:
    out += _U32.pack(value)


def _read_u32(buf: bytes, off: int):
    if off + 4 > len(buf):
        raise FormatError("truncated blob: expected 4-byte integer")
    return _U32.unpack_from(buf, off)[0], off + 4


def write_array_table(entries) -> bytes:
    """Encode (path, float32 array) pairs: count, then per entry a
    length-prefixed UTF-8 path, rank, dims, and raw little-endian values."""
    entries = list(entries)
    out = bytearray()
    _write_u32(out, len(entries))
    for path, arr in entries:
        raw = path.encode("utf-8")
        _write_u32(out, len(raw))
        out += raw
        arr = np.ascontiguousarray(arr, dtype="<f4")
        _write_u32(out, arr.ndim)
        for dim in arr.shape:
            _write_u32(out, dim)
        out += arr.tobytes()
    return bytes(out)


def read_array_table(buf: bytes, off: int = 0):
    """Decode a table written by :func:`write_array_table`.

    Returns (list of (path, float32 array), next offset)."""
    count, off = _read_u32(buf, off)
    entries = []
    for _ in range(count):
        plen, off = _read_u32(buf, off)
        if off + plen > len(buf):
            raise FormatError("truncated blob: path bytes missing")
        path = buf[off:off + plen].decode("utf-8")
        off += plen
        rank, off = _read_u32(buf, off)
        shape = []
        for _ in range(rank):
            dim, off = _read_u32(buf, off)
            shape.append(dim)
        n = int(np.prod(shape)) if shape else 1
        nbytes = 4 * n
        if off + nbytes > len(buf):
            raise FormatError(f"truncated blob: values missing for {path!r}")
        arr = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(shape).copy()
        off += nbytes
        entries.append((path, arr))
    return entries, off


def params_serialize(params: ParamSet) -> bytes:
    return write_array_table((p, t.data) for p, t in params.items())


def params_deserialize(blob: bytes) -> ParamSet:
    entries, off = read_array_table(blob, 0)
    if off != len(blob):
        raise FormatError(f"{len(blob) - off} trailing bytes after parameter table")
    out = ParamSet()
    for path, arr in entries:
        out.add(path, Tensor(arr, requires_grad=True))
    return out
