"""Dense tensors with reverse-mode autodiff, plus row-wise inference kernels.

Training runs through :class:`Tensor` graphs in float64. Inference uses the
plain-array kernels at the bottom of this module; they process one row at a
time with fixed reduction order so that cached and uncached evaluation agree
bit for bit.
"""
from __future__ import annotations

import contextlib
import math
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionError, StateError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if any(s <= 0 for s in arr.shape):
            raise DimensionError(f"shape must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from a scalar ``loss``."""
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
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
    for node in order:
        if node._backward is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            # interior gradients are not needed after propagation
            node.grad = None
            node._backward = None
            node._parents = ()


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), bw)


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))

    def bw(g):
        _accum(x, g * sig * (1.0 + x.data * (1.0 - sig)))

    return _result(x.data * sig, (x,), bw)


def swiglu(gate: Tensor, up: Tensor) -> Tensor:
    """silu(gate) * up."""
    sig = 1.0 / (1.0 + np.exp(-gate.data))
    act = gate.data * sig

    def bw(g):
        if gate.requires_grad:
            _accum(gate, g * up.data * sig * (1.0 + gate.data * (1.0 - sig)))
        if up.requires_grad:
            _accum(up, g * act)

    return _result(act * up.data, (gate, up), bw)


# ---------------------------------------------------------------- shape ops

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape

    def bw(g):
        _accum(x, g.reshape(src))

    return _result(x.data.reshape(shape), (x,), bw)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)

    def bw(g):
        _accum(x, g.transpose(inv))

    return _result(x.data.transpose(axes), (x,), bw)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ax = axis % xs[0].ndim
    sizes = [x.shape[ax] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if x.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(lo, hi)
                _accum(x, g[tuple(sl)])

    return _result(np.concatenate([x.data for x in xs], axis=ax), xs, bw)


def getitem(x: Tensor, idx) -> Tensor:
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (int, slice)) or i is None or i is Ellipsis for i in parts)

    def bw(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        _accum(x, full)

    return _result(x.data[idx], (x,), bw)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(f"embedding id out of range [0, {table.shape[0]})")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        _accum(table, full)

    return _result(table.data[ids], (table,), bw)


def gather_rows(x: Tensor, idx) -> Tensor:
    """For x of shape (B, M, d) and idx (B, C), return x[b, idx[b, c]]."""
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(x.shape[0])[:, None]

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (np.broadcast_to(rows, idx.shape), idx), g)
        _accum(x, full)

    return _result(x.data[rows, idx], (x,), bw)


# ---------------------------------------------------------------- reductions

def sum_all(x: Tensor) -> Tensor:
    def bw(g):
        _accum(x, np.broadcast_to(g, x.shape))

    return _result(np.asarray(x.data.sum()), (x,), bw)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size

    def bw(g):
        _accum(x, np.broadcast_to(g / n, x.shape))

    return _result(np.asarray(x.data.mean()), (x,), bw)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs operands with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            if b.ndim == 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
            _accum(b, gb)

    return _result(out, (a, b), bw)


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if d == 0 or weight.shape != (d,):
        raise DimensionError(f"rms_norm weight shape {weight.shape} vs last dim {d}")
    ms = (x.data * x.data).mean(axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(ms + eps)
    xhat = x.data * r

    def bw(g):
        if weight.requires_grad:
            _accum(weight, (g * xhat).reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gw = g * weight.data
            dot = (gw * x.data).sum(axis=-1, keepdims=True)
            _accum(x, r * gw - x.data * (r ** 3) * dot / d)

    return _result(xhat * weight.data, (x, weight), bw)


def rope_tables(positions, head_dim: int, base: float = 10000.0, dtype=np.float64):
    if head_dim % 2:
        raise DimensionError("rotary embeddings need an even head dimension")
    inv = base ** (-np.arange(0, head_dim // 2, dtype=np.float64) * 2.0 / head_dim)
    ang = np.asarray(positions, dtype=np.float64)[..., None] * inv
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def rope(x: Tensor, positions, base: float = 10000.0) -> Tensor:
    """Rotate the two halves of the last axis; positions index axis -2."""
    dh = x.shape[-1]
    cos, sin = rope_tables(positions, dh, base)
    h = dh // 2
    x1, x2 = x.data[..., :h], x.data[..., h:]
    out = np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)

    def bw(g):
        g1, g2 = g[..., :h], g[..., h:]
        _accum(x, np.concatenate([g1 * cos + g2 * sin, g2 * cos - g1 * sin], axis=-1))

    return _result(out, (x,), bw)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray) -> Tensor:
    """softmax(q k^T / sqrt(d) + mask) v with a boolean allow-mask.

    ``mask`` broadcasts against (..., T, S); every query row must allow at
    least one key.
    """
    mask = np.asarray(mask, dtype=bool)
    scale = 1.0 / math.sqrt(q.shape[-1])
    s = np.matmul(q.data, np.swapaxes(k.data, -1, -2)) * scale
    s = np.where(mask, s, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    out = np.matmul(p, v.data)

    def bw(g):
        if v.requires_grad:
            _accum(v, _unbroadcast(np.matmul(np.swapaxes(p, -1, -2), g), v.shape))
        dp = np.matmul(g, np.swapaxes(v.data, -1, -2))
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * scale
        if q.requires_grad:
            _accum(q, _unbroadcast(np.matmul(ds, k.data), q.shape))
        if k.requires_grad:
            _accum(k, _unbroadcast(np.matmul(np.swapaxes(ds, -1, -2), q.data), k.shape))

    return _result(out, (q, k, v), bw)


def cross_entropy(logits: Tensor, targets, num_classes: int | None = None,
                  ignore_index: int = -1) -> Tensor:
    """Mean token cross-entropy over rows whose target is not ``ignore_index``.

    Only the first ``num_classes`` logits take part in the softmax; trailing
    classes receive zero gradient.
    """
    c_all = logits.shape[-1]
    c = c_all if num_classes is None else num_classes
    z = logits.data.reshape(-1, c_all)[:, :c]
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != z.shape[0]:
        raise DimensionError("targets and logits disagree on row count")
    valid = t != ignore_index
    n = int(valid.sum())
    if n == 0:
        raise DimensionError("cross_entropy needs at least one target")
    if np.any(t[valid] >= c) or np.any(t[valid] < 0):
        raise DimensionError("target class out of range")
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    zsum = e.sum(axis=-1, keepdims=True)
    logp = z - m - np.log(zsum)
    rows = np.flatnonzero(valid)
    loss = -logp[rows, t[rows]].sum() / n

    def bw(g):
        p = e / zsum
        p[rows, t[rows]] -= 1.0
        p[~valid] = 0.0
        full = np.zeros((z.shape[0], c_all), dtype=logits.data.dtype)
        full[:, :c] = p * (g / n)
        _accum(logits, full.reshape(logits.shape))

    return _result(np.asarray(loss), (logits,), bw)


# ---------------------------------------------------------------- parameters

class ParameterStore:
    """Named trainable tensors with a freeze mask."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.frozen: set[str] = set()

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def freeze(self, names: Iterable[str]) -> None:
        for n in names:
            if n not in self._params:
                raise KeyError(n)
            self.frozen.add(n)

    def freeze_prefix(self, prefix: str) -> None:
        self.freeze([n for n in self._params if n.startswith(prefix)])

    def trainable(self) -> list[str]:
        return [n for n in self._params if n not in self.frozen]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = np.zeros_like(t.data)

    def num_params(self) -> int:
        return int(sum(t.data.size for t in self._params.values()))

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self._params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        """Copy stored values in; with ``strict`` every parameter must be present."""
        for n, t in self._params.items():
            if n not in arrays:
                if strict:
                    raise KeyError(f"missing parameter {n!r}")
                continue
            a = arrays[n]
            if a.shape != t.shape:
                raise DimensionError(f"{n}: stored shape {a.shape} != {t.shape}")
            t.data = np.array(a, dtype=np.float64)


# ---------------------------------------------------------------- inference kernels
#
# Every kernel below works on single rows. Reductions run along axis 0 of a
# freshly built temporary (ascending index, sequential) or over one contiguous
# 1-D vector, so the result depends only on the values and not on whether the
# row came from a cache or from a full-sequence array.

def linear_row(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    return (x[:, None] * w).sum(axis=0)


def rms_norm_row(x: np.ndarray, weight: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    d = x.shape[-1]
    if d == 0:
        raise DimensionError("rms_norm over an empty dimension")
    ms = (x * x).sum() / x.dtype.type(d)
    return x * (x.dtype.type(1.0) / np.sqrt(ms + x.dtype.type(eps))) * weight


def rope_row(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """x has shape (heads, head_dim); cos/sin have shape (head_dim // 2,)."""
    h = x.shape[-1] // 2
    x1, x2 = x[:, :h], x[:, h:]
    return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)


def silu_np(x: np.ndarray) -> np.ndarray:
    one = x.dtype.type(1.0)
    return x * (one / (one + np.exp(-x)))


def attend_row(q: np.ndarray, keys: np.ndarray, values: np.ndarray, n_heads: int) -> np.ndarray:
    """Attention for one query row over the given key/value rows (ascending order)."""
    d = q.shape[-1]
    dh = d // n_heads
    n = keys.shape[0]
    qh = q.reshape(1, n_heads, dh)
    kh = keys.reshape(n, n_heads, dh)
    s = (kh * qh).sum(axis=-1) * q.dtype.type(1.0 / math.sqrt(dh))
    s = s - s.max(axis=0)
    e = np.exp(s)
    p = e / e.sum(axis=0)
    out = (p[:, :, None] * values.reshape(n, n_heads, dh)).sum(axis=0)
    return out.reshape(d)


class AttentionMask:
    """Which key positions each query position may attend to.

    Kinds: ``causal`` (keys <= i), ``window`` (max(0, i-back) <= key <= i),
    ``lookahead`` (keys <= i + limits[i]) and ``dense`` (explicit boolean
    matrix).
    """

    def __init__(self, kind: str, back: int = 0, limits=None, matrix=None):
        if kind not in ("causal", "window", "lookahead", "dense"):
            raise ValueError(f"unknown mask kind {kind!r}")
        self.kind = kind
        self.back = back
        self.limits = None if limits is None else [int(x) for x in limits]
        self.dense = None if matrix is None else np.asarray(matrix, dtype=bool)
        if self.limits is not None and any(x < 0 for x in self.limits):
            raise ValueError("look-ahead limits must be non-negative")

    @classmethod
    def causal(cls):
        return cls("causal")

    @classmethod
    def window(cls, back: int):
        return cls("window", back=back)

    @classmethod
    def lookahead(cls, limits):
        return cls("lookahead", limits=limits)

    @classmethod
    def from_matrix(cls, matrix):
        return cls("dense", matrix=matrix)

    def keys(self, i: int, n_keys: int):
        """Key selector for query position ``i``: a slice or an index array."""
        if self.kind == "causal":
            return slice(0, min(i + 1, n_keys))
        if self.kind == "window":
            return slice(max(0, i - self.back), min(i + 1, n_keys))
        if self.kind == "lookahead":
            return slice(0, min(i + self.limits[i] + 1, n_keys))
        return np.flatnonzero(self.dense[i, :n_keys])

    def matrix(self, n_query: int, n_keys: int) -> np.ndarray:
        m = np.zeros((n_query, n_keys), dtype=bool)
        for i in range(n_query):
            m[i, self.keys(i, n_keys)] = True
        return m


class KVCache:
    """Growable key/value row store for one attention layer."""

    def __init__(self, dim: int, dtype=np.float32, capacity: int = 16):
        self.dim = dim
        self._k = np.zeros((capacity, dim), dtype=dtype)
        self._v = np.zeros((capacity, dim), dtype=dtype)
        self.length = 0

    def append(self, k: np.ndarray, v: np.ndarray) -> None:
        k = np.atleast_2d(k)
        v = np.atleast_2d(v)
        n = k.shape[0]
        if self.length + n > self._k.shape[0]:
            cap = max(2 * self._k.shape[0], self.length + n)
            for name in ("_k", "_v"):
                old = getattr(self, name)
                new = np.zeros((cap, self.dim), dtype=old.dtype)
                new[: self.length] = old[: self.length]
                setattr(self, name, new)
        self._k[self.length:self.length + n] = k
        self._v[self.length:self.length + n] = v
        self.length += n

    @property
    def keys(self) -> np.ndarray:
        return self._k[: self.length]

    @property
    def values(self) -> np.ndarray:
        return self._v[: self.length]

    def clone(self) -> "KVCache":
        c = KVCache.__new__(KVCache)
        c.dim = self.dim
        c._k = self._k.copy()
        c._v = self._v.copy()
        c.length = self.length
        return c


def causal_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, mask: AttentionMask,
                     cache: KVCache | None = None, n_heads: int = 1,
                     position: int | None = None) -> np.ndarray:
    """Masked attention over (T, d) rows.

    Without a cache, query i attends over ``k``/``v`` as selected by ``mask``.
    With a cache, the new k/v rows are appended first and query i sits at
    absolute position ``cache.length_before + i``; ``position``, if given,
    must match that offset.
    """
    q = np.atleast_2d(q)
    k = np.atleast_2d(k)
    v = np.atleast_2d(v)
    if q.shape[-1] % n_heads:
        raise DimensionError("model dimension must divide by the head count")
    if cache is None:
        keys, values, offset = k, v, 0
    else:
        offset = cache.length
        if position is not None and position != offset:
            raise StateError(f"cache holds {offset} rows but query claims position {position}")
        cache.append(k, v)
        keys, values = cache.keys, cache.values
    out = np.empty_like(q)
    for i in range(q.shape[0]):
        sel = mask.keys(offset + i, keys.shape[0])
        out[i] = attend_row(q[i], keys[sel], values[sel], n_heads)
    return out
