"""Dense fp32/fp64 tensors with a reverse-mode tape.

Ops are free functions over `Tensor` and wrap raw arrays/scalars on the fly.
Recording happens only inside a `with Tape():` block and only for results
that depend (transitively) on a leaf created with ``requires_grad=True``.
``Tape.backward`` walks the recorded ops in exact reverse execution order and
returns leaf gradients keyed by tensor identity; gradients for tensors used
in several places accumulate additively.

Shape discipline: elementwise ops broadcast only over leading batch dims and
explicit size-1 axes. Anything else is a reshape at the call site, which
keeps the tape easy to audit.

Every op checks its output for NaN/Inf and raises `NumericsError` instead of
propagating silently. Masked attention therefore uses a large finite negative
bias (whose softmax weight underflows to exactly zero) rather than -inf.
"""

from __future__ import annotations

import threading
from typing import Iterable, Sequence

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)
MASK_NEG = 1e30  # large finite: exp(-1e30 - rowmax) underflows to exactly 0.0


class NumericsError(RuntimeError):
    """A tensor op produced NaN or Inf."""


_strict_finite = True


def set_strict_finite(flag: bool) -> None:
    global _strict_finite
    _strict_finite = bool(flag)


def _check_finite(data: np.ndarray, opname: str) -> None:
    if _strict_finite and not np.isfinite(data).all():
        raise NumericsError(f"non-finite values produced by '{opname}'")


class Tensor:
    """Contiguous row-major numeric buffer with shape and dtype."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr if arr.ndim == 0 else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of executed differentiable ops.

    One tape per forward/backward pass; independent tapes may live on
    separate threads (the active tape is thread-local).
    """

    _tls = threading.local()

    def __init__(self):
        self._nodes: list[tuple[int, tuple, object]] = []  # (out_id, keepalive, backward_fn)
        self._tracked: set[int] = set()
        self._leaves: dict[int, Tensor] = {}

    # -- context management -------------------------------------------------

    def __enter__(self) -> "Tape":
        stack = getattr(Tape._tls, "stack", None)
        if stack is None:
            stack = Tape._tls.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        Tape._tls.stack.pop()
        return False

    @classmethod
    def active(cls) -> "Tape | None":
        stack = getattr(cls._tls, "stack", None)
        return stack[-1] if stack else None

    @classmethod
    def paused(cls):
        """Context manager: run ops unrecorded inside an open tape."""
        return _PausedTape()

    # -- recording ----------------------------------------------------------

    def _tracks(self, x) -> bool:
        if not isinstance(x, Tensor):
            return False
        if x.requires_grad:
            self._tracked.add(id(x))
            self._leaves.setdefault(id(x), x)
            return True
        return id(x) in self._tracked

    def _record(self, out: Tensor, inputs: tuple, backward_fn) -> None:
        self._tracked.add(id(out))
        self._nodes.append((id(out), inputs, backward_fn))

    # -- reverse pass ---------------------------------------------------------

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Gradients of a scalar `loss` for every leaf seen by this tape."""
        if not isinstance(loss, Tensor) or loss.size != 1:
            raise ValueError("backward expects a scalar Tensor loss")
        if id(loss) not in self._tracked:
            raise ValueError("loss is detached from this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out_id, inputs, backward_fn in reversed(self._nodes):
            g = grads.pop(out_id, None)
            if g is None:
                continue
            for tensor, gt in backward_fn(g):
                if gt is None or id(tensor) not in self._tracked:
                    continue
                acc = grads.get(id(tensor))
                grads[id(tensor)] = gt if acc is None else acc + gt
        return {
            leaf: grads.get(lid, np.zeros_like(leaf.data))
            for lid, leaf in self._leaves.items()
        }


class _PausedTape:
    def __enter__(self):
        stack = getattr(Tape._tls, "stack", None)
        if stack is None:
            stack = Tape._tls.stack = []
        stack.append(None)
        return None

    def __exit__(self, *exc):
        Tape._tls.stack.pop()
        return False


def backward(loss: Tensor, tape: Tape) -> dict[Tensor, np.ndarray]:
    return tape.backward(loss)


# ---------------------------------------------------------------------------
# op plumbing


def _wrap(x, like: np.dtype | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _emit(opname: str, out_data: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    _check_finite(out_data, opname)
    out = Tensor(out_data)
    tape = Tape.active()
    if tape is not None:
        tracked = [tape._tracks(x) for x in inputs]  # no short-circuit: registers every leaf
        if any(tracked):
            tape._record(out, inputs, backward_fn)
    return out


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Collapse a gradient onto a broadcast-source shape: sum out leading
    extra dims, then sum (keepdims) over size-1 axes that were expanded."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _suffix_compatible(a: tuple, b: tuple) -> bool:
    """Trailing alignment: dims must match or be 1 (leading batch dims plus
    explicit size-1 axes; nothing fancier)."""
    n = min(len(a), len(b))
    return all(x == y or x == 1 or y == 1 for x, y in zip(a[len(a) - n:], b[len(b) - n:]))


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b, like=a.dtype if isinstance(a, Tensor) else None)
    if not _suffix_compatible(a.shape, b.shape):
        raise ValueError(f"add: shapes {a.shape} and {b.shape} are not leading-broadcastable")
    out = a.data + b.data

    def bw(g):
        return ((a, _reduce_to(g, a.shape)), (b, _reduce_to(g, b.shape)))

    return _emit("add", out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b, like=a.dtype if isinstance(a, Tensor) else None)
    if not _suffix_compatible(a.shape, b.shape):
        raise ValueError(f"sub: shapes {a.shape} and {b.shape} are not leading-broadcastable")
    out = a.data - b.data

    def bw(g):
        return ((a, _reduce_to(g, a.shape)), (b, _reduce_to(-g, b.shape)))

    return _emit("sub", out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b, like=a.dtype if isinstance(a, Tensor) else None)
    if not _suffix_compatible(a.shape, b.shape):
        raise ValueError(f"mul: shapes {a.shape} and {b.shape} are not leading-broadcastable")
    out = a.data * b.data
    ad, bd = a.data, b.data

    def bw(g):
        return ((a, _reduce_to(g * bd, a.shape)), (b, _reduce_to(g * ad, b.shape)))

    return _emit("mul", out, (a, b), bw)


def neg(a) -> Tensor:
    a = _wrap(a)

    def bw(g):
        return ((a, -g),)

    return _emit("neg", -a.data, (a,), bw)


def silu(a) -> Tensor:
    a = _wrap(a)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * sig

    def bw(g):
        return ((a, g * (sig * (1.0 + a.data * (1.0 - sig)))),)

    return _emit("silu", out, (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Batched matrix product. Leading dims must match exactly, or one
    operand is rank-2 (a shared weight)."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects rank >= 2 operands")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dims disagree {a.shape} x {b.shape}")
    if a.ndim != b.ndim and a.ndim != 2 and b.ndim != 2:
        raise ValueError(f"matmul: ranks {a.ndim} and {b.ndim} not supported")
    if a.ndim == b.ndim and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: leading dims disagree {a.shape} x {b.shape}")
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def bw(g):
        # d(a@b) = g @ b^T , a^T @ g ; rank-2 operands sum over batch dims.
        ga = g @ np.swapaxes(bd, -1, -2)
        if ad.ndim == 2 and g.ndim > 2:
            ga = ga.sum(axis=tuple(range(g.ndim - 2)))
        gb = np.swapaxes(ad, -1, -2) @ g
        if bd.ndim == 2 and g.ndim > 2:
            gb = gb.sum(axis=tuple(range(g.ndim - 2)))
        return ((a, ga), (b, gb))

    return _emit("matmul", out, (a, b), bw)


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = _wrap(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        return ((a, np.ascontiguousarray(g.transpose(inv))),)

    return _emit("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,), bw)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _wrap(a)
    orig = a.shape

    def bw(g):
        return ((a, g.reshape(orig)),)

    return _emit("reshape", a.data.reshape(tuple(shape)), (a,), bw)


def concat(parts: Iterable, axis: int) -> Tensor:
    parts = [_wrap(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        outs = []
        for p, s0, s1 in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(int(s0), int(s1))
            outs.append((p, np.ascontiguousarray(g[tuple(sl)])))
        return tuple(outs)

    return _emit("concat", out, tuple(parts), bw)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = _wrap(a)
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    shape = a.shape

    def bw(g):
        ga = np.zeros(shape, dtype=g.dtype)
        ga[sl] = g
        return ((a, ga),)

    return _emit("slice", np.ascontiguousarray(a.data[sl]), (a,), bw)


def repeat_interleave(a, n: int, axis: int) -> Tensor:
    a = _wrap(a)
    ax = axis % a.ndim

    def bw(g):
        new_shape = g.shape[:ax] + (a.shape[ax], n) + g.shape[ax + 1:]
        return ((a, g.reshape(new_shape).sum(axis=ax + 1)),)

    return _emit("repeat", np.repeat(a.data, n, axis=ax), (a,), bw)


# ---------------------------------------------------------------------------
# reductions


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    shape = a.shape

    def bw(g):
        if axis is None:
            return ((a, np.broadcast_to(g, shape).astype(g.dtype)),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return ((a, np.broadcast_to(gg, shape).copy()),)

    return _emit("sum", a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    shape = a.shape
    if axis is None:
        count = a.size
    else:
        count = shape[axis]

    def bw(g):
        if axis is None:
            return ((a, np.broadcast_to(g / count, shape).astype(g.dtype)),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return ((a, (np.broadcast_to(gg, shape) / count).astype(g.dtype)),)

    return _emit("mean", a.data.mean(axis=axis, keepdims=keepdims), (a,), bw)


# ---------------------------------------------------------------------------
# nonlinear building blocks


def softmax(a) -> Tensor:
    """Numerically stable softmax over the last axis."""
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((a, out * (g - dot)),)

    return _emit("softmax", out, (a,), bw)


def layernorm(a, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    a = _wrap(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    d = a.shape[-1]

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return ((a, inv * (g - gm - xhat * gx)),)

    return _emit("layernorm", xhat, (a,), bw)


def rotate_pairs(a, angles: np.ndarray) -> Tensor:
    """Rotate interleaved (even, odd) feature pairs by per-pair angles.

    `angles` is a constant array broadcastable to a.shape[:-1] + (d/2,).
    The map is an isometry; backward rotates the gradient by -angles.
    """
    a = _wrap(a)
    d = a.shape[-1]
    if d % 2 != 0:
        raise ValueError("rotate_pairs needs an even feature dim")
    c = np.cos(angles).astype(a.dtype)
    s = np.sin(angles).astype(a.dtype)
    x0 = a.data[..., 0::2]
    x1 = a.data[..., 1::2]
    out = np.empty_like(a.data)
    out[..., 0::2] = x0 * c - x1 * s
    out[..., 1::2] = x0 * s + x1 * c

    def bw(g):
        g0 = g[..., 0::2]
        g1 = g[..., 1::2]
        ga = np.empty_like(g)
        ga[..., 0::2] = g0 * c + g1 * s
        ga[..., 1::2] = -g0 * s + g1 * c
        return ((a, ga),)

    return _emit("rotate_pairs", out, (a,), bw)


def rope_rotate(a, positions: np.ndarray, base: float = 10000.0) -> Tensor:
    """Rotary position encoding over the whole last dim (1D axis).

    positions: integer array of shape a.shape[-2] (one per token).
    """
    a = _wrap(a)
    d = a.shape[-1]
    if d % 2 != 0:
        raise ValueError("rope_rotate needs an even feature dim")
    inv_freq = base ** (-np.arange(d // 2, dtype=np.float64) * 2.0 / d)
    angles = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    return rotate_pairs(a, angles)


def apply_mats4(a, mats: np.ndarray) -> Tensor:
    """Apply constant per-token 4x4 matrices to homogeneous 4-vector groups.

    a: (..., H, T, G, 4) with mats (T, 4, 4), or batched a (B, H, T, G, 4)
    with mats (B, T, 4, 4). Backward applies the transposed matrices.
    """
    a = _wrap(a)
    m = np.asarray(mats, dtype=a.dtype)
    if a.ndim == 4 and m.ndim == 3:
        m_b = m  # broadcast over the leading head axis
    elif a.ndim == 5 and m.ndim == 4:
        m_b = m[:, None]
    else:
        raise ValueError(f"apply_mats4: unsupported ranks {a.ndim}/{m.ndim}")
    # out[..., i] = sum_j M[i, j] x[..., j]  ==  x @ M^T, broadcast per token
    out = a.data @ np.swapaxes(m_b, -1, -2)

    def bw(g):
        return ((a, g @ m_b),)

    return _emit("apply_mats4", out, (a,), bw)


def detach(a: Tensor) -> Tensor:
    return Tensor(a.data, requires_grad=False)


def cast(a, dtype) -> Tensor:
    a = _wrap(a)
    src = a.dtype

    def bw(g):
        return ((a, g.astype(src)),)

    return _emit("cast", a.data.astype(dtype), (a,), bw)


# ---------------------------------------------------------------------------
# attention


def mask_bias(mask: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Additive attention bias: 0 where allowed, -MASK_NEG where masked."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ValueError("attention mask has a fully-masked query row")
    return np.where(mask, 0.0, -MASK_NEG).astype(dtype)


def masked_attention(q, k, v, mask: np.ndarray) -> Tensor:
    """softmax(q k^T / sqrt(dim) + log mask) v with boolean `mask`.

    q, k, v: (..., heads, tokens, dim); mask: (tokens, tokens) or batched
    (..., tokens, tokens) broadcastable to the logits. Masked positions get
    exactly zero attention weight.
    """
    q, k, v = _wrap(q), _wrap(k), _wrap(v)
    dim = q.shape[-1]
    scale = 1.0 / np.sqrt(dim)
    logits = matmul(mul(q, np.asarray(scale, dtype=q.dtype)), transpose(k, _swap_last2(k.ndim)))
    bias = mask_bias(mask, dtype=logits.dtype)
    probs = softmax(add(logits, bias))
    return matmul(probs, v)


def _swap_last2(ndim: int) -> tuple:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)
