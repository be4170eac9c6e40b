"""Dense tensors with reverse-mode automatic differentiation.

Tensors wrap contiguous row-major numpy arrays (float32 for training,
float64 for verification). Operations executed inside a ``GradTape``
context are recorded in execution order; ``backward`` replays the tape
in reverse and accumulates gradients into ``.grad`` of every tensor
that has ``requires_grad`` set. Gradients add up across ``backward``
calls until ``zero_grads`` is called.

Masked attention scores use the IEEE -inf sentinel (``NEG_INF``); the
most-negative finite float is never used for masking, and ``softmax_rows``
handles the sentinel explicitly instead of relying on overflow.
"""
from __future__ import annotations

import ctypes
import os
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

NEG_INF = float("-inf")

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


def _tune_allocator() -> None:
    """Keep large numpy buffers on the heap instead of mmap round-trips.

    A tape holds every forward intermediate alive until backward runs, so
    training alternates between hundreds of MB allocated and freed. With
    glibc defaults each big block is mmapped and unmapped, and the page
    faults roughly double step time. Raising the mmap/trim thresholds lets
    the allocator recycle those blocks. No-op off glibc or when
    CAUSALVIT_NO_MALLOC_TUNING is set.
    """
    if os.environ.get("CAUSALVIT_NO_MALLOC_TUNING"):
        return
    try:
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass


_tune_allocator()


class ShapeError(ValueError):
    """Operand shapes or dtypes are incompatible with an operation."""


class RankError(ValueError):
    """A tensor of the wrong rank was passed (e.g. a non-scalar loss)."""


class DegenerateRowError(ValueError):
    """A softmax row had no finite entry, so no distribution exists.

    This is the numeric symptom of a fully masked attention read; it is
    raised eagerly so callers see a diagnosis instead of silent NaNs.
    """

    def __init__(self, row_index: tuple, message: str):
        super().__init__(message)
        self.row_index = row_index


class Tensor:
    """n-dimensional real array with an optional gradient.

    The wrapped array is shared, not copied; treat tensors as immutable
    once they participate in traced operations. Only optimizers mutate
    parameter data in place, between training steps.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        if arr.ndim > 0 and not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)  # 0-d arrays stay 0-d
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tape: GradTape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        """The underlying array (shared, not a copy)."""
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # arithmetic sugar; scalars are promoted to constants of matching dtype
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_const(self, p)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.size if axis is None else np.prod([self.shape[a] for a in _norm_axes(axis, self.ndim)])
        return reduce_sum(self, axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self) -> "Tensor":
        return transpose(self)


class _Entry:
    __slots__ = ("output", "inputs", "backward_fn")

    def __init__(self, output: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable):
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


class GradTape:
    """Execution-ordered operation record for one forward pass.

    Entries are appended as operations run, so inputs always precede the
    operations that consume them. A tape is confined to one thread; use
    one tape per training step and let it go out of scope afterwards.
    """

    def __init__(self):
        self.entries: list[_Entry] = []

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.entries)


_LOCAL = threading.local()


def _tape_stack() -> list:
    stack = getattr(_LOCAL, "tapes", None)
    if stack is None:
        stack = []
        _LOCAL.tapes = stack
    return stack


def _current_tape() -> GradTape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _trace(out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    tape = _current_tape()
    if tape is not None and any(t.requires_grad or t.tape is tape for t in inputs):
        out.tape = tape
        tape.entries.append(_Entry(out, inputs, backward_fn))
    return out


def backward(loss: Tensor, release_tape: bool = False) -> None:
    """Accumulate d(loss)/d(tensor) into ``.grad`` of requires_grad tensors.

    Repeated calls keep adding; call ``zero_grads`` to reset. With
    ``release_tape`` the tape is consumed as the walk passes each entry,
    freeing forward intermediates early (the hot training loop uses this;
    it forfeits repeated backward calls on the same tape).
    """
    if loss.data.ndim != 0:
        raise RankError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    if tape is None:
        raise ValueError("loss was not produced through tracked operations (no tape)")
    pending: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    holders: dict[int, Tensor] = {id(loss): loss}
    entries = tape.entries
    for i in range(len(entries) - 1, -1, -1):
        entry = entries[i]
        if release_tape:
            entries[i] = None
        g_out = pending.pop(id(entry.output), None)
        if g_out is None:
            continue
        if entry.output.requires_grad:
            out = entry.output
            out.grad = g_out.copy() if out.grad is None else out.grad + g_out
        for t, g in zip(entry.inputs, entry.backward_fn(g_out)):
            if g is None:
                continue
            k = id(t)
            if k in pending:
                pending[k] = pending[k] + g
            else:
                pending[k] = g
                holders[k] = t
    if release_tape:
        tape.entries = []
    for k, g in pending.items():
        t = holders[k]
        if t.requires_grad:
            t.grad = np.array(g) if t.grad is None else t.grad + g


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def _coerce(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float, np.floating, np.integer)):
        return Tensor(np.asarray(x, dtype=dtype))
    return Tensor(np.asarray(x))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        b = _coerce(b, a.dtype)
    else:
        a = _coerce(a, b.dtype)
    if a.dtype != b.dtype:
        raise ShapeError(f"dtype mismatch: {a.dtype} vs {b.dtype} (one graph, one precision)")
    return a, b


def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = Tensor(a.data + b.data)

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _trace(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = Tensor(a.data - b.data)

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _trace(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = Tensor(a.data * b.data)

    def bwd(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _trace(out, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return _trace(out, (a,), lambda g: (-g,))


def pow_const(a: Tensor, p: float) -> Tensor:
    """Elementwise a**p for a constant real exponent."""
    out = Tensor(a.data ** p)

    def bwd(g):
        return (g * (p * a.data ** (p - 1)),)

    return _trace(out, (a,), bwd)


def matmul(a, b) -> Tensor:
    """Matrix product; leading batch dimensions broadcast.

    Backward follows dA = dO @ B^T and dB = A^T @ dO, with broadcast
    axes summed out.
    """
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)

    def bwd(g):
        da = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        db = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return da, db

    return _trace(out, (a, b), bwd)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise RankError(f"transpose needs rank >= 2, got shape {a.shape}")
    out = Tensor(np.swapaxes(a.data, -1, -2))
    return _trace(out, (a,), lambda g: (np.swapaxes(g, -1, -2),))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(np.transpose(a.data, axes))
    return _trace(out, (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = Tensor(np.reshape(a.data, shape))
    return _trace(out, (a,), lambda g: (np.reshape(g, a.data.shape),))


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = Tensor(np.broadcast_to(a.data, shape).copy())
    return _trace(out, (a,), lambda g: (_unbroadcast(g, a.data.shape),))


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = Tensor(a.data.sum(axis=axes, keepdims=keepdims))

    def bwd(g):
        if not keepdims:
            for ax in sorted(axes):
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.data.shape),)

    return _trace(out, (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeError(f"concat dtype mismatch: {sorted(str(d) for d in dtypes)}")
    ax = axis % tensors[0].ndim
    out = Tensor(np.concatenate([t.data for t in tensors], axis=ax))
    offsets = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, offsets, axis=ax))

    return _trace(out, tuple(tensors), bwd)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    ax = axis % a.ndim
    if start < 0 or start + length > a.shape[ax]:
        raise ShapeError(f"narrow [{start}:{start + length}) out of range for axis {ax} of {a.shape}")
    sl = tuple(slice(None) if i != ax else slice(start, start + length) for i in range(a.ndim))
    out = Tensor(np.ascontiguousarray(a.data[sl]))

    def bwd(g):
        full = np.zeros_like(a.data)
        full[sl] = g
        return (full,)

    return _trace(out, (a,), bwd)


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x), computed without overflow for large |x|."""
    x = a.data
    t = np.exp(-np.abs(x))
    sig = np.where(x < 0, t / (1.0 + t), 1.0 / (1.0 + t))
    out = Tensor(x * sig)

    def bwd(g):
        return (g * (sig * (1.0 + x * (1.0 - sig))),)

    return _trace(out, (a,), bwd)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax along the last axis, stabilized by row-max shift.

    Entries equal to ``NEG_INF`` map to exactly 0. A row with no finite
    entry raises ``DegenerateRowError`` naming the row.
    """
    x = a.data
    if x.ndim < 1:
        raise RankError("softmax_rows needs at least rank 1")
    row_max = x.max(axis=-1)
    bad = np.isneginf(row_max)
    if bad.any():
        idx = tuple(int(v) for v in np.argwhere(bad)[0])
        raise DegenerateRowError(idx, f"softmax row {idx} has no finite entries (fully masked)")
    e = np.exp(x - row_max[..., None])
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s)

    def bwd(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _trace(out, (a,), bwd)


def log_softmax_rows(a: Tensor) -> Tensor:
    """Row-wise log-softmax along the last axis (finite inputs only)."""
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True))
    y = x - lse
    out = Tensor(y)

    def bwd(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _trace(out, (a,), bwd)


def rotate_pairs(a: Tensor) -> Tensor:
    """Rotate each (even, odd) lane pair by +90 degrees: (x, y) -> (-y, x)."""
    if a.shape[-1] % 2 != 0:
        raise ShapeError(f"rotate_pairs needs an even last axis, got {a.shape}")
    x = a.data
    y = np.empty_like(x)
    y[..., 0::2] = -x[..., 1::2]
    y[..., 1::2] = x[..., 0::2]
    out = Tensor(y)

    def bwd(g):
        d = np.empty_like(g)
        d[..., 0::2] = g[..., 1::2]
        d[..., 1::2] = -g[..., 0::2]
        return (d,)

    return _trace(out, (a,), bwd)


def extract_patches(a: Tensor, patch: int) -> Tensor:
    """Rearrange [..., C, H, W] into [..., (H/p)*(W/p), C*p*p] patch rows.

    Patches are taken in row-major grid order; each patch vector is the
    row-major flattening of its (C, p, p) block.
    """
    x = a.data
    if x.ndim < 3:
        raise RankError(f"extract_patches needs [..., C, H, W], got shape {a.shape}")
    c, h, w = x.shape[-3:]
    if h % patch != 0 or w % patch != 0:
        raise ShapeError(f"image dims {h}x{w} not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    lead = x.shape[:-3]
    nl = len(lead)
    z = x.reshape(lead + (c, gh, patch, gw, patch))
    perm = tuple(range(nl)) + (nl + 1, nl + 3, nl + 0, nl + 2, nl + 4)
    out_arr = np.ascontiguousarray(z.transpose(perm)).reshape(lead + (gh * gw, c * patch * patch))
    out = Tensor(out_arr)
    inv = tuple(np.argsort(perm))

    def bwd(g):
        gz = g.reshape(lead + (gh, gw, c, patch, patch)).transpose(inv)
        return (np.ascontiguousarray(gz).reshape(x.shape),)

    return _trace(out, (a,), bwd)
