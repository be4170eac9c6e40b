"""Multi-head self-attention with four mask regimes.

Additive masks (bidirectional, causal, modified causal) are added to the
pre-softmax scores, with -inf marking blocked pairs. The soft mask is
multiplicative and applied AFTER the softmax without renormalization, so
its attention rows sum to less than one whenever alpha < 1; at alpha = 1
it reproduces the bidirectional forward bit for bit.

Captured attention matrices can be written to a small binary dump format
(magic "ATNR") consumed by the analysis module.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import RoPECache, apply_rope
from .tensor import NEG_INF, DegenerateRowError, ShapeError, Tensor


class AttentionCollapseError(RuntimeError):
    """An attention row could read nothing: every key was masked out."""

    def __init__(self, row_index: tuple, message: str):
        super().__init__(message)
        self.row_index = row_index


class FormatError(ValueError):
    """A binary file does not match its declared format."""


@dataclass(frozen=True)
class MaskKind:
    """Tagged mask choice: bidirectional | causal | modified_causal | soft(alpha)."""

    tag: str
    alpha: float | None = None

    def __post_init__(self):
        if self.tag not in ("bidirectional", "causal", "modified_causal", "soft"):
            raise ValueError(f"unknown mask tag {self.tag!r}")
        if self.tag == "soft":
            if self.alpha is None or not (0.0 <= self.alpha <= 1.0):
                raise ValueError(f"soft mask alpha must lie in [0, 1], got {self.alpha}")
        elif self.alpha is not None:
            raise ValueError(f"{self.tag} mask takes no alpha")

    @property
    def is_soft(self) -> bool:
        return self.tag == "soft"

    def __str__(self) -> str:
        return f"soft({self.alpha:g})" if self.is_soft else self.tag


BIDIRECTIONAL = MaskKind("bidirectional")
CAUSAL = MaskKind("causal")
MODIFIED_CAUSAL = MaskKind("modified_causal")


def soft(alpha: float) -> MaskKind:
    return MaskKind("soft", float(alpha))


def mask_kind_from_str(s: str) -> MaskKind:
    s = s.strip().lower()
    if s.startswith("soft(") and s.endswith(")"):
        return soft(float(s[5:-1]))
    return MaskKind(s)


def build_additive_mask(kind: MaskKind, n: int, dtype=np.float32) -> Tensor:
    """[n, n] additive mask: 0 where reading is allowed, -inf where blocked."""
    if kind.is_soft:
        raise ValueError("soft masks are multiplicative; use build_soft_mask")
    if n < 1:
        raise ValueError(f"mask size must be >= 1, got {n}")
    m = np.zeros((n, n), dtype=dtype)
    if kind.tag in ("causal", "modified_causal"):
        m[np.triu_indices(n, k=1)] = NEG_INF
        if kind.tag == "modified_causal":
            m[0, :] = 0.0
    return Tensor(m)


def build_soft_mask(alpha: float, n: int, dtype=np.float32) -> Tensor:
    """[n, n] multiplicative mask: 1 on and below the diagonal, alpha above."""
    if not (0.0 <= alpha <= 1.0):
        raise ValueError(f"soft mask alpha must lie in [0, 1], got {alpha}")
    if n < 1:
        raise ValueError(f"mask size must be >= 1, got {n}")
    m = np.tril(np.ones((n, n), dtype=dtype))
    m += alpha * np.triu(np.ones((n, n), dtype=dtype), k=1)
    return Tensor(m)


@dataclass
class AttentionParams:
    """Per-block projection weights; no biases."""

    w_q: Tensor  # [d, d]
    w_k: Tensor  # [d, d]
    w_v: Tensor  # [d, d]
    w_o: Tensor  # [d, d]
    num_heads: int

    def __post_init__(self):
        d = self.w_q.shape[0]
        if d % self.num_heads != 0:
            raise ShapeError(f"embed dim {d} not divisible by {self.num_heads} heads")

    @property
    def embed_dim(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


def _split_heads(x: Tensor, num_heads: int) -> Tensor:
    b, n, d = x.shape
    return T.permute(x.reshape(b, n, num_heads, d // num_heads), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, hd = x.shape
    return T.permute(x, (0, 2, 1, 3)).reshape(b, n, h * hd)


def mhsa_forward(
    x: Tensor,
    p: AttentionParams,
    kind: MaskKind,
    rope: RoPECache | None = None,
    positions=None,
    capture: bool = False,
) -> tuple[Tensor, np.ndarray | None]:
    """Multi-head self-attention over [N, d] or [B, N, d] tokens.

    Per head: scores = rotate(q) @ rotate(k)^T / sqrt(head_dim). Additive
    kinds apply softmax(scores + mask); soft(alpha) applies
    softmax(scores) * S with no renormalization. Heads are concatenated
    and projected by w_o; residual connections live in the model.

    With ``capture`` the post-softmax (post-soft-mask) matrices are also
    returned as a float32 array of shape [B, H, N, N].
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
    if x.ndim != 3 or x.shape[-1] != p.embed_dim:
        raise ShapeError(f"expected tokens [B, N, {p.embed_dim}], got {x.shape}")
    n = x.shape[1]

    q = _split_heads(T.matmul(x, p.w_q), p.num_heads)
    k = _split_heads(T.matmul(x, p.w_k), p.num_heads)
    v = _split_heads(T.matmul(x, p.w_v), p.num_heads)
    if rope is not None:
        pos = np.arange(n) if positions is None else positions
        q = apply_rope(q, pos, rope)
        k = apply_rope(k, pos, rope)

    scores = T.matmul(q, T.transpose(k)) * (1.0 / np.sqrt(p.head_dim))
    try:
        if kind.is_soft:
            attn = T.softmax_rows(scores) * build_soft_mask(kind.alpha, n, x.dtype)
        else:
            attn = T.softmax_rows(scores + build_additive_mask(kind, n, x.dtype))
    except DegenerateRowError as e:
        raise AttentionCollapseError(
            e.row_index, f"attention collapse: row {e.row_index} has no visible keys under mask {kind}"
        ) from e

    out = T.matmul(_merge_heads(T.matmul(attn, v)), p.w_o)
    if squeeze:
        out = out.reshape(*out.shape[1:])
    captured = attn.data.astype(np.float32) if capture else None
    return out, captured


@dataclass
class AttentionRecord:
    """One captured post-softmax attention matrix for spectral analysis."""

    layer: int
    head: int
    matrix: np.ndarray  # [N, N] float32


DUMP_MAGIC = b"ATNR"
DUMP_VERSION = 1


def write_attention_dump(record: AttentionRecord, path: str) -> None:
    """Binary dump: magic, version u32, layer u32, head u32, n u32, f32 data (little-endian)."""
    m = np.ascontiguousarray(record.matrix, dtype="<f4")
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"attention record matrix must be square, got {m.shape}")
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(DUMP_MAGIC)
        f.write(struct.pack("<IIII", DUMP_VERSION, record.layer, record.head, m.shape[0]))
        f.write(m.tobytes())
    os.replace(tmp, path)


def read_attention_dump(path: str) -> AttentionRecord:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 20 or blob[:4] != DUMP_MAGIC:
        raise FormatError(f"{path}: not an attention dump (bad magic)")
    version, layer, head, n = struct.unpack("<IIII", blob[4:20])
    if version != DUMP_VERSION:
        raise FormatError(f"{path}: unsupported dump version {version}")
    expected = 20 + 4 * n * n
    if len(blob) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for n={n}, got {len(blob)}")
    matrix = np.frombuffer(blob[20:], dtype="<f4").reshape(n, n).copy()
    return AttentionRecord(layer=layer, head=head, matrix=matrix)
