"""Non-attention building blocks: patch embedding, RMSNorm, SwiGLU,
rotary and learnable positional embeddings.

All forwards are pure functions over value-semantic tensors and are
fully traced for autodiff. Parameter containers are plain dataclasses.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

RMSNORM_EPS = 1e-6
ROPE_BASE = 10000.0
INIT_STD = 0.2


def trunc_normal(shape, std: float, rng: np.random.Generator, dtype=np.float32, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) samples redrawn until they fall inside [-bound, bound]."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > bound
    return out.astype(dtype)


@dataclass
class PatchEmbed:
    """Linear projection of flattened non-overlapping image patches."""

    patch_size: int
    in_channels: int
    embed_dim: int
    projection: Tensor  # [patch_size^2 * in_channels, embed_dim]
    bias: Tensor  # [embed_dim]


def patchify(image: Tensor, pe: PatchEmbed) -> Tensor:
    """[..., C, H, W] -> [..., N_img, d] tokens, patches in row-major grid order."""
    c = image.shape[-3]
    if c != pe.in_channels:
        raise ShapeError(f"expected {pe.in_channels} channels, got {c}")
    flat = T.extract_patches(image, pe.patch_size)
    return T.matmul(flat, pe.projection) + pe.bias


@dataclass
class RMSNormParams:
    """Scale-only root-mean-square normalization; no shift term exists."""

    gamma: Tensor  # [d]
    eps: float = RMSNORM_EPS


def rmsnorm(x: Tensor, p: RMSNormParams) -> Tensor:
    """Per-row x / sqrt(mean(x^2) + eps), scaled by gamma."""
    d = x.shape[-1]
    if p.gamma.shape != (d,):
        raise ShapeError(f"gamma shape {p.gamma.shape} does not match feature dim {d}")
    ms = (x * x).sum(axis=-1, keepdims=True) * (1.0 / d)
    inv = (ms + p.eps) ** -0.5
    return x * inv * p.gamma


def swiglu_hidden(d: int) -> int:
    """Hidden width floor(8d/3) rounded up to a multiple of 8.

    Keeps the three-matrix gated FFN at the same parameter count as a
    plain MLP with 4d hidden units (3*d*(8d/3) == 2*d*4d).
    """
    return 8 * -(-(8 * d // 3) // 8)


@dataclass
class SwiGLUParams:
    """Gated feed-forward weights; no bias terms."""

    w_gate: Tensor  # [d, h]
    w_up: Tensor  # [d, h]
    w_down: Tensor  # [h, d]


def swiglu(x: Tensor, p: SwiGLUParams) -> Tensor:
    """(SiLU(x @ w_gate) * (x @ w_up)) @ w_down."""
    return T.matmul(T.silu(T.matmul(x, p.w_gate)) * T.matmul(x, p.w_up), p.w_down)


@dataclass
class RoPECache:
    """Precomputed rotation tables: row m holds angles m * base^(-2i/head_dim)."""

    cos: np.ndarray  # [max_positions, head_dim // 2]
    sin: np.ndarray  # [max_positions, head_dim // 2]
    base: float = ROPE_BASE

    @property
    def max_positions(self) -> int:
        return self.cos.shape[0]

    @property
    def head_dim(self) -> int:
        return 2 * self.cos.shape[1]


def build_rope_cache(max_positions: int, head_dim: int, base: float = ROPE_BASE, dtype=np.float32) -> RoPECache:
    if head_dim % 2 != 0:
        raise ShapeError(f"rotary embedding needs an even head_dim, got {head_dim}")
    inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    angles = np.arange(max_positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    return RoPECache(cos=np.cos(angles).astype(dtype), sin=np.sin(angles).astype(dtype), base=base)


def apply_rope(qk: Tensor, positions, cache: RoPECache) -> Tensor:
    """Rotate consecutive dimension pairs of each token by its position angle.

    ``qk`` is [..., N, head_dim]; ``positions`` gives the N position
    indices (defaults handled by callers). Rotations preserve norms, and
    dot products of rotated vectors depend only on relative position.
    """
    pos = np.asarray(positions, dtype=np.int64)
    if qk.shape[-1] != cache.head_dim:
        raise ShapeError(f"head_dim {qk.shape[-1]} does not match cache head_dim {cache.head_dim}")
    if pos.ndim != 1 or pos.shape[0] != qk.shape[-2]:
        raise ShapeError(f"positions length {pos.shape} does not match token count {qk.shape[-2]}")
    if pos.min() < 0 or pos.max() >= cache.max_positions:
        raise ShapeError(f"positions exceed cache range [0, {cache.max_positions})")
    cos = np.repeat(cache.cos[pos], 2, axis=-1).astype(qk.dtype)
    sin = np.repeat(cache.sin[pos], 2, axis=-1).astype(qk.dtype)
    return qk * Tensor(cos) + T.rotate_pairs(qk) * Tensor(sin)


@dataclass
class LPETable:
    """Learnable positional embedding, one row per token (class token included)."""

    table: Tensor  # [N_img + 1, d]


def add_lpe(tokens: Tensor, lpe: LPETable) -> Tensor:
    """Elementwise sum, applied exactly once before the first block."""
    if tokens.shape[-2:] != lpe.table.shape:
        raise ShapeError(f"token shape {tokens.shape} does not match positional table {lpe.table.shape}")
    return tokens + lpe.table
