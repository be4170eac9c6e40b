"""Model assembly: pre-norm residual blocks, class-token placement,
classifier head, configuration presets, and checkpoint IO.

The class token can sit in front of the image tokens or after them.
Under a causal mask the front placement is the known failure mode: the
class token reads only itself, so image pixels get exactly zero
gradient through it. The post-sequence placement lets the class token
read every image token while keeping the mask causal.
"""
from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import tensor as T
from .attention import CAUSAL, AttentionParams, MaskKind, mask_kind_from_str, mhsa_forward
from .layers import (
    INIT_STD,
    LPETable,
    PatchEmbed,
    RMSNormParams,
    RoPECache,
    SwiGLUParams,
    add_lpe,
    build_rope_cache,
    patchify,
    rmsnorm,
    swiglu,
    swiglu_hidden,
    trunc_normal,
)
from .tensor import ShapeError, Tensor


class BuildError(ValueError):
    """A model configuration violates one of its constraints."""


class ClsPlacement(Enum):
    FRONT = "front"
    POST_SEQUENCE = "post_sequence"


@dataclass(frozen=True)
class ModelConfig:
    depth: int
    embed_dim: int
    num_heads: int
    patch_size: int
    image_size: int
    num_classes: int
    in_channels: int = 3
    cls_placement: ClsPlacement = ClsPlacement.POST_SEQUENCE
    mask_kind_at_inference: MaskKind = CAUSAL

    @property
    def n_img_tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def n_tokens(self) -> int:
        return self.n_img_tokens + 1

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    def validate(self) -> None:
        problems = []
        if self.depth < 0:
            problems.append(f"depth must be >= 0, got {self.depth}")
        if self.num_heads < 1 or self.embed_dim % self.num_heads != 0:
            problems.append(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        elif (self.embed_dim // self.num_heads) % 2 != 0:
            problems.append(f"head_dim {self.embed_dim // self.num_heads} must be even for rotary embedding")
        if self.patch_size < 1 or self.image_size % self.patch_size != 0:
            problems.append(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.in_channels < 1:
            problems.append(f"in_channels must be >= 1, got {self.in_channels}")
        if self.num_classes < 1:
            problems.append(f"num_classes must be >= 1, got {self.num_classes}")
        if problems:
            raise BuildError("; ".join(problems))


PRESETS: dict[str, ModelConfig] = {
    "micro": ModelConfig(depth=6, embed_dim=128, num_heads=4, patch_size=4, image_size=32, num_classes=10),
    "tiny": ModelConfig(depth=12, embed_dim=192, num_heads=3, patch_size=16, image_size=224, num_classes=1000),
    "small": ModelConfig(depth=12, embed_dim=384, num_heads=6, patch_size=16, image_size=224, num_classes=1000),
    "base": ModelConfig(depth=12, embed_dim=768, num_heads=12, patch_size=16, image_size=224, num_classes=1000),
    "large": ModelConfig(depth=24, embed_dim=1024, num_heads=16, patch_size=16, image_size=224, num_classes=1000),
}


def parameter_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Named shapes of every learnable parameter, in a fixed order."""
    d = config.embed_dim
    h = swiglu_hidden(d)
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("patch.projection", (config.patch_size ** 2 * config.in_channels, d)),
        ("patch.bias", (d,)),
        ("cls_token", (d,)),
        ("lpe.table", (config.n_tokens, d)),
    ]
    for i in range(config.depth):
        shapes += [
            (f"blocks.{i}.norm1.gamma", (d,)),
            (f"blocks.{i}.attn.w_q", (d, d)),
            (f"blocks.{i}.attn.w_k", (d, d)),
            (f"blocks.{i}.attn.w_v", (d, d)),
            (f"blocks.{i}.attn.w_o", (d, d)),
            (f"blocks.{i}.norm2.gamma", (d,)),
            (f"blocks.{i}.ffn.w_gate", (d, h)),
            (f"blocks.{i}.ffn.w_up", (d, h)),
            (f"blocks.{i}.ffn.w_down", (h, d)),
        ]
    shapes += [
        ("final_norm.gamma", (d,)),
        ("head.weight", (d, config.num_classes)),
        ("head.bias", (config.num_classes,)),
    ]
    return shapes


def param_count(config: ModelConfig) -> int:
    """Exact scalar count across all parameters, class token and head included."""
    config.validate()
    return int(sum(int(np.prod(s)) for _, s in parameter_shapes(config)))


@dataclass
class Block:
    norm1: RMSNormParams
    attn: AttentionParams
    norm2: RMSNormParams
    ffn: SwiGLUParams


class Model:
    """Decoder-style vision transformer with a single class-token readout."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor], dtype):
        self.config = config
        self.dtype = np.dtype(dtype)
        self._params = params
        self.patch = PatchEmbed(
            patch_size=config.patch_size,
            in_channels=config.in_channels,
            embed_dim=config.embed_dim,
            projection=params["patch.projection"],
            bias=params["patch.bias"],
        )
        self.cls_token = params["cls_token"]
        self.lpe = LPETable(table=params["lpe.table"])
        self.blocks = [
            Block(
                norm1=RMSNormParams(gamma=params[f"blocks.{i}.norm1.gamma"]),
                attn=AttentionParams(
                    w_q=params[f"blocks.{i}.attn.w_q"],
                    w_k=params[f"blocks.{i}.attn.w_k"],
                    w_v=params[f"blocks.{i}.attn.w_v"],
                    w_o=params[f"blocks.{i}.attn.w_o"],
                    num_heads=config.num_heads,
                ),
                norm2=RMSNormParams(gamma=params[f"blocks.{i}.norm2.gamma"]),
                ffn=SwiGLUParams(
                    w_gate=params[f"blocks.{i}.ffn.w_gate"],
                    w_up=params[f"blocks.{i}.ffn.w_up"],
                    w_down=params[f"blocks.{i}.ffn.w_down"],
                ),
            )
            for i in range(config.depth)
        ]
        self.final_norm = RMSNormParams(gamma=params["final_norm.gamma"])
        self.head_weight = params["head.weight"]
        self.head_bias = params["head.bias"]
        self.rope = build_rope_cache(config.n_tokens, config.head_dim, dtype=dtype)

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [(name, self._params[name]) for name, _ in parameter_shapes(self.config)]

    def zero_grads(self) -> None:
        for _, p in self.parameters():
            p.grad = None

    @property
    def cls_index(self) -> int:
        return 0 if self.config.cls_placement is ClsPlacement.FRONT else self.config.n_img_tokens


def build(config: ModelConfig, seed: int, dtype=np.float32) -> Model:
    """Deterministically initialized model: truncated-normal(std 0.2) weights,
    zero biases, unit normalization scales."""
    config.validate()
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in parameter_shapes(config):
        if name.endswith(".bias"):
            arr = np.zeros(shape, dtype=dtype)
        elif name.endswith(".gamma"):
            arr = np.ones(shape, dtype=dtype)
        else:
            arr = trunc_normal(shape, INIT_STD, rng, dtype=dtype)
        params[name] = Tensor(arr, requires_grad=True)
    return Model(config, params, dtype)


def insert_cls(tokens: Tensor, cls: Tensor, placement: ClsPlacement) -> Tensor:
    """Append (post-sequence) or prepend (front) the class token row."""
    d = tokens.shape[-1]
    if cls.shape != (d,):
        raise ShapeError(f"class token shape {cls.shape} does not match embed dim {d}")
    batched = tokens.ndim == 3
    row = cls.reshape(1, 1, d) if batched else cls.reshape(1, d)
    if batched:
        row = T.broadcast_to(row, (tokens.shape[0], 1, d))
    parts = [tokens, row] if placement is ClsPlacement.POST_SEQUENCE else [row, tokens]
    return T.concat(parts, axis=-2)


def forward(
    model: Model,
    images,
    kind: MaskKind | None = None,
    capture_layers=None,
    drop_masks: list[tuple[np.ndarray, np.ndarray]] | None = None,
):
    """Images [B, C, H, W] (or one [C, H, W]) to logits [B, num_classes].

    ``kind`` defaults to the configured inference mask. ``capture_layers``
    selects block indices whose post-softmax attention maps are returned
    as {layer: float32 [B, H, N, N]}; the return value is then
    (logits, captures). ``drop_masks`` carries per-block stochastic-depth
    keep masks ([B, 1, 1], already inverse-scaled) for the attention and
    feed-forward branches.
    """
    cfg = model.config
    if not isinstance(images, Tensor):
        images = Tensor(np.asarray(images, dtype=model.dtype))
    if images.ndim == 3:
        images = images.reshape(1, *images.shape)
    if images.ndim != 4 or images.shape[1:] != (cfg.in_channels, cfg.image_size, cfg.image_size):
        raise ShapeError(
            f"expected images [B, {cfg.in_channels}, {cfg.image_size}, {cfg.image_size}], got {images.shape}"
        )
    if images.dtype != model.dtype:
        raise ShapeError(f"image dtype {images.dtype} does not match model dtype {model.dtype}")
    kind = cfg.mask_kind_at_inference if kind is None else kind
    capture = set() if capture_layers is None else set(capture_layers)

    x = patchify(images, model.patch)
    x = insert_cls(x, model.cls_token, cfg.cls_placement)
    x = add_lpe(x, model.lpe)

    captures: dict[int, np.ndarray] = {}
    for i, block in enumerate(model.blocks):
        h, rec = mhsa_forward(rmsnorm(x, block.norm1), block.attn, kind, rope=model.rope, capture=i in capture)
        if rec is not None:
            captures[i] = rec
        if drop_masks is not None:
            h = h * Tensor(drop_masks[i][0])
        x = x + h
        f = swiglu(rmsnorm(x, block.norm2), block.ffn)
        if drop_masks is not None:
            f = f * Tensor(drop_masks[i][1])
        x = x + f

    x = rmsnorm(x, model.final_norm)
    b, _, d = x.shape
    cls_out = T.narrow(x, 1, model.cls_index, 1).reshape(b, d)
    logits = T.matmul(cls_out, model.head_weight) + model.head_bias
    return (logits, captures) if capture_layers is not None else logits


CKPT_MAGIC = b"ILMA"
CKPT_VERSION = 1


def _config_lines(config: ModelConfig, epoch: int) -> str:
    return "".join(
        f"{k}={v}\n"
        for k, v in [
            ("depth", config.depth),
            ("embed_dim", config.embed_dim),
            ("num_heads", config.num_heads),
            ("patch_size", config.patch_size),
            ("image_size", config.image_size),
            ("num_classes", config.num_classes),
            ("in_channels", config.in_channels),
            ("cls_placement", config.cls_placement.value),
            ("mask_kind_at_inference", config.mask_kind_at_inference),
            ("epoch", epoch),
        ]
    )


def _config_from_lines(text: str) -> tuple[ModelConfig, int]:
    kv = dict(line.split("=", 1) for line in text.splitlines() if line)
    config = ModelConfig(
        depth=int(kv["depth"]),
        embed_dim=int(kv["embed_dim"]),
        num_heads=int(kv["num_heads"]),
        patch_size=int(kv["patch_size"]),
        image_size=int(kv["image_size"]),
        num_classes=int(kv["num_classes"]),
        in_channels=int(kv["in_channels"]),
        cls_placement=ClsPlacement(kv["cls_placement"]),
        mask_kind_at_inference=mask_kind_from_str(kv["mask_kind_at_inference"]),
    )
    return config, int(kv["epoch"])


def save_checkpoint(model: Model, path: str, epoch: int = 0) -> None:
    """Versioned named-parameter map; round-trips bit-exactly for float32 models."""
    if model.dtype != np.float32:
        raise ValueError(f"checkpoints store float32 parameters; model dtype is {model.dtype}")
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    cfg_bytes = _config_lines(model.config, epoch).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg_bytes)))
    buf.write(cfg_bytes)
    params = model.parameters()
    buf.write(struct.pack("<I", len(params)))
    for name, p in params:
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", p.ndim))
        buf.write(struct.pack(f"<{p.ndim}I", *p.shape))
        buf.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path: str) -> tuple[Model, int]:
    from .attention import FormatError

    with open(path, "rb") as f:
        blob = f.read()
    view = memoryview(blob)
    if len(blob) < 8 or blob[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    try:
        (version,) = struct.unpack_from("<I", view, 4)
        if version != CKPT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        off = 8
        (cfg_len,) = struct.unpack_from("<I", view, off)
        off += 4
        config, epoch = _config_from_lines(bytes(view[off : off + cfg_len]).decode("utf-8"))
        off += cfg_len
        (n_params,) = struct.unpack_from("<I", view, off)
        off += 4
        expected = dict(parameter_shapes(config))
        if n_params != len(expected):
            raise FormatError(f"{path}: expected {len(expected)} parameters, header says {n_params}")
        params: dict[str, Tensor] = {}
        for _ in range(n_params):
            (name_len,) = struct.unpack_from("<I", view, off)
            off += 4
            name = bytes(view[off : off + name_len]).decode("utf-8")
            off += name_len
            (rank,) = struct.unpack_from("<I", view, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}I", view, off)
            off += 4 * rank
            if name not in expected or name in params:
                raise FormatError(f"{path}: unexpected or duplicate parameter {name!r}")
            if tuple(shape) != expected[name]:
                raise FormatError(f"{path}: parameter {name!r} has shape {shape}, expected {expected[name]}")
            count = int(np.prod(shape)) if rank else 1
            if off + 4 * count > len(blob):
                raise FormatError(f"{path}: truncated data for parameter {name!r}")
            arr = np.frombuffer(view, dtype="<f4", count=count, offset=off).reshape(shape).copy()
            off += 4 * count
            params[name] = Tensor(arr, requires_grad=True)
    except (struct.error, KeyError, UnicodeDecodeError) as e:
        raise FormatError(f"{path}: malformed checkpoint ({e})") from e
    if off != len(blob):
        raise FormatError(f"{path}: {len(blob) - off} trailing bytes after parameters")
    missing = set(expected) - set(params)
    if missing:
        raise FormatError(f"{path}: missing parameters {sorted(missing)}")
    return Model(config, params, np.float32), epoch
