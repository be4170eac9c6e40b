"""Supervised training: soft-mask schedule, AdamW, warmup+cosine learning
rate, label smoothing, and mixup/cutmix augmentation.

The soft-mask coefficient alpha is updated once per epoch. While
alpha > 0 the blocks run with the multiplicative soft mask; from the
cutoff epoch on they switch to the additive causal mask, which is also
what inference uses. That switch is what produces the characteristic
loss spike at the cutoff epoch.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

from . import tensor as T
from .attention import CAUSAL, AttentionCollapseError, MaskKind, soft
from .model import ClsPlacement, Model, forward, save_checkpoint
from .tensor import DegenerateRowError, GradTape, Tensor, backward


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


class Scheme(Enum):
    LINEAR = "linear"
    CONSTANT = "constant"


@dataclass(frozen=True)
class SoftMaskSchedule:
    """Trajectory of the soft-mask coefficient alpha over epochs.

    Linear decays 1 -> 0 across the cutoff span; constant holds alpha0
    until the cutoff epoch and then drops to 0. cutoff_epochs = 0 means
    purely causal training from the start.
    """

    scheme: Scheme = Scheme.CONSTANT
    cutoff_epochs: int = 0
    alpha0: float = 1.0

    def __post_init__(self):
        if self.cutoff_epochs < 0:
            raise ValueError(f"cutoff_epochs must be >= 0, got {self.cutoff_epochs}")
        if not (0.0 <= self.alpha0 <= 1.0):
            raise ValueError(f"alpha0 must lie in [0, 1], got {self.alpha0}")


def alpha_at(s: SoftMaskSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    if epoch >= s.cutoff_epochs:
        return 0.0
    if s.scheme is Scheme.LINEAR:
        return max(0.0, 1.0 - epoch / s.cutoff_epochs)
    return s.alpha0


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup to base_lr, then half-cosine decay to 0."""

    base_lr: float
    warmup_epochs: float
    total_epochs: float


def lr_at(s: LrSchedule, fractional_epoch: float) -> float:
    t = fractional_epoch
    if t < 0 or t > s.total_epochs:
        raise ValueError(f"fractional_epoch {t} outside [0, {s.total_epochs}]")
    if s.warmup_epochs > 0 and t < s.warmup_epochs:
        return s.base_lr * t / s.warmup_epochs
    span = s.total_epochs - s.warmup_epochs
    if span <= 0:
        return s.base_lr
    progress = (t - s.warmup_epochs) / span
    return s.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int
    lr: LrSchedule
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    label_smoothing: float = 0.1
    mixup_alpha: float = 0.0
    cutmix_alpha: float = 0.0
    drop_path_rate: float = 0.0
    seed: int = 0
    softmask: SoftMaskSchedule = field(default_factory=SoftMaskSchedule)


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    out = np.zeros((len(labels), num_classes), dtype=dtype)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def cross_entropy_smoothed(logits: Tensor, targets: Tensor, smoothing: float = 0.0) -> Tensor:
    """Mean cross-entropy against targets mixed with uniform mass.

    Targets are soft rows summing to 1 (mixup may have blended them);
    smoothing s replaces them with (1-s)*t + s/K.
    """
    b, k = logits.shape
    if targets.shape != (b, k):
        raise T.ShapeError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    mixed = targets * (1.0 - smoothing) + (smoothing / k)
    return (mixed * T.log_softmax_rows(logits)).sum() * (-1.0 / b)


def mixup(images: np.ndarray, labels: np.ndarray, alpha: float, rng: np.random.Generator):
    """Convex blend of the batch with a shuffled pairing; lam ~ Beta(alpha, alpha).

    ``labels`` are one-hot/soft rows [B, K]. Returns (images, labels, lam).
    """
    if alpha <= 0:
        raise ValueError(f"mixup needs alpha > 0, got {alpha}")
    lam = float(rng.beta(alpha, alpha))
    perm = rng.permutation(len(images))
    mixed = lam * images + (1.0 - lam) * images[perm]
    mixed_labels = lam * labels + (1.0 - lam) * labels[perm]
    return mixed.astype(images.dtype), mixed_labels.astype(labels.dtype), lam


def cutmix(images: np.ndarray, labels: np.ndarray, alpha: float, rng: np.random.Generator):
    """Paste a random box from a shuffled pairing; labels blend by realized area.

    Returns (images, labels, lam) where lam = 1 - box_area / image_area
    exactly. A degenerate (empty) box leaves the batch unchanged.
    """
    if alpha <= 0:
        raise ValueError(f"cutmix needs alpha > 0, got {alpha}")
    lam = float(rng.beta(alpha, alpha))
    h, w = images.shape[-2:]
    cut = math.sqrt(1.0 - lam)
    ch, cw = int(round(h * cut)), int(round(w * cut))
    cy, cx = int(rng.integers(h)), int(rng.integers(w))
    y0, y1 = max(0, cy - ch // 2), min(h, cy + (ch + 1) // 2)
    x0, x1 = max(0, cx - cw // 2), min(w, cx + (cw + 1) // 2)
    perm = rng.permutation(len(images))
    area = (y1 - y0) * (x1 - x0)
    if area <= 0:
        return images, labels, 1.0
    out = images.copy()
    out[:, :, y0:y1, x0:x1] = images[perm][:, :, y0:y1, x0:x1]
    lam_real = 1.0 - area / (h * w)
    mixed_labels = lam_real * labels + (1.0 - lam_real) * labels[perm]
    return out, mixed_labels.astype(labels.dtype), lam_real


ADAM_EPS = 1e-8


def adamw_step(
    param: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    t: int,
    lr: float,
    weight_decay: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = ADAM_EPS,
) -> None:
    """One in-place AdamW update with decoupled weight decay.

    Decay multiplies the parameter by (1 - lr*wd) independently of the
    adaptive step, so wd=0 reproduces plain Adam exactly.
    """
    b1, b2 = betas
    if weight_decay:
        param -= lr * weight_decay * param
    m += (1.0 - b1) * (grad - m)
    v += (1.0 - b2) * (grad * grad - v)
    m_hat = m / (1.0 - b1 ** t)
    v_hat = v / (1.0 - b2 ** t)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


class AdamW:
    """Optimizer state over a named parameter list; lr is passed per step."""

    def __init__(self, params: list[tuple[str, Tensor]], weight_decay: float, betas=(0.9, 0.999), eps=ADAM_EPS):
        self.params = params
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.state = {name: (np.zeros_like(p.data), np.zeros_like(p.data)) for name, p in params}

    def step(self, lr: float) -> None:
        self.t += 1
        for name, p in self.params:
            if p.grad is None:
                continue
            m, v = self.state[name]
            adamw_step(p.data, p.grad, m, v, self.t, lr, self.weight_decay, self.betas, self.eps)

    def zero_grads(self) -> None:
        for _, p in self.params:
            p.grad = None


@dataclass
class EpochMetrics:
    epoch: int
    alpha: float
    lr: float
    train_loss: float
    test_loss: float
    test_acc: float


METRICS_HEADER = "epoch,alpha,lr,train_loss,test_loss,test_acc"


def metrics_to_csv(history: list[EpochMetrics]) -> str:
    lines = [METRICS_HEADER]
    for m in history:
        lines.append(
            f"{m.epoch},{m.alpha:.6g},{m.lr:.6g},{m.train_loss:.6g},{m.test_loss:.6g},{m.test_acc:.6g}"
        )
    return "\n".join(lines) + "\n"


def evaluate(model: Model, images: np.ndarray, labels: np.ndarray, batch_size: int = 256, kind=None):
    """Untracked forward over a split: (mean CE loss, accuracy, confidences, correct)."""
    n = len(images)
    losses, confs, correct = [], [], []
    for start in range(0, n, batch_size):
        xb = Tensor(images[start : start + batch_size])
        yb = labels[start : start + batch_size]
        logits = forward(model, xb, kind=kind)
        targets = Tensor(one_hot(yb, model.config.num_classes, dtype=logits.dtype.type))
        losses.append(cross_entropy_smoothed(logits, targets, 0.0).item() * len(yb))
        z = logits.data - logits.data.max(axis=1, keepdims=True)
        probs = np.exp(z)
        probs /= probs.sum(axis=1, keepdims=True)
        pred = probs.argmax(axis=1)
        confs.append(probs.max(axis=1))
        correct.append(pred == yb)
    confs = np.concatenate(confs)
    correct = np.concatenate(correct)
    return float(np.sum(losses) / n), float(correct.mean()), confs, correct


def _drop_path_masks(rng, rate: float, depth: int, batch: int, dtype):
    """Per-sample residual keep masks, rate scaled linearly with depth."""
    if rate <= 0 or depth == 0:
        return None
    masks = []
    for i in range(depth):
        p = rate * i / max(1, depth - 1)
        pair = []
        for _ in range(2):
            keep = (rng.random(batch) >= p).astype(dtype)
            scale = keep / (1.0 - p) if p > 0 else keep
            pair.append(scale.reshape(batch, 1, 1))
        masks.append((pair[0], pair[1]))
    return masks


def train(
    model: Model,
    train_images: np.ndarray,
    train_labels: np.ndarray,
    test_images: np.ndarray,
    test_labels: np.ndarray,
    cfg: TrainConfig,
    out_dir: str | None = None,
    log: Callable[[str], None] | None = None,
) -> list[EpochMetrics]:
    """Run the full schedule and return per-epoch metrics.

    Each epoch sets the mask to soft(alpha) while alpha > 0 and to the
    additive causal mask afterwards. Deterministic under cfg.seed. On a
    non-finite loss the last completed epoch's checkpoint is written (if
    out_dir is given) and DivergenceError is raised.
    """
    say = log if log is not None else (lambda s: None)
    rng = np.random.default_rng(cfg.seed)
    n = len(train_images)
    k = model.config.num_classes
    opt = AdamW(model.parameters(), cfg.weight_decay, cfg.betas)
    history: list[EpochMetrics] = []
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        # refreshed after every completed epoch; never overwritten on divergence
        save_checkpoint(model, os.path.join(out_dir, "last_good.ckpt"), 0)

    base_kind = model.config.mask_kind_at_inference
    for epoch in range(cfg.epochs):
        alpha = alpha_at(cfg.softmask, epoch)
        kind: MaskKind = soft(alpha) if alpha > 0 else base_kind
        if model.config.cls_placement is ClsPlacement.FRONT and kind == CAUSAL:
            say(
                "warning: attention collapse configuration (front class token + causal mask): "
                "the class token reads only itself and image gradients are zero"
            )
        perm = rng.permutation(n)
        steps = max(1, math.ceil(n / cfg.batch_size))
        loss_sum = 0.0
        lr = 0.0
        for step in range(steps):
            idx = perm[step * cfg.batch_size : (step + 1) * cfg.batch_size]
            if len(idx) == 0:
                continue
            xb = train_images[idx]
            yb = one_hot(train_labels[idx], k, dtype=xb.dtype)
            aug = [a for a in ("mixup", "cutmix") if getattr(cfg, f"{a}_alpha") > 0]
            if aug:
                choice = aug[0] if len(aug) == 1 else aug[int(rng.integers(2))]
                fn = mixup if choice == "mixup" else cutmix
                xb, yb, _ = fn(xb, yb, getattr(cfg, f"{choice}_alpha"), rng)
            lr = lr_at(cfg.lr, epoch + step / steps)
            masks = _drop_path_masks(rng, cfg.drop_path_rate, model.config.depth, len(idx), xb.dtype)
            with GradTape():
                try:
                    logits = forward(model, Tensor(xb), kind=kind, drop_masks=masks)
                    loss = cross_entropy_smoothed(logits, Tensor(yb), cfg.label_smoothing)
                    loss_val = loss.item()
                except (AttentionCollapseError, DegenerateRowError):
                    # a degenerate softmax row with non-finite parameters is
                    # an optimizer blow-up, not a mask problem
                    if any(not np.isfinite(p.data).all() for _, p in model.parameters()):
                        loss_val = float("nan")
                    else:
                        raise
                if not math.isfinite(loss_val):
                    raise DivergenceError(f"non-finite loss {loss_val} at epoch {epoch} step {step}")
                backward(loss, release_tape=True)
            opt.step(lr)
            opt.zero_grads()
            loss_sum += loss_val * len(idx)

        test_loss, test_acc, _, _ = evaluate(model, test_images, test_labels, cfg.batch_size)
        metrics = EpochMetrics(
            epoch=epoch,
            alpha=alpha,
            lr=lr,
            train_loss=loss_sum / n,
            test_loss=test_loss,
            test_acc=test_acc,
        )
        history.append(metrics)
        say(
            f"epoch {epoch}: alpha={alpha:.3f} lr={lr:.3e} "
            f"train_loss={metrics.train_loss:.4f} test_loss={test_loss:.4f} test_acc={test_acc:.4f}"
        )
        if out_dir:
            _atomic_write(os.path.join(out_dir, "metrics.csv"), metrics_to_csv(history))
            save_checkpoint(model, os.path.join(out_dir, "last_good.ckpt"), epoch + 1)
    return history


def _atomic_write(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(text)
    os.replace(tmp, path)
