"""Measurement instruments: attention-map spectral rank analysis, the
attention FLOPs model, and expected calibration error.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import BIDIRECTIONAL, CAUSAL, AttentionRecord, MaskKind, read_attention_dump
from .svd import svd_singular_values
from .tensor import Tensor


@dataclass
class RankSpectrum:
    """Sorted singular values and their cumulative normalized partial sums."""

    singular_values: np.ndarray  # descending, float64
    cumulative: np.ndarray  # c_k = sum_{i<=k} s_i / sum s_i, nondecreasing, ends at 1


def rank_spectrum(attn) -> RankSpectrum:
    """Spectrum of one attention matrix; cumulative sums normalize by sum(s),
    not sum(s^2)."""
    s = svd_singular_values(attn)
    total = s.sum()
    if total == 0.0:
        raise ValueError("zero matrix has no normalized spectrum")
    return RankSpectrum(singular_values=s, cumulative=np.cumsum(s) / total)


def effective_rank_index(spectrum: RankSpectrum, threshold: float = 0.8) -> int:
    """Smallest 1-based k whose cumulative normalized singular value reaches
    the threshold; a proxy for matrix rank."""
    if not (0.0 < threshold <= 1.0):
        raise ValueError(f"threshold must lie in (0, 1], got {threshold}")
    hits = np.nonzero(spectrum.cumulative >= threshold - 1e-15)[0]
    if len(hits) == 0:
        return len(spectrum.cumulative)
    return int(hits[0]) + 1


def attention_flops(n: int, d: int, kind: MaskKind) -> int:
    """Exact FLOP count of one self-attention over n tokens at width d.

    Bidirectional: 4nd^2 + 2n^2 d. Causal skips the masked score/value
    work: 4nd^2 + n^2 d + (floor(n^2/2) + 1) d. Equal only at n = 1.
    """
    if n < 1 or d < 1:
        raise ValueError(f"n and d must be >= 1, got n={n}, d={d}")
    if kind == BIDIRECTIONAL:
        return 4 * n * d * d + 2 * n * n * d
    if kind == CAUSAL:
        return 4 * n * d * d + n * n * d + (n * n // 2 + 1) * d
    raise ValueError(f"FLOPs model covers bidirectional and causal masks, not {kind}")


@dataclass
class CalibrationReport:
    """Equal-width confidence bins with per-bin accuracy/confidence and the
    resulting expected calibration error."""

    bin_edges: np.ndarray  # n_bins + 1 edges over [0, 1]
    bin_accuracy: np.ndarray
    bin_confidence: np.ndarray
    bin_count: np.ndarray
    ece: float


def ece(confidences, correct, n_bins: int = 15) -> CalibrationReport:
    """Bin-weighted mean absolute gap between accuracy and confidence.

    Bins are equal width over [0, 1]; a confidence c lands in bin
    min(floor(c * n_bins), n_bins - 1). Empty bins contribute 0.
    """
    conf = np.asarray(confidences, dtype=np.float64)
    corr = np.asarray(correct, dtype=np.float64)
    if conf.size == 0:
        raise ValueError("ece is undefined for empty input")
    if conf.min() < 0.0 or conf.max() > 1.0:
        raise ValueError("confidences must lie in [0, 1]")
    idx = np.minimum((conf * n_bins).astype(np.int64), n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    acc = np.zeros(n_bins)
    mean_conf = np.zeros(n_bins)
    nonzero = counts > 0
    acc[nonzero] = np.bincount(idx, weights=corr, minlength=n_bins)[nonzero] / counts[nonzero]
    mean_conf[nonzero] = np.bincount(idx, weights=conf, minlength=n_bins)[nonzero] / counts[nonzero]
    value = float(np.sum(counts / conf.size * np.abs(acc - mean_conf)))
    return CalibrationReport(
        bin_edges=np.linspace(0.0, 1.0, n_bins + 1),
        bin_accuracy=acc,
        bin_confidence=mean_conf,
        bin_count=counts,
        ece=value,
    )


def analyze_dump(path: str) -> tuple[int, int, RankSpectrum]:
    """Spectrum of one attention dump file: (layer, head, spectrum)."""
    rec = read_attention_dump(path)
    return rec.layer, rec.head, rank_spectrum(rec.matrix)


def analyze_dumps(paths, threshold: float = 0.8):
    """Group dumps by (layer, head), average their cumulative curves, and
    report the effective rank of each averaged curve.

    Returns (curves, summaries): curves maps (layer, head) -> averaged
    cumulative array; summaries is a sorted list of
    (layer, head, effective_rank) tuples.
    """
    groups: dict[tuple[int, int], list[np.ndarray]] = {}
    for path in paths:
        layer, head, spec = analyze_dump(path)
        groups.setdefault((layer, head), []).append(spec.cumulative)
    curves = {}
    summaries = []
    for key in sorted(groups):
        stack = np.stack(groups[key])
        mean_curve = stack.mean(axis=0)
        curves[key] = mean_curve
        rank = effective_rank_index(RankSpectrum(singular_values=np.array([]), cumulative=mean_curve), threshold)
        summaries.append((key[0], key[1], rank))
    return curves, summaries


def spectra_csv(curves: dict[tuple[int, int], np.ndarray]) -> str:
    lines = ["layer,head,k,cumulative"]
    for (layer, head) in sorted(curves):
        for k, c in enumerate(curves[(layer, head)], start=1):
            lines.append(f"{layer},{head},{k},{c:.9g}")
    return "\n".join(lines) + "\n"


def summary_csv(summaries, threshold: float = 0.8) -> str:
    lines = [f"layer,head,effective_rank_{threshold:g}"]
    for layer, head, rank in summaries:
        lines.append(f"{layer},{head},{rank}")
    return "\n".join(lines) + "\n"
