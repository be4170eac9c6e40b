"""Central finite-difference oracle for gradient verification."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import GradTape, RankError, Tensor, backward


class OracleUnusableError(RuntimeError):
    """The function under test is not deterministic, so the oracle is void."""


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must map ``x`` to a scalar tensor, deterministically and without
    mutating ``x``. The analytic gradient comes from one taped backward
    pass; the reference is (f(x+eps*e_i) - f(x-eps*e_i)) / (2*eps) per
    coordinate. Relative error is |analytic - cd| / max(|analytic|, |cd|,
    1e-8). ``max_coords`` limits the check to a deterministic random
    subset of coordinates (all coordinates when None).

    Use float64 inputs; at float32 the difference quotient itself drowns
    in rounding error.
    """
    y1 = f(x)
    y2 = f(x)
    if y1.data.ndim != 0:
        raise RankError(f"f must return a scalar, got shape {y1.shape}")
    if y1.data.tobytes() != y2.data.tobytes():
        raise OracleUnusableError("f returned different values for identical inputs")

    saved_flag, saved_grad = x.requires_grad, x.grad
    x.requires_grad = True
    x.grad = None
    try:
        with GradTape():
            backward(f(x))
        analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)
    finally:
        x.requires_grad = saved_flag
        x.grad = saved_grad

    coords = [tuple(int(v) for v in idx) for idx in np.ndindex(*x.shape)] if x.ndim else [()]
    if max_coords is not None and max_coords < len(coords):
        gen = rng if rng is not None else np.random.default_rng(0)
        pick = gen.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    worst = 0.0
    for idx in coords:
        orig = x.data[idx]
        x.data[idx] = orig + eps
        fp = f(x).item()
        x.data[idx] = orig - eps
        fm = f(x).item()
        x.data[idx] = orig
        cd = (fp - fm) / (2.0 * eps)
        an = float(analytic[idx])
        rel = abs(an - cd) / max(abs(an), abs(cd), 1e-8)
        worst = max(worst, rel)
    return worst
