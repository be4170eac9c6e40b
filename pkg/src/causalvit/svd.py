"""Singular values of small dense matrices via one-sided Jacobi rotations.

One-sided Jacobi orthogonalizes matrix columns in place with plane
rotations; on convergence the column norms are the singular values.
It is unconditionally convergent and accurate for the matrix sizes this
package analyzes (attention maps up to a few hundred rows), which is
worth more here than speed. Sweeps use a round-robin pairing so each
round rotates disjoint column pairs in one vectorized step.
"""
from __future__ import annotations

import numpy as np

from .tensor import Tensor

MAX_SWEEPS = 100
OFF_DIAG_TOL = 1e-12


class ConvergenceError(RuntimeError):
    """Jacobi sweeps hit the iteration cap before the off-diagonal residual fell below tolerance."""

    def __init__(self, residual: float, sweeps: int):
        super().__init__(f"no convergence after {sweeps} sweeps (off-diagonal residual {residual:.3e})")
        self.residual = residual
        self.sweeps = sweeps


def _round_robin_pairs(n: int):
    """All-pairs schedule: n-1 (or n) rounds of disjoint column pairs."""
    slots = list(range(n)) + ([-1] if n % 2 else [])
    m = len(slots)
    for _ in range(m - 1):
        ii, jj = [], []
        for k in range(m // 2):
            a, b = slots[k], slots[m - 1 - k]
            if a != -1 and b != -1:
                ii.append(a)
                jj.append(b)
        yield np.array(ii), np.array(jj)
        slots = [slots[0]] + [slots[-1]] + slots[1:-1]


def svd_singular_values(a, max_sweeps: int = MAX_SWEEPS) -> np.ndarray:
    """Descending nonnegative singular values of a real matrix.

    Accepts a Tensor or array of shape [m, n] and returns min(m, n)
    float64 values. sqrt(sum(s**2)) equals the Frobenius norm of the
    input up to rounding. Raises ConvergenceError if the off-diagonal
    Gram residual does not fall below OFF_DIAG_TOL (relative to the
    squared Frobenius norm, the natural scale of column dot products)
    within ``max_sweeps``.
    """
    arr = a.data if isinstance(a, Tensor) else np.asarray(a)
    if arr.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("matrix has non-finite entries")
    work = np.array(arr, dtype=np.float64)
    if work.shape[0] < work.shape[1]:
        work = work.T.copy()
    n = work.shape[1]
    fro2 = float((work * work).sum())
    if fro2 == 0.0 or n == 1:
        s = np.sqrt((work * work).sum(axis=0))
        return np.sort(s)[::-1]
    tol = OFF_DIAG_TOL * fro2

    residual = np.inf
    for _ in range(max_sweeps):
        residual = 0.0
        for ii, jj in _round_robin_pairs(n):
            ui = work[:, ii]
            uj = work[:, jj]
            aa = np.einsum("ij,ij->j", ui, ui)
            bb = np.einsum("ij,ij->j", uj, uj)
            cc = np.einsum("ij,ij->j", ui, uj)
            residual = max(residual, float(np.abs(cc).max()))
            rot = np.abs(cc) > 1e-300
            if not rot.any():
                continue
            zeta = (bb[rot] - aa[rot]) / (2.0 * cc[rot])
            t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            cs = 1.0 / np.sqrt(1.0 + t * t)
            sn = cs * t
            ui_r = ui[:, rot]
            uj_r = uj[:, rot]
            work[:, ii[rot]] = cs * ui_r - sn * uj_r
            work[:, jj[rot]] = sn * ui_r + cs * uj_r
        if residual <= tol:
            break
    else:
        raise ConvergenceError(residual / fro2, max_sweeps)

    s = np.sqrt((work * work).sum(axis=0))
    return np.sort(s)[::-1]
