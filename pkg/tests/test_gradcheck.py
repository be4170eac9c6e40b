"""Finite-difference oracle and per-operation gradient verification."""
import numpy as np
import pytest

import causalvit as cv
from causalvit import tensor as T
from causalvit.gradcheck import OracleUnusableError, finite_diff_check
from causalvit.tensor import Tensor


def test_linear_function_is_exact():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    assert finite_diff_check(lambda t: t.sum(), x) <= 1e-9


def test_sum_of_squares():
    x = Tensor(np.array([1.0, 2.0]))
    assert finite_diff_check(lambda t: (t * t).sum(), x) <= 1e-8


def test_softmax_cross_entropy_logits():
    rng = np.random.default_rng(5)
    logits = Tensor(rng.normal(size=(4, 7)))
    target = Tensor(np.eye(7)[rng.integers(0, 7, size=4)])

    def f(t):
        return (target * T.log_softmax_rows(t)).sum() * -0.25

    assert finite_diff_check(f, logits) <= 1e-6


def test_nondeterministic_function_rejected():
    state = {"calls": 0}

    def f(t):
        state["calls"] += 1
        return (t * float(state["calls"])).sum()

    with pytest.raises(OracleUnusableError):
        finite_diff_check(f, Tensor([1.0, 2.0]))


def test_max_coords_subsample_matches_full():
    rng = np.random.default_rng(9)
    x = Tensor(rng.normal(size=(6, 6)))
    f = lambda t: (T.silu(t) * t).sum()
    assert finite_diff_check(f, x, max_coords=10) <= 1e-7


# one entry per differentiable primitive; shapes stay tiny so 100 seeded
# trials run in well under a second each
OPS = {
    "add_broadcast": lambda t: (t + Tensor(np.arange(3.0))).sum(),
    "sub": lambda t: (t - 0.5).sum(),
    "mul_broadcast": lambda t: (t * Tensor(np.arange(1.0, 4.0))).sum(),
    "neg": lambda t: (-t).sum(),
    "pow_square": lambda t: (t ** 2).sum(),
    "pow_inv_sqrt": lambda t: ((t * t + 1.0) ** -0.5).sum(),
    "matmul": lambda t: cv.matmul(t, Tensor(np.arange(12.0).reshape(3, 4) / 10)).sum(),
    "transpose": lambda t: (T.transpose(t) * Tensor(np.arange(6.0).reshape(3, 2))).sum(),
    "reshape": lambda t: (t.reshape(3, 2) ** 2).sum(),
    "broadcast_to": lambda t: (T.broadcast_to(t.reshape(1, 2, 3), (4, 2, 3)) ** 2).sum(),
    "reduce_sum_axis": lambda t: (t.sum(axis=0) ** 2).sum(),
    "mean": lambda t: (t.mean(axis=1) ** 2).sum(),
    "concat": lambda t: (T.concat([t, t * 2.0], axis=1) ** 2).sum(),
    "narrow": lambda t: (T.narrow(t, 1, 1, 2) ** 2).sum(),
    "silu": lambda t: T.silu(t).sum(),
    "softmax": lambda t: (cv.softmax_rows(t) * Tensor(np.arange(6.0).reshape(2, 3))).sum(),
    "log_softmax": lambda t: (T.log_softmax_rows(t) * Tensor(np.arange(6.0).reshape(2, 3))).sum(),
    "rotate_pairs": lambda t: (T.rotate_pairs(t.reshape(3, 2)) * Tensor(np.arange(6.0).reshape(3, 2))).sum(),
    "permute": lambda t: (T.permute(t.reshape(1, 2, 3), (2, 0, 1)) ** 2).sum(),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_primitive_gradients_match_finite_differences(name):
    f = OPS[name]
    for seed in range(100):
        x = Tensor(np.random.default_rng(seed).normal(size=(2, 3)))
        assert finite_diff_check(f, x) <= 1e-4, f"{name} failed at seed {seed}"
