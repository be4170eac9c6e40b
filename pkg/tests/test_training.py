"""Schedules, losses, augmentation, AdamW, and the training loop."""
import dataclasses
import math

import numpy as np
import pytest

import causalvit as cv
from causalvit.attention import CAUSAL
from causalvit.model import ClsPlacement, ModelConfig, build
from causalvit.tensor import GradTape, Tensor
from causalvit.training import (
    AdamW,
    DivergenceError,
    LrSchedule,
    Scheme,
    SoftMaskSchedule,
    TrainConfig,
    adamw_step,
    alpha_at,
    cross_entropy_smoothed,
    cutmix,
    lr_at,
    metrics_to_csv,
    mixup,
    one_hot,
    train,
)

SMALL_CONFIG = ModelConfig(depth=2, embed_dim=32, num_heads=2, patch_size=4, image_size=8, num_classes=4)


def tiny_dataset(n_train=48, n_test=24, seed=0, channels=3, image=8, classes=4):
    tr, te = cv.make_synthetic(n_train, n_test, num_classes=classes, image_size=image, channels=channels, seed=seed)
    return tr, te


class TestAlphaSchedule:
    def test_linear_midpoint(self):
        s = SoftMaskSchedule(Scheme.LINEAR, cutoff_epochs=50)
        assert alpha_at(s, 25) == pytest.approx(0.5, abs=1e-9)

    def test_constant_step(self):
        s = SoftMaskSchedule(Scheme.CONSTANT, cutoff_epochs=50, alpha0=1.0)
        assert alpha_at(s, 49) == 1.0
        assert alpha_at(s, 50) == 0.0

    def test_zero_cutoff_always_zero(self):
        for scheme in Scheme:
            s = SoftMaskSchedule(scheme, cutoff_epochs=0)
            assert all(alpha_at(s, e) == 0.0 for e in range(5))

    def test_nonincreasing_and_exactly_zero_at_cutoff(self):
        for scheme in Scheme:
            s = SoftMaskSchedule(scheme, cutoff_epochs=13, alpha0=0.7 if scheme is Scheme.CONSTANT else 1.0)
            values = [alpha_at(s, e) for e in range(30)]
            assert all(a >= b for a, b in zip(values, values[1:]))
            assert all(v == 0.0 for v in values[13:])
            assert all(0.0 <= v <= 1.0 for v in values)


class TestLrSchedule:
    def test_warmup_end_hits_base(self):
        s = LrSchedule(base_lr=0.3, warmup_epochs=5, total_epochs=50)
        assert lr_at(s, 5) == pytest.approx(0.3, abs=1e-12)

    def test_end_near_zero(self):
        s = LrSchedule(base_lr=0.3, warmup_epochs=5, total_epochs=50)
        assert lr_at(s, 50) <= 1e-6 * 0.3

    def test_decay_midpoint_is_half(self):
        s = LrSchedule(base_lr=0.3, warmup_epochs=10, total_epochs=50)
        assert lr_at(s, 30) == pytest.approx(0.15, abs=1e-9)

    def test_linear_warmup_from_zero(self):
        s = LrSchedule(base_lr=1.0, warmup_epochs=4, total_epochs=8)
        assert lr_at(s, 0) == 0.0
        assert lr_at(s, 1) == pytest.approx(0.25, abs=1e-12)
        # continuous at the boundary
        assert abs(lr_at(s, 4 - 1e-9) - lr_at(s, 4)) < 1e-8


class TestCrossEntropy:
    def test_uniform_logits_one_hot_target(self):
        k = 7
        logits = Tensor(np.zeros((3, k)))
        targets = Tensor(one_hot(np.array([0, 3, 6]), k, dtype=np.float64))
        assert cross_entropy_smoothed(logits, targets, 0.0).item() == pytest.approx(math.log(k), abs=1e-9)

    def test_confident_correct_prediction_near_zero(self):
        k = 10
        logits = np.zeros((1, k))
        logits[0, 4] = 30.0
        targets = Tensor(one_hot(np.array([4]), k, dtype=np.float64))
        assert cross_entropy_smoothed(Tensor(logits), targets, 0.0).item() <= 1e-9

    def test_smoothing_does_not_change_loss_under_uniform_prediction(self):
        k = 10
        logits = Tensor(np.zeros((2, k)))
        targets = Tensor(one_hot(np.array([1, 8]), k, dtype=np.float64))
        assert cross_entropy_smoothed(logits, targets, 0.1).item() == pytest.approx(math.log(10), abs=1e-12)

    def test_differentiable(self):
        rng = np.random.default_rng(0)
        targets = Tensor(one_hot(rng.integers(0, 5, size=3), 5, dtype=np.float64))
        f = lambda t: cross_entropy_smoothed(t, targets, 0.1)
        assert cv.finite_diff_check(f, Tensor(rng.normal(size=(3, 5)))) <= 1e-6


class TestMixupCutmix:
    def test_mixup_labels_sum_to_one(self):
        rng = np.random.default_rng(0)
        imgs = rng.random((8, 3, 4, 4)).astype(np.float32)
        labels = one_hot(rng.integers(0, 5, 8), 5)
        _, mixed, lam = mixup(imgs, labels, alpha=0.4, rng=rng)
        assert 0.0 <= lam <= 1.0
        np.testing.assert_allclose(mixed.sum(axis=1), 1.0, atol=1e-6)

    def test_mixup_is_convex_blend(self):
        rng = np.random.default_rng(1)
        imgs = rng.random((4, 1, 2, 2)).astype(np.float32)
        labels = one_hot(np.arange(4) % 2, 2)
        out, mixed, lam = mixup(imgs, labels, alpha=1.0, rng=rng)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_cutmix_realized_lambda_matches_box_area(self):
        rng = np.random.default_rng(2)
        imgs = rng.random((6, 3, 8, 8)).astype(np.float32)
        labels = one_hot(rng.integers(0, 3, 6), 3)
        out, mixed, lam = cutmix(imgs, labels, alpha=1.0, rng=rng)
        changed = (out != imgs).any(axis=(0, 1))
        box_area = changed.sum()
        assert lam == pytest.approx(1.0 - box_area / 64.0) or box_area == 0
        np.testing.assert_allclose(mixed.sum(axis=1), 1.0, atol=1e-6)

    def test_cutmix_empty_box_is_identity(self):
        # alpha very large concentrates lam near 0.5, so force the empty
        # box by monkeypatching the beta draw through a tiny rng stand-in
        class FakeRng:
            def beta(self, a, b):
                return 1.0  # lam = 1 -> zero-area box

            def integers(self, *a, **k):
                return 0

            def permutation(self, n):
                return np.arange(n)[::-1]

        imgs = np.random.default_rng(3).random((2, 1, 4, 4)).astype(np.float32)
        labels = one_hot(np.array([0, 1]), 2)
        out, mixed, lam = cutmix(imgs, labels, alpha=1.0, rng=FakeRng())
        assert lam == 1.0
        np.testing.assert_array_equal(out, imgs)
        np.testing.assert_array_equal(mixed, labels)

    def test_disabled_alpha_rejected(self):
        rng = np.random.default_rng(0)
        imgs = np.zeros((2, 1, 2, 2), dtype=np.float32)
        labels = one_hot(np.array([0, 1]), 2)
        for fn in (mixup, cutmix):
            with pytest.raises(ValueError):
                fn(imgs, labels, 0.0, rng)


class TestAdamW:
    def test_zero_grads_zero_decay_no_change(self):
        p = np.array([1.0, -2.0])
        m, v = np.zeros(2), np.zeros(2)
        adamw_step(p, np.zeros(2), m, v, t=1, lr=0.1, weight_decay=0.0)
        np.testing.assert_array_equal(p, [1.0, -2.0])

    def test_first_step_is_lr_sized(self):
        p = np.array([1.0])
        m, v = np.zeros(1), np.zeros(1)
        adamw_step(p, np.ones(1), m, v, t=1, lr=0.1, weight_decay=0.0)
        assert p[0] == pytest.approx(0.9, abs=1e-8)

    def test_pure_decay_is_multiplicative_shrink(self):
        p = np.array([2.0])
        m, v = np.zeros(1), np.zeros(1)
        adamw_step(p, np.zeros(1), m, v, t=1, lr=0.1, weight_decay=0.5)
        assert p[0] == pytest.approx(2.0 * (1 - 0.1 * 0.5), abs=1e-12)

    def test_wd_zero_matches_hand_rolled_adam(self):
        rng = np.random.default_rng(0)
        p_mine = rng.normal(size=(4, 3))
        p_ref = p_mine.copy()
        m = np.zeros_like(p_mine)
        v = np.zeros_like(p_mine)
        m_ref = np.zeros_like(p_mine)
        v_ref = np.zeros_like(p_mine)
        b1, b2, eps, lr = 0.9, 0.999, 1e-8, 0.01
        for t in range(1, 6):
            g = rng.normal(size=(4, 3))
            adamw_step(p_mine, g, m, v, t=t, lr=lr, weight_decay=0.0)
            m_ref = b1 * m_ref + (1 - b1) * g
            v_ref = b2 * v_ref + (1 - b2) * g * g
            p_ref -= lr * (m_ref / (1 - b1 ** t)) / (np.sqrt(v_ref / (1 - b2 ** t)) + eps)
            np.testing.assert_allclose(p_mine, p_ref, atol=1e-10)

    def test_optimizer_class_applies_grads(self):
        model = build(SMALL_CONFIG, seed=0)
        opt = AdamW(model.parameters(), weight_decay=0.0)
        before = model.head_weight.data.copy()
        model.head_weight.grad = np.ones_like(before)
        opt.step(lr=0.01)
        assert (model.head_weight.data != before).any()
        assert model.patch.projection.data.tobytes() == build(SMALL_CONFIG, seed=0).patch.projection.data.tobytes()


class TestTrainLoop:
    def test_zero_cutoff_history_alphas_all_zero(self):
        tr, te = tiny_dataset()
        model = build(SMALL_CONFIG, seed=0)
        cfg = TrainConfig(epochs=2, batch_size=16, lr=LrSchedule(1e-3, 0, 2), seed=0,
                          mixup_alpha=0.0, cutmix_alpha=0.0,
                          softmask=SoftMaskSchedule(Scheme.CONSTANT, 0))
        history = train(model, tr.images, tr.labels, te.images, te.labels, cfg)
        assert [h.alpha for h in history] == [0.0, 0.0]

    def test_zero_lr_zero_decay_leaves_parameters(self):
        tr, te = tiny_dataset()
        model = build(SMALL_CONFIG, seed=1)
        before = {n: p.data.copy() for n, p in model.parameters()}
        cfg = TrainConfig(epochs=1, batch_size=16, lr=LrSchedule(0.0, 0, 1), weight_decay=0.0,
                          mixup_alpha=0.0, cutmix_alpha=0.0, seed=0,
                          softmask=SoftMaskSchedule(Scheme.CONSTANT, 0))
        history = train(model, tr.images, tr.labels, te.images, te.labels, cfg)
        assert len(history) == 1
        for n, p in model.parameters():
            np.testing.assert_array_equal(p.data, before[n])

    def test_bit_reproducible_under_seed(self):
        tr, te = tiny_dataset()
        runs = []
        for _ in range(2):
            model = build(SMALL_CONFIG, seed=3)
            cfg = TrainConfig(epochs=2, batch_size=16, lr=LrSchedule(1e-3, 1, 2), seed=7,
                              mixup_alpha=0.5, cutmix_alpha=0.5,
                              softmask=SoftMaskSchedule(Scheme.CONSTANT, 1))
            history = train(model, tr.images, tr.labels, te.images, te.labels, cfg)
            runs.append(metrics_to_csv(history))
        assert runs[0] == runs[1]

    def test_front_causal_patch_params_get_zero_gradient(self):
        config = dataclasses.replace(SMALL_CONFIG, cls_placement=ClsPlacement.FRONT)
        model = build(config, seed=4)
        tr, _ = tiny_dataset()
        xb = Tensor(tr.images[:8])
        yb = Tensor(one_hot(tr.labels[:8], 4))
        with GradTape():
            logits = cv.forward(model, xb, kind=CAUSAL)
            cv.backward(cross_entropy_smoothed(logits, yb, 0.1))
        np.testing.assert_array_equal(model.patch.projection.grad, 0.0)
        # the class token sits at row 0 here; only its positional row can learn
        np.testing.assert_array_equal(model.lpe.table.grad[1:], 0.0)

    def test_post_sequence_patch_params_get_nonzero_gradient(self):
        model = build(SMALL_CONFIG, seed=4)
        tr, _ = tiny_dataset()
        xb = Tensor(tr.images[:8])
        yb = Tensor(one_hot(tr.labels[:8], 4))
        with GradTape():
            logits = cv.forward(model, xb, kind=CAUSAL)
            cv.backward(cross_entropy_smoothed(logits, yb, 0.1))
        assert np.abs(model.patch.projection.grad).max() > 0

    def test_divergence_aborts_with_error_and_keeps_last_good(self, tmp_path):
        tr, te = tiny_dataset()
        model = build(SMALL_CONFIG, seed=5)
        # absurd learning rate forces non-finite values within a few steps
        cfg = TrainConfig(epochs=3, batch_size=16, lr=LrSchedule(1e9, 0, 3), seed=0,
                          mixup_alpha=0.0, cutmix_alpha=0.0,
                          softmask=SoftMaskSchedule(Scheme.CONSTANT, 0))
        with pytest.raises(DivergenceError):
            train(model, tr.images, tr.labels, te.images, te.labels, cfg, out_dir=str(tmp_path))
        from causalvit.model import load_checkpoint

        restored, _ = load_checkpoint(str(tmp_path / "last_good.ckpt"))
        for _, p in restored.parameters():
            assert np.isfinite(p.data).all()

    def test_collapse_configuration_surfaces_diagnostic(self):
        config = dataclasses.replace(SMALL_CONFIG, cls_placement=ClsPlacement.FRONT)
        model = build(config, seed=6)
        tr, te = tiny_dataset()
        messages = []
        cfg = TrainConfig(epochs=1, batch_size=16, lr=LrSchedule(1e-3, 0, 1), seed=0,
                          mixup_alpha=0.0, cutmix_alpha=0.0,
                          softmask=SoftMaskSchedule(Scheme.CONSTANT, 0))
        train(model, tr.images, tr.labels, te.images, te.labels, cfg, log=messages.append)
        assert any("attention collapse" in m for m in messages)

    def test_metrics_csv_format(self):
        tr, te = tiny_dataset()
        model = build(SMALL_CONFIG, seed=7)
        cfg = TrainConfig(epochs=1, batch_size=16, lr=LrSchedule(1e-3, 0, 1), seed=0,
                          mixup_alpha=0.0, cutmix_alpha=0.0,
                          softmask=SoftMaskSchedule(Scheme.CONSTANT, 1))
        csv = metrics_to_csv(train(model, tr.images, tr.labels, te.images, te.labels, cfg))
        lines = csv.strip().split("\n")
        assert lines[0] == "epoch,alpha,lr,train_loss,test_loss,test_acc"
        assert len(lines) == 2
        fields = lines[1].split(",")
        assert fields[0] == "0" and fields[1] == "1"

    def test_drop_path_keeps_determinism_and_trains(self):
        tr, te = tiny_dataset()
        out = []
        for _ in range(2):
            model = build(SMALL_CONFIG, seed=8)
            cfg = TrainConfig(epochs=1, batch_size=16, lr=LrSchedule(1e-3, 0, 1), seed=1,
                              mixup_alpha=0.0, cutmix_alpha=0.0, drop_path_rate=0.3,
                              softmask=SoftMaskSchedule(Scheme.CONSTANT, 0))
            history = train(model, tr.images, tr.labels, te.images, te.labels, cfg)
            out.append(history[0].train_loss)
        assert out[0] == out[1]
