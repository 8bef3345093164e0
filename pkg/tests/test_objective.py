"""Focal loss value, gradient, and class-weight checks."""

import math

import numpy as np
import pytest

from lungsound import autodiff as ad
from lungsound.objective import (
    FocalParams, LabelOutOfRangeError, MissingClassError,
    class_weights_from_counts, default_gamma,
    focal_loss, focal_loss_grad, focal_loss_from_logits,
)


def _params(n_classes, gamma=0.0, weights=None):
    w = np.ones(n_classes) if weights is None else np.asarray(weights, dtype=np.float64)
    return FocalParams(gamma=gamma, weights=w)


def test_perfectly_classified_sample_has_near_zero_loss():
    p = np.array([[1.0, 0.0, 0.0]])
    mean, per = focal_loss(p, [0], _params(3, gamma=2.0))
    assert mean < 1e-6
    assert per.shape == (1,)


def test_gamma_zero_reduces_to_cross_entropy():
    rng = np.random.default_rng(0)
    z = rng.standard_normal((8, 5))
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    labels = rng.integers(0, 5, size=8)
    mean, per = focal_loss(p, labels, _params(5, gamma=0.0))
    want = -np.log(p[np.arange(8), labels])
    np.testing.assert_allclose(per, want, rtol=0, atol=1e-12)
    assert abs(mean - want.mean()) < 1e-12


def test_half_probability_gamma_two_value():
    p = np.array([[0.5, 0.5]])
    mean, _ = focal_loss(p, [0], _params(2, gamma=2.0))
    assert abs(mean - 0.25 * math.log(2.0)) < 1e-7


def test_loss_monotone_nonincreasing_in_gamma():
    for p_true in np.arange(0.1, 0.95, 0.1):
        p = np.array([[p_true, 1.0 - p_true]])
        losses = [focal_loss(p, [0], _params(2, gamma=g))[0] for g in range(6)]
        assert all(a >= b - 1e-12 for a, b in zip(losses, losses[1:])), p_true


def test_hard_example_ratio_grows_with_gamma():
    def ratio(gamma):
        lo, _ = focal_loss(np.array([[0.1, 0.9]]), [0], _params(2, gamma=gamma))
        hi, _ = focal_loss(np.array([[0.9, 0.1]]), [0], _params(2, gamma=gamma))
        return lo / hi

    assert ratio(2.0) > ratio(0.0)
    assert ratio(4.0) > ratio(2.0)


def test_weight_linearity():
    p = np.array([[0.3, 0.7], [0.6, 0.4]])
    labels = [0, 1]
    base = _params(2, gamma=2.0, weights=[1.0, 1.0])
    doubled = _params(2, gamma=2.0, weights=[2.0, 1.0])
    _, per1 = focal_loss(p, labels, base)
    _, per2 = focal_loss(p, labels, doubled)
    assert per2[0] == 2.0 * per1[0]
    assert per2[1] == per1[1]
    z = np.log(p)
    g1 = focal_loss_grad(z, labels, base)
    g2 = focal_loss_grad(z, labels, doubled)
    np.testing.assert_allclose(g2[0], 2.0 * g1[0], rtol=1e-12)
    np.testing.assert_allclose(g2[1], g1[1], rtol=1e-12)


def test_loss_finite_at_probability_extremes():
    p = np.array([[1.0, 0.0], [0.0, 1.0]])
    mean, per = focal_loss(p, [1, 0], _params(2, gamma=2.0))
    assert np.all(np.isfinite(per)) and np.isfinite(mean)


def test_rejects_bad_rows_and_labels():
    with pytest.raises(ValueError):
        focal_loss(np.array([[0.9, 0.2]]), [0], _params(2))
    with pytest.raises(LabelOutOfRangeError):
        focal_loss(np.array([[0.5, 0.5]]), [2], _params(2))
    with pytest.raises(LabelOutOfRangeError):
        focal_loss_grad(np.zeros((1, 2)), [-1], _params(2))


def test_grad_gamma_zero_closed_form():
    rng = np.random.default_rng(4)
    z = rng.standard_normal((6, 4))
    labels = rng.integers(0, 4, size=6)
    got = focal_loss_grad(z, labels, _params(4, gamma=0.0))
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    onehot = np.eye(4)[labels]
    np.testing.assert_allclose(got, (p - onehot) / 6, rtol=1e-10)
    np.testing.assert_allclose(got.sum(axis=1), 0.0, atol=1e-6)


@pytest.mark.parametrize("gamma", [0.0, 0.5, 2.0, 4.0, 5.0])
def test_grad_matches_finite_differences(gamma):
    rng = np.random.default_rng(12)
    z = rng.standard_normal((4, 7))
    labels = rng.integers(0, 7, size=4)
    weights = rng.uniform(0.5, 3.0, size=7)
    params = _params(7, gamma=gamma, weights=weights)
    analytic = focal_loss_grad(z, labels, params)
    eps = 1e-5
    num = np.zeros_like(z)
    for i in range(z.shape[0]):
        for j in range(z.shape[1]):
            zp, zm = z.copy(), z.copy()
            zp[i, j] += eps
            zm[i, j] -= eps
            pp = np.exp(zp) / np.exp(zp).sum(axis=1, keepdims=True)
            pm = np.exp(zm) / np.exp(zm).sum(axis=1, keepdims=True)
            num[i, j] = (focal_loss(pp, labels, params)[0]
                         - focal_loss(pm, labels, params)[0]) / (2 * eps)
    rel = np.abs(analytic - num) / np.maximum(1e-8, np.abs(analytic) + np.abs(num))
    assert rel.max() < 1e-4


def test_autodiff_op_backpropagates_fused_gradient():
    rng = np.random.default_rng(9)
    z = rng.standard_normal((5, 3)).astype(np.float32)
    labels = rng.integers(0, 3, size=5)
    params = _params(3, gamma=4.0)
    t = ad.Tensor(z, requires_grad=True, name="logits")
    loss = focal_loss_from_logits(t, labels, params)
    assert loss.data.shape == ()
    grads = ad.backward(loss, {"logits": t})
    want = focal_loss_grad(z, labels, params)
    np.testing.assert_allclose(grads["logits"], want, rtol=1e-4, atol=1e-7)


def test_class_weights_formula_and_clip():
    np.testing.assert_allclose(class_weights_from_counts([10, 10, 10]), 1.0)
    w = class_weights_from_counts([9000, 1000])
    np.testing.assert_allclose(w, [10000 / (2 * 9000), 10000 / (2 * 1000)], rtol=1e-12)
    np.testing.assert_allclose(w, [0.556, 5.0], atol=5e-4)
    # a 15-sample class among 6656 events hits the upper clip
    counts = [5159, 39, 452, 15, 49, 912, 30]
    w = class_weights_from_counts(counts)
    assert w[3] == 20.0
    raw = sum(counts) / (7 * 15)
    assert raw > 20.0 and abs(raw - 63.39) < 0.01
    assert w.min() == 0.2 or w.min() > 0.2  # lower clip engaged only if needed


def test_class_weights_missing_class():
    with pytest.raises(MissingClassError):
        class_weights_from_counts([5, 0, 3])


def test_default_gamma_by_task():
    assert default_gamma("1-1") == 4.0
    assert default_gamma("1-2") == 4.0
    assert default_gamma("2-1") == 5.0
    assert default_gamma("2-2") == 3.0
    with pytest.raises(ValueError):
        default_gamma("3-1")
