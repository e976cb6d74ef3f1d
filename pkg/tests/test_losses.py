"""Training objectives: closed-form values, reductions, gradients."""

import math

import numpy as np
import pytest

from seggan.errors import ConfigurationError
from seggan.gradcheck import check_gradients
from seggan.losses import (
    IGNORE_VALUE,
    LossConfig,
    loss_adv,
    loss_ce,
    loss_discriminator,
    loss_seg,
)

SUM = LossConfig(reduction="sum")
MEAN = LossConfig(reduction="mean")


def uniform_prob(n, c, h, w):
    return np.full((n, c, h, w), 1.0 / c)


# ------------------------------------------------------------ config

def test_config_validation():
    with pytest.raises(ConfigurationError):
        LossConfig(lambda_adv=-0.1)
    with pytest.raises(ConfigurationError):
        LossConfig(epsilon=0.0)
    with pytest.raises(ConfigurationError):
        LossConfig(epsilon=0.01)
    with pytest.raises(ConfigurationError):
        LossConfig(reduction="median")
    for lam in (0.005, 0.01, 0.02, 0.05):
        assert LossConfig(lambda_adv=lam).lambda_adv == lam


# ------------------------------------------------------- discriminator

def test_disc_loss_half_confidence_sum():
    conf = np.full((1, 1, 2, 2), 0.5)
    val, _, _ = loss_discriminator(conf, conf.copy(), SUM)
    assert abs(val - 8 * math.log(2)) < 1e-10
    assert abs(val - 5.5452) < 1e-4


def test_disc_loss_half_confidence_mean():
    conf = np.full((1, 1, 2, 2), 0.5)
    val, _, _ = loss_discriminator(conf, conf.copy(), MEAN)
    assert abs(val - 2 * math.log(2)) < 1e-10
    assert abs(val - 1.3863) < 1e-4


def test_disc_loss_perfect_discriminator():
    fake = np.full((1, 1, 3, 3), 1e-9)
    real = np.full((1, 1, 3, 3), 1.0 - 1e-9)
    val, _, _ = loss_discriminator(fake, real, MEAN)
    assert 0 <= val < 1e-6


def test_disc_loss_shape_mismatch():
    with pytest.raises(ConfigurationError):
        loss_discriminator(np.full((1, 1, 2, 2), 0.5), np.full((1, 1, 3, 3), 0.5), MEAN)


def test_disc_loss_monotone_in_real():
    fake = np.full((1, 1, 2, 2), 0.5)
    lo, _, _ = loss_discriminator(fake, np.full((1, 1, 2, 2), 0.6), MEAN)
    hi, _, _ = loss_discriminator(fake, np.full((1, 1, 2, 2), 0.9), MEAN)
    assert hi < lo


def test_disc_loss_gradient(rng):
    fake = rng.uniform(0.1, 0.9, size=(2, 1, 3, 3))
    real = rng.uniform(0.1, 0.9, size=(2, 1, 3, 3))
    for cfg in (SUM, MEAN):
        def value(cfg=cfg):
            v, _, _ = loss_discriminator(fake, real, cfg)
            return v

        def grads(cfg=cfg):
            _, gf, gr = loss_discriminator(fake, real, cfg)
            return gf, gr

        assert check_gradients(value, grads, (fake, real)) <= 1e-4


# --------------------------------------------------------------- ce

def test_ce_one_hot_correct_is_zero():
    prob = np.zeros((1, 3, 2, 2))
    labels = np.array([[[0, 1], [2, 0]]])
    for c in range(3):
        prob[0, c][labels[0] == c] = 1.0
    val, grad = loss_ce(prob, labels, MEAN)
    assert val == 0.0
    assert grad.shape == prob.shape


def test_ce_uniform_sum():
    prob = uniform_prob(1, 4, 1, 2)
    labels = np.array([[[1, 3]]])
    val, _ = loss_ce(prob, labels, SUM)
    assert abs(val - 2 * math.log(4)) < 1e-10
    assert abs(val - 2.7726) < 1e-4


def test_ce_one_ignored_mean():
    prob = uniform_prob(1, 4, 1, 2)
    labels = np.array([[[2, IGNORE_VALUE]]])
    val, grad = loss_ce(prob, labels, MEAN)
    assert abs(val - math.log(4)) < 1e-10
    assert abs(val - 1.3863) < 1e-4
    assert not np.any(grad[0, :, 0, 1])  # no gradient at the ignored pixel


def test_ce_all_ignored_warns_and_zero():
    prob = uniform_prob(1, 4, 2, 2)
    labels = np.full((1, 2, 2), IGNORE_VALUE)
    with pytest.warns(RuntimeWarning):
        val, grad = loss_ce(prob, labels, MEAN)
    assert val == 0.0
    assert not np.any(grad)


def test_ce_rejects_out_of_range_labels():
    prob = uniform_prob(1, 3, 1, 1)
    with pytest.raises(ConfigurationError):
        loss_ce(prob, np.array([[[5]]]), MEAN)


def test_ce_reduction_consistency(rng):
    prob = rng.random((2, 4, 3, 3)) + 0.1
    prob /= prob.sum(axis=1, keepdims=True)
    labels = rng.integers(0, 4, size=(2, 3, 3))
    labels[0, 0, 0] = IGNORE_VALUE
    v_sum, _ = loss_ce(prob, labels, SUM)
    v_mean, _ = loss_ce(prob, labels, MEAN)
    assert np.isclose(v_sum, v_mean * 17, rtol=1e-12)


def test_ce_gradient(rng):
    prob = rng.random((1, 3, 3, 3)) + 0.1
    prob /= prob.sum(axis=1, keepdims=True)
    labels = rng.integers(0, 3, size=(1, 3, 3))
    labels[0, 1, 1] = IGNORE_VALUE
    for cfg in (SUM, MEAN):
        def value(cfg=cfg):
            v, _ = loss_ce(prob, labels, cfg)
            return v

        def grads(cfg=cfg):
            _, g = loss_ce(prob, labels, cfg)
            return (g,)

        assert check_gradients(value, grads, (prob,)) <= 1e-4


# -------------------------------------------------------------- adv

def test_adv_perfect_confidence_is_zero():
    val, _ = loss_adv(np.ones((1, 1, 2, 2)), MEAN)
    assert val == 0.0


def test_adv_half_confidence():
    conf = np.full((1, 1, 2, 2), 0.5)
    v_sum, _ = loss_adv(conf, SUM)
    v_mean, _ = loss_adv(conf, MEAN)
    assert abs(v_sum - 4 * math.log(2)) < 1e-10
    assert abs(v_sum - 2.7726) < 1e-4
    assert abs(v_mean - math.log(2)) < 1e-10
    assert abs(v_mean - 0.6931) < 1e-4


def test_adv_monotone():
    lo, _ = loss_adv(np.full((1, 1, 2, 2), 0.4), MEAN)
    hi, _ = loss_adv(np.full((1, 1, 2, 2), 0.7), MEAN)
    assert hi < lo


def test_adv_gradient_is_reciprocal(rng):
    conf = rng.uniform(0.2, 0.9, size=(1, 1, 3, 3))
    _, g_sum = loss_adv(conf, SUM)
    assert np.allclose(g_sum, -1.0 / conf, rtol=1e-12)
    _, g_mean = loss_adv(conf, MEAN)
    assert np.allclose(g_mean, -1.0 / conf / 9, rtol=1e-12)


def test_adv_reduction_consistency(rng):
    conf = rng.uniform(0.1, 0.9, size=(2, 1, 4, 4))
    v_sum, _ = loss_adv(conf, SUM)
    v_mean, _ = loss_adv(conf, MEAN)
    assert np.isclose(v_sum, v_mean * 32, rtol=1e-12)


# -------------------------------------------------------------- seg

def test_seg_combination():
    assert loss_seg(1.0, 2.0, LossConfig(lambda_adv=0.01)) == pytest.approx(1.02)
    assert loss_seg(3.7, 99.0, LossConfig(lambda_adv=0.0)) == 3.7


def test_all_losses_nonnegative_finite(rng):
    for _ in range(20):
        conf = rng.uniform(1e-12, 1.0, size=(1, 1, 2, 2))
        real = rng.uniform(1e-12, 1.0, size=(1, 1, 2, 2))
        v, _, _ = loss_discriminator(conf, real, MEAN)
        assert v >= 0 and np.isfinite(v)
        v, _ = loss_adv(conf, MEAN)
        assert v >= 0 and np.isfinite(v)
        prob = rng.random((1, 3, 2, 2)) + 1e-9
        prob /= prob.sum(axis=1, keepdims=True)
        v, _ = loss_ce(prob, rng.integers(0, 3, size=(1, 2, 2)), MEAN)
        assert v >= 0 and np.isfinite(v)
