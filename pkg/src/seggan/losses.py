"""Training losses and their input gradients.

Each loss returns its scalar value together with the gradient arrays that
training needs, so that no separate backward entry point exists to drift out
of sync. Probabilities are clamped to [eps, 1] inside every log; outside the
clamp window the gradient is zero.

Reduction "mean" divides the sum by the number of contributing locations
(ignored pixels do not count), so mean == sum / count holds by construction.
"""

from __future__ import annotations

import dataclasses
import warnings

import numpy as np

from .errors import ConfigurationError
from .ops import clipped_log, clipped_log_grad

IGNORE_VALUE = 255


@dataclasses.dataclass(frozen=True)
class LossConfig:
    lambda_adv: float = 0.01
    epsilon: float = 1e-8
    reduction: str = "mean"
    ignore_value: int = IGNORE_VALUE

    def __post_init__(self):
        if self.reduction not in ("mean", "sum"):
            raise ConfigurationError(f"reduction must be 'mean' or 'sum', got {self.reduction!r}")
        if not 0.0 < self.epsilon <= 1e-3:
            raise ConfigurationError(f"epsilon must be in (0, 1e-3], got {self.epsilon}")
        if self.lambda_adv < 0.0:
            raise ConfigurationError(f"lambda_adv must be >= 0, got {self.lambda_adv}")


def _reduce(total, count, cfg):
    if cfg.reduction == "sum" or count == 0:
        return total
    return total / count


def loss_ce(prob_map, labels, cfg: LossConfig):
    """Multi-class cross-entropy against integer labels.

    labels is (N, H, W); pixels equal to cfg.ignore_value contribute nothing.
    Returns (value, grad_prob). An all-ignored batch yields 0 with a warning.
    """
    n, c, h, w = prob_map.shape
    if labels.shape != (n, h, w):
        raise ConfigurationError(
            f"labels shape {labels.shape} does not match prob_map {prob_map.shape}"
        )
    valid = labels != cfg.ignore_value
    bad = valid & ((labels < 0) | (labels >= c))
    if bad.any():
        raise ConfigurationError(
            f"labels contain values outside [0, {c}) that are not the ignore value"
        )
    count = int(valid.sum())
    if count == 0:
        warnings.warn("cross-entropy batch contains only ignored pixels", RuntimeWarning)
        return 0.0, np.zeros_like(prob_map)
    safe = np.where(valid, labels, 0)
    p_true = np.take_along_axis(prob_map, safe[:, None], axis=1)[:, 0]
    total = -float(clipped_log(p_true, cfg.epsilon)[valid].sum())
    value = _reduce(total, count, cfg)
    scale = 1.0 if cfg.reduction == "sum" else 1.0 / count
    gvals = np.where(valid, -scale * clipped_log_grad(p_true, cfg.epsilon), 0.0)
    grad = np.zeros_like(prob_map)
    np.put_along_axis(grad, safe[:, None], gvals[:, None].astype(prob_map.dtype), axis=1)
    return value, grad


def loss_adv(conf_fake, cfg: LossConfig):
    """Adversarial term for the segmentation network: -sum log D(S(x)).

    Returns (value, grad_conf).
    """
    count = conf_fake.size
    total = -float(clipped_log(conf_fake, cfg.epsilon).sum())
    value = _reduce(total, count, cfg)
    scale = 1.0 if cfg.reduction == "sum" else 1.0 / count
    grad = -scale * clipped_log_grad(conf_fake, cfg.epsilon)
    return value, grad


def loss_discriminator(conf_fake, conf_real, cfg: LossConfig):
    """Binary cross-entropy over confidence maps: fakes toward 0, reals toward 1.

    Written as -sum[(1 - y) log(1 - D(fake)) + y log D(real)] with y the
    source indicator; reduction 'mean' divides each term by its own map size.
    Returns (value, grad_fake, grad_real).
    """
    if conf_fake.shape != conf_real.shape:
        raise ConfigurationError(
            f"confidence map shapes differ: {conf_fake.shape} vs {conf_real.shape}"
        )
    one_minus = 1.0 - conf_fake
    total_fake = -float(clipped_log(one_minus, cfg.epsilon).sum())
    total_real = -float(clipped_log(conf_real, cfg.epsilon).sum())
    count = conf_fake.size
    value = _reduce(total_fake, count, cfg) + _reduce(total_real, count, cfg)
    scale = 1.0 if cfg.reduction == "sum" else 1.0 / count
    grad_fake = scale * clipped_log_grad(one_minus, cfg.epsilon)
    grad_real = -scale * clipped_log_grad(conf_real, cfg.epsilon)
    return value, grad_fake, grad_real


def loss_seg(l_ce, l_adv, cfg: LossConfig):
    """Combined segmentation objective: l_ce + lambda * l_adv."""
    return l_ce + cfg.lambda_adv * l_adv
