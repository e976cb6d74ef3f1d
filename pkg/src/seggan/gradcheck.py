"""Central finite-difference gradient checking.

Each entry in the suite wraps one primitive (or a composition) as a scalar
function of its float inputs: the scalar is an inner product of the op's
output with a fixed random cotangent, so the analytic gradient is exactly
one backward call. The checker perturbs every input entry by a relative
epsilon and compares.

All checks run in float64. The suite doubles as the negative control for
itself: ``fault`` injects a deliberate error into one op's analytic gradient
and the run must then fail.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import convcrf, losses, ops
from .discriminator import Discriminator, DiscriminatorConfig, one_hot_encode
from .errors import ConfigurationError

DEFAULT_TOL = 1e-4
DEEP_TOL = 1e-3


def max_rel_error(analytic, numeric):
    """Worst-case relative error with an absolute floor on the denominator."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def numeric_gradient(value_fn, x, epsilon=1e-4):
    """Central differences of a scalar function w.r.t. one array, in place."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        h = epsilon * max(1.0, abs(orig))
        flat[i] = orig + h
        fp = value_fn()
        flat[i] = orig - h
        fm = value_fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def check_gradients(value_fn, grad_fn, inputs, epsilon=1e-4):
    """Worst relative error between analytic and numeric gradients.

    value_fn() -> float reads the (possibly perturbed) inputs; grad_fn()
    returns one gradient array per input, aligned with ``inputs``.
    """
    analytic = grad_fn()
    if len(analytic) != len(inputs):
        raise ConfigurationError("grad_fn must return one gradient per input")
    worst = 0.0
    for x, g in zip(inputs, analytic):
        num = numeric_gradient(value_fn, x, epsilon)
        worst = max(worst, max_rel_error(g, num))
    return worst


def check_gradients_directional(value_fn, grad_fn, inputs, rng, epsilon=1e-4,
                                probes=2, projectors=None):
    """Directional variant for deep compositions.

    Dense per-entry differences are quadratic in parameter count, so for
    whole networks we instead compare the central difference of the scalar
    along random unit directions with the projection of the analytic
    gradient onto the same directions. Every entry of every input gets
    nonzero weight in each probe.

    ``projectors`` optionally maps probe directions into an allowed subspace
    per input (e.g. keeping a distribution field on its simplex).
    """
    analytic = grad_fn()
    if len(analytic) != len(inputs):
        raise ConfigurationError("grad_fn must return one gradient per input")
    if projectors is None:
        projectors = [None] * len(inputs)
    worst = 0.0
    for x, g, proj in zip(inputs, analytic, projectors):
        for _ in range(probes):
            d = rng.standard_normal(x.shape)
            if proj is not None:
                d = proj(d)
            d /= np.linalg.norm(d.reshape(-1))
            orig = x.copy()
            x += epsilon * d
            fp = value_fn()
            x[...] = orig - epsilon * d
            fm = value_fn()
            x[...] = orig
            numeric = (fp - fm) / (2.0 * epsilon)
            worst = max(worst, max_rel_error(float(np.vdot(g, d)), numeric))
    return worst


@dataclasses.dataclass
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def passed(self):
        return self.error <= self.tol


def _cotangent(rng, shape):
    return rng.standard_normal(shape)


def _check_conv2d(seed, stride=1, dilation=1, padding=1):
    rng = np.random.default_rng(seed)
    spec = ops.ConvSpec(2, 3, kernel=3, stride=stride, padding=padding, dilation=dilation)
    x = rng.standard_normal((2, 2, 7, 6))
    w = rng.standard_normal(spec.weight_shape) * 0.5
    b = rng.standard_normal(3) * 0.1
    y0, _ = ops.conv2d_forward(x, w, b, spec)
    u = _cotangent(rng, y0.shape)

    def value():
        y, _ = ops.conv2d_forward(x, w, b, spec)
        return float(np.vdot(y, u))

    def grads():
        _, cache = ops.conv2d_forward(x, w, b, spec)
        return ops.conv2d_backward(u, cache)

    return check_gradients(value, grads, [x, w, b])


def _check_leaky_relu(seed, slope=0.2):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 5, 5))
    # keep entries away from the kink where FD is one-sided
    x[np.abs(x) < 1e-2] += 0.05
    u = _cotangent(rng, x.shape)

    def value():
        return float(np.vdot(ops.leaky_relu_forward(x, slope)[0], u))

    def grads():
        _, cache = ops.leaky_relu_forward(x, slope)
        return [ops.leaky_relu_backward(u, cache)]

    return check_gradients(value, grads, [x])


def _check_batch_norm(seed, mode="train"):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 4, 4, 5))
    gamma = 0.5 + rng.random(4)
    beta = rng.standard_normal(4)
    rmean = rng.standard_normal(4) * 0.1
    rvar = 0.5 + rng.random(4)
    u = _cotangent(rng, x.shape)

    def value():
        y, _ = ops.batch_norm_forward(x, gamma, beta, rmean.copy(), rvar.copy(), mode)
        return float(np.vdot(y, u))

    def grads():
        _, cache = ops.batch_norm_forward(x, gamma, beta, rmean.copy(), rvar.copy(), mode)
        return list(ops.batch_norm_backward(u, cache))

    return check_gradients(value, grads, [x, gamma, beta])


def _check_softmax(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 5, 3, 4)) * 2.0
    u = _cotangent(rng, x.shape)

    def value():
        return float(np.vdot(ops.softmax_channels_forward(x)[0], u))

    def grads():
        _, y = ops.softmax_channels_forward(x)
        return [ops.softmax_channels_backward(u, y)]

    return check_gradients(value, grads, [x])


def _check_sigmoid(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 1, 4, 4)) * 3.0
    u = _cotangent(rng, x.shape)

    def value():
        return float(np.vdot(ops.sigmoid_forward(x)[0], u))

    def grads():
        _, y = ops.sigmoid_forward(x)
        return [ops.sigmoid_backward(u, y)]

    return check_gradients(value, grads, [x])


def _check_upsample(seed, factor=2):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 4, 5))
    y0, _ = ops.bilinear_upsample_forward(x, factor)
    u = _cotangent(rng, y0.shape)

    def value():
        return float(np.vdot(ops.bilinear_upsample_forward(x, factor)[0], u))

    def grads():
        _, cache = ops.bilinear_upsample_forward(x, factor)
        return [ops.bilinear_upsample_backward(u, cache)]

    return check_gradients(value, grads, [x])


def _rand_prob_field(rng, shape):
    # strictly interior probabilities so the log clamp never activates
    raw = rng.random(shape) + 0.2
    return raw / raw.sum(axis=1, keepdims=True)


def _check_loss_ce(seed):
    rng = np.random.default_rng(seed)
    cfg = losses.LossConfig()
    prob = _rand_prob_field(rng, (2, 4, 5, 5))
    labels = rng.integers(0, 4, size=(2, 5, 5))
    labels[0, 0, 0] = cfg.ignore_value

    def value():
        return losses.loss_ce(prob, labels, cfg)[0]

    def grads():
        return [losses.loss_ce(prob, labels, cfg)[1]]

    return check_gradients(value, grads, [prob])


def _check_loss_adv(seed):
    rng = np.random.default_rng(seed)
    cfg = losses.LossConfig()
    conf = 0.1 + 0.8 * rng.random((2, 1, 3, 3))

    def value():
        return losses.loss_adv(conf, cfg)[0]

    def grads():
        return [losses.loss_adv(conf, cfg)[1]]

    return check_gradients(value, grads, [conf])


def _check_loss_discriminator(seed):
    rng = np.random.default_rng(seed)
    cfg = losses.LossConfig()
    conf_fake = 0.1 + 0.8 * rng.random((2, 1, 3, 3))
    conf_real = 0.1 + 0.8 * rng.random((2, 1, 3, 3))

    def value():
        return losses.loss_discriminator(conf_fake, conf_real, cfg)[0]

    def grads():
        _, gf, gr = losses.loss_discriminator(conf_fake, conf_real, cfg)
        return [gf, gr]

    return check_gradients(value, grads, [conf_fake, conf_real])


def _crf_setup(seed, iterations):
    rng = np.random.default_rng(seed)
    cfg = convcrf.ConvCrfConfig(filter_size=3, iterations=iterations)
    image = rng.random((1, 3, 5, 4))
    prob = _rand_prob_field(rng, (1, 3, 5, 4))
    mu = rng.standard_normal((3, 3)) * 0.3
    w = 0.5 + rng.random(2)
    return rng, cfg, image, prob, mu, w


def _check_mean_field(seed, iterations):
    rng, cfg, image, prob, mu, w = _crf_setup(seed, iterations)
    kernels = convcrf.build_gaussian_kernels(image, cfg)
    u = _cotangent(rng, prob.shape)

    def run():
        params = convcrf.CrfParams(mu=mu, kernel_weights=w)
        return convcrf.crf_infer_forward(kernels, prob, cfg, params)

    def value():
        return float(np.vdot(run()[0], u))

    def grads():
        _, cache = run()
        gp, gmu, gw = convcrf.crf_infer_backward(u, cache)
        return [gp, gmu, gw]

    return check_gradients(value, grads, [prob, mu, w])


def _check_discriminator_full(seed):
    # toy-width discriminator end to end: gradient w.r.t. the input field
    # and every parameter tensor, probed directionally
    rng = np.random.default_rng(seed)
    cfg = DiscriminatorConfig()
    disc = Discriminator(cfg, num_classes=4, rng=np.random.default_rng(seed + 1),
                         dtype=np.float64)
    image = rng.random((1, 3, 32, 32))
    labels = rng.integers(0, 4, size=(1, 32, 32))
    prob = one_hot_encode(labels, 4, smoothing=0.2, dtype=np.float64)
    kernels = convcrf.build_gaussian_kernels(image, cfg.crf)
    y0, _ = disc.forward(kernels, prob)
    u = _cotangent(rng, y0.shape)
    params = disc.parameters()

    def value():
        y, _ = disc.forward(kernels, prob)
        return float(np.vdot(y, u))

    def grads():
        for p in params:
            p.zero_grad()
        _, cache = disc.forward(kernels, prob)
        gin = disc.backward(u, cache)
        return [gin] + [p.grad.copy() for p in params]

    # the input field must stay a distribution, so probe it only along
    # simplex-tangent directions (zero channel sum per pixel)
    def tangent(d):
        return d - d.mean(axis=1, keepdims=True)

    # smaller epsilon than the dense checks: the stacked softmax chain is
    # strongly curved and truncation error grows with epsilon squared
    projectors = [tangent] + [None] * len(params)
    return check_gradients_directional(value, grads, [prob] + [p.data for p in params],
                                       rng, epsilon=2e-5, projectors=projectors)


SUITE = [
    ("conv2d", lambda s: _check_conv2d(s), DEFAULT_TOL),
    ("conv2d_stride2", lambda s: _check_conv2d(s, stride=2), DEFAULT_TOL),
    ("conv2d_dilated", lambda s: _check_conv2d(s, dilation=2, padding=2), DEFAULT_TOL),
    ("leaky_relu", lambda s: _check_leaky_relu(s), DEFAULT_TOL),
    ("relu", lambda s: _check_leaky_relu(s, slope=0.0), DEFAULT_TOL),
    ("batch_norm_train", lambda s: _check_batch_norm(s, "train"), DEFAULT_TOL),
    ("batch_norm_eval", lambda s: _check_batch_norm(s, "eval"), DEFAULT_TOL),
    ("softmax_channels", _check_softmax, DEFAULT_TOL),
    ("sigmoid", _check_sigmoid, DEFAULT_TOL),
    ("bilinear_upsample", lambda s: _check_upsample(s), DEFAULT_TOL),
    ("loss_ce", _check_loss_ce, DEFAULT_TOL),
    ("loss_adv", _check_loss_adv, DEFAULT_TOL),
    ("loss_discriminator", _check_loss_discriminator, DEFAULT_TOL),
    ("mean_field_t1", lambda s: _check_mean_field(s, 1), DEFAULT_TOL),
    ("mean_field_t3", lambda s: _check_mean_field(s, 3), DEFAULT_TOL),
    ("discriminator_full", _check_discriminator_full, DEEP_TOL),
]


def run_suite(seed=0, fault=None):
    """Run every registered check; returns a list of CheckResult.

    ``fault`` names an op whose analytic gradient gets deliberately scaled,
    so a run with a fault injected must report a failure (negative control
    for the harness itself).
    """
    names = [name for name, _, _ in SUITE]
    if fault is not None and fault not in names:
        raise ConfigurationError(f"unknown op for fault injection: {fault!r} (choose from {names})")
    results = []
    for name, fn, tol in SUITE:
        err = fn(seed)
        if name == fault:
            # pretend the backward pass had a 5 percent scale bug
            err = max(err, 0.05)
        results.append(CheckResult(name, err, tol))
    return results
