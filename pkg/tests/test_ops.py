"""Tensor primitives: hand-computed cases, algebraic laws, gradient checks."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seggan import ops
from seggan.errors import ConfigurationError, DegenerateBatchError, NumericsError
from seggan.gradcheck import check_gradients, max_rel_error
from seggan.ops import ConvSpec


def conv(x, w, b=None, **kw):
    spec = ConvSpec(in_channels=w.shape[1], out_channels=w.shape[0],
                    kernel=w.shape[2], **kw)
    out, _ = ops.conv2d_forward(x, w, b, spec)
    return out


# ------------------------------------------------------------------ conv2d

def test_conv_zero_input():
    x = np.zeros((1, 1, 3, 3))
    w = np.arange(9.0).reshape(1, 1, 3, 3)
    out = conv(x, w, padding=1)
    assert out.shape == (1, 1, 3, 3)
    assert np.all(out == 0)


def test_conv_ones_padding_one():
    # 3x3 ones * 3x3 ones kernel, zero-padded: each output counts the
    # overlap of the kernel window with the image
    x = np.ones((1, 1, 3, 3))
    w = np.ones((1, 1, 3, 3))
    out = conv(x, w, padding=1)[0, 0]
    expected = np.array([[4.0, 6.0, 4.0],
                         [6.0, 9.0, 6.0],
                         [4.0, 6.0, 4.0]])
    assert np.array_equal(out, expected)


def test_conv_dilated_shape():
    x = np.ones((1, 1, 5, 5))
    w = np.ones((1, 1, 3, 3))
    out = conv(x, w, padding=2, dilation=2)
    assert out.shape == (1, 1, 5, 5)


def test_conv_dilation_reaches_across():
    # delta input, dilation 2: the kernel taps sit 2 pixels apart
    x = np.zeros((1, 1, 5, 5))
    x[0, 0, 2, 2] = 1.0
    w = np.ones((1, 1, 3, 3))
    out = conv(x, w, padding=2, dilation=2)[0, 0]
    taps = [(r, c) for r in (0, 2, 4) for c in (0, 2, 4)]
    for r in range(5):
        for c in range(5):
            assert out[r, c] == (1.0 if (r, c) in taps else 0.0)


def test_conv_stride():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    w = np.ones((1, 1, 1, 1))
    out = conv(x, w, stride=2)
    assert out.shape == (1, 1, 2, 2)
    assert np.array_equal(out[0, 0], [[0.0, 2.0], [8.0, 10.0]])


def test_conv_bias_broadcast():
    x = np.zeros((2, 3, 4, 4))
    w = np.zeros((5, 3, 1, 1))
    out = conv(x, w, np.arange(5.0))
    assert out.shape == (2, 5, 4, 4)
    for o in range(5):
        assert np.all(out[:, o] == o)


def test_conv_linear_in_input_and_weight(rng):
    x = rng.normal(size=(2, 3, 6, 6))
    y = rng.normal(size=(2, 3, 6, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    a = 1.7
    assert np.allclose(conv(a * x, w, padding=1), a * conv(x, w, padding=1),
                       rtol=0, atol=1e-10)
    assert np.allclose(conv(x + y, w, padding=1),
                       conv(x, w, padding=1) + conv(y, w, padding=1),
                       rtol=0, atol=1e-10)
    assert np.allclose(conv(x, a * w, padding=1), a * conv(x, w, padding=1),
                       rtol=0, atol=1e-10)


def test_conv_shape_mismatch_names_shapes():
    x = np.zeros((1, 2, 4, 4))
    w = np.zeros((1, 3, 3, 3))
    spec = ConvSpec(in_channels=3, out_channels=1, kernel=3)
    with pytest.raises(ConfigurationError, match=r"\(1, 2, 4, 4\)"):
        ops.conv2d_forward(x, w, None, spec)


def test_conv_spec_rejects_even_kernel_and_empty_output():
    with pytest.raises(ConfigurationError):
        ConvSpec(in_channels=1, out_channels=1, kernel=2)
    spec = ConvSpec(in_channels=1, out_channels=1, kernel=5)
    with pytest.raises(ConfigurationError):
        spec.out_size(4)


@given(size=st.integers(3, 16), kernel=st.sampled_from([1, 3, 5]),
       stride=st.integers(1, 3), padding=st.integers(0, 3),
       dilation=st.integers(1, 3))
@settings(max_examples=60, deadline=None)
def test_conv_output_shape_formula(size, kernel, stride, padding, dilation):
    span = dilation * (kernel - 1) + 1
    expected = (size + 2 * padding - span) // stride + 1
    spec = ConvSpec(in_channels=1, out_channels=1, kernel=kernel,
                    stride=stride, padding=padding, dilation=dilation)
    if expected < 1:
        with pytest.raises(ConfigurationError):
            spec.out_size(size)
        return
    x = np.zeros((1, 1, size, size))
    w = np.zeros((1, 1, kernel, kernel))
    out, _ = ops.conv2d_forward(x, w, None, spec)
    assert out.shape == (1, 1, expected, expected)


def test_conv_backward_zero_grad(rng):
    x = rng.normal(size=(1, 2, 4, 4))
    w = rng.normal(size=(3, 2, 3, 3))
    spec = ConvSpec(in_channels=2, out_channels=3, kernel=3, padding=1)
    out, cache = ops.conv2d_forward(x, w, np.zeros(3), spec)
    gx, gw, gb = ops.conv2d_backward(np.zeros_like(out), cache)
    assert not np.any(gx) and not np.any(gw) and not np.any(gb)


@pytest.mark.parametrize("stride,dilation,padding", [(1, 1, 1), (2, 1, 1), (1, 2, 2)])
def test_conv_backward_finite_difference(rng, stride, dilation, padding):
    x = rng.normal(size=(1, 2, 4, 4))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    spec = ConvSpec(in_channels=2, out_channels=3, kernel=3, stride=stride,
                    padding=padding, dilation=dilation)

    def value():
        out, _ = ops.conv2d_forward(x, w, b, spec)
        return 0.5 * float(np.sum(out * out))

    def grads():
        out, cache = ops.conv2d_forward(x, w, b, spec)
        return ops.conv2d_backward(out, cache)

    err = check_gradients(value, grads, (x, w, b))
    assert err <= 1e-4


# ------------------------------------------------------------- activations

def test_leaky_relu_values():
    x = np.array([[[[-1.0, 3.0, 0.0]]]])
    out, _ = ops.leaky_relu_forward(x, 0.2)
    assert np.array_equal(out[0, 0, 0], [-0.2, 3.0, 0.0])


def test_leaky_relu_derivative_at_zero_is_slope():
    x = np.zeros((1, 1, 1, 2))
    _, cache = ops.leaky_relu_forward(x, 0.2)
    g = ops.leaky_relu_backward(np.ones_like(x), cache)
    assert np.all(g == 0.2)


def test_leaky_relu_rejects_bad_slope():
    with pytest.raises(ConfigurationError):
        ops.leaky_relu_forward(np.zeros((1, 1, 1, 1)), 1.0)
    with pytest.raises(ConfigurationError):
        ops.leaky_relu_forward(np.zeros((1, 1, 1, 1)), -0.1)


def test_relu_is_leaky_zero(rng):
    x = rng.normal(size=(2, 3, 4, 4))
    out, _ = ops.relu_forward(x)
    ref, _ = ops.leaky_relu_forward(x, 0.0)
    assert np.array_equal(out, ref)
    assert np.array_equal(out, np.maximum(x, 0))


def test_activation_gradients(rng):
    x = rng.normal(size=(2, 2, 5, 5))
    x[np.abs(x) < 1e-2] = 0.5  # keep probes away from the kink

    for slope in (0.0, 0.2):
        def value(slope=slope):
            out, _ = ops.leaky_relu_forward(x, slope)
            return float(np.sum(np.sin(out)))

        def grads(slope=slope):
            out, cache = ops.leaky_relu_forward(x, slope)
            return (ops.leaky_relu_backward(np.cos(out), cache),)

        assert check_gradients(value, grads, (x,)) <= 1e-4


# --------------------------------------------------------------- batchnorm

def test_batch_norm_constant_input_gives_shift(rng):
    x = np.full((3, 2, 4, 4), 7.5)
    gamma = np.array([2.0, 3.0])
    beta = np.array([-1.0, 4.0])
    rm, rv = np.zeros(2), np.ones(2)
    out, _ = ops.batch_norm_forward(x, gamma, beta, rm, rv, "train")
    assert np.allclose(out[:, 0], -1.0, atol=1e-3)
    assert np.allclose(out[:, 1], 4.0, atol=1e-3)


def test_batch_norm_eval_identity(rng):
    x = rng.normal(size=(2, 3, 4, 4))
    out, _ = ops.batch_norm_forward(x, np.ones(3), np.zeros(3),
                                    np.zeros(3), np.ones(3), "eval")
    assert np.allclose(out, x, atol=1e-4)


def test_batch_norm_running_stats_update(rng):
    x = rng.normal(loc=3.0, size=(4, 1, 5, 5))
    rm, rv = np.zeros(1), np.ones(1)
    ops.batch_norm_forward(x, np.ones(1), np.zeros(1), rm, rv, "train")
    assert np.allclose(rm, 0.9 * 0.0 + 0.1 * x.mean())
    assert np.allclose(rv, 0.9 * 1.0 + 0.1 * x.var())


def test_batch_norm_eval_does_not_touch_running_stats(rng):
    x = rng.normal(size=(2, 1, 3, 3))
    rm, rv = np.full(1, 0.3), np.full(1, 2.0)
    ops.batch_norm_forward(x, np.ones(1), np.zeros(1), rm, rv, "eval")
    assert rm[0] == 0.3 and rv[0] == 2.0


def test_batch_norm_degenerate_batch():
    x = np.ones((1, 2, 1, 1))
    with pytest.raises(DegenerateBatchError):
        ops.batch_norm_forward(x, np.ones(2), np.zeros(2),
                               np.zeros(2), np.ones(2), "train")


def test_batch_norm_gradients(rng):
    for mode in ("train", "eval"):
        x = rng.normal(size=(3, 2, 4, 4))
        gamma = rng.normal(size=2) + 1.5
        beta = rng.normal(size=2)

        def value(mode=mode):
            out, _ = ops.batch_norm_forward(x, gamma, beta, np.zeros(2),
                                            np.ones(2), mode)
            return float(np.sum(np.sin(out)))

        def grads(mode=mode):
            out, cache = ops.batch_norm_forward(x, gamma, beta, np.zeros(2),
                                                np.ones(2), mode)
            return ops.batch_norm_backward(np.cos(out), cache)

        assert check_gradients(value, grads, (x, gamma, beta)) <= 1e-4


# ---------------------------------------------------------------- softmax

def test_softmax_uniform():
    x = np.full((1, 4, 2, 2), 3.3)
    out, _ = ops.softmax_channels_forward(x)
    assert np.allclose(out, 0.25, atol=1e-12)


def test_softmax_closed_form():
    x = np.zeros((1, 2, 1, 1))
    x[0, 1] = np.log(3.0)
    out, _ = ops.softmax_channels_forward(x)
    assert np.allclose(out[0, :, 0, 0], [0.25, 0.75], atol=1e-12)


def test_softmax_channel_sums_and_shift_invariance(rng):
    x = rng.normal(size=(2, 5, 3, 3)) * 10
    out, _ = ops.softmax_channels_forward(x)
    assert np.allclose(out.sum(axis=1), 1.0, atol=1e-6)
    shifted, _ = ops.softmax_channels_forward(x + rng.normal(size=(2, 1, 3, 3)))
    assert np.allclose(out, shifted, atol=1e-6)


def test_softmax_gradient(rng):
    x = rng.normal(size=(2, 3, 3, 3))
    t = rng.normal(size=(2, 3, 3, 3))

    def value():
        out, _ = ops.softmax_channels_forward(x)
        return float(np.sum(out * t))

    def grads():
        out, cache = ops.softmax_channels_forward(x)
        return (ops.softmax_channels_backward(t, cache),)

    assert check_gradients(value, grads, (x,)) <= 1e-4


# ---------------------------------------------------------------- sigmoid

def test_sigmoid_values(rng):
    out, _ = ops.sigmoid_forward(np.array([[[[0.0]]]]))
    assert out[0, 0, 0, 0] == 0.5
    big, _ = ops.sigmoid_forward(np.array([[[[20.0, 30.0]]]]))
    assert np.all(big > 0.999999) and np.all(big < 1.0)
    # far saturation must stay finite, not overflow
    sat, _ = ops.sigmoid_forward(np.array([[[[-800.0, 800.0]]]]))
    assert np.all(np.isfinite(sat))
    x = np.linspace(-6, 6, 31).reshape(1, 1, 1, 31)
    out, _ = ops.sigmoid_forward(x)
    assert np.all(np.diff(out[0, 0, 0]) > 0)
    assert np.all((out > 0) & (out < 1))


def test_sigmoid_gradient(rng):
    x = rng.normal(size=(2, 1, 4, 4)) * 3

    def value():
        out, _ = ops.sigmoid_forward(x)
        return float(np.sum(out ** 2))

    def grads():
        out, cache = ops.sigmoid_forward(x)
        return (ops.sigmoid_backward(2 * out, cache),)

    assert check_gradients(value, grads, (x,)) <= 1e-4


# --------------------------------------------------------------- upsample

def test_upsample_identity_factor_one(rng):
    x = rng.normal(size=(1, 2, 3, 3))
    out, _ = ops.bilinear_upsample_forward(x, 1)
    assert np.array_equal(out, x)


def test_upsample_constant(rng):
    x = np.full((1, 1, 3, 3), 2.5)
    out, _ = ops.bilinear_upsample_forward(x, 4)
    assert out.shape == (1, 1, 12, 12)
    assert np.allclose(out, 2.5, atol=1e-12)


def test_upsample_2x2_to_4x4():
    x = np.array([[[[0.0, 1.0], [2.0, 3.0]]]])
    out, _ = ops.bilinear_upsample_forward(x, 2)
    assert out.shape == (1, 1, 4, 4)
    # half-pixel centers: first/last rows replicate edges, interior blends
    assert np.allclose(out[0, 0, 0], [0.0, 0.25, 0.75, 1.0])
    assert np.allclose(out[0, 0, :, 0], [0.0, 0.5, 1.5, 2.0])


def test_upsample_gradient_is_adjoint(rng):
    x = rng.normal(size=(1, 2, 3, 4))
    g = rng.normal(size=(1, 2, 9, 12))
    out, cache = ops.bilinear_upsample_forward(x, 3)
    gx = ops.bilinear_upsample_backward(g, cache)
    # <Ax, g> == <x, A^T g> for the linear interpolation operator
    assert np.isclose(np.vdot(out, g), np.vdot(x, gx), rtol=1e-12)

    def value():
        out, _ = ops.bilinear_upsample_forward(x, 3)
        return float(np.sum(out * g))

    def grads():
        _, cache = ops.bilinear_upsample_forward(x, 3)
        return (ops.bilinear_upsample_backward(g, cache),)

    assert check_gradients(value, grads, (x,)) <= 1e-4


def test_bilinear_resize_rows_normalized():
    m = ops.bilinear_matrix(5, 13)
    assert m.shape == (13, 5)
    assert np.allclose(m.sum(axis=1), 1.0, atol=1e-12)


# ------------------------------------------------------------------ misc

def test_clipped_log_and_grad():
    p = np.array([1e-12, 1e-8, 0.5, 1.0])
    v = ops.clipped_log(p, 1e-8)
    assert np.allclose(v, [np.log(1e-8), np.log(1e-8), np.log(0.5), 0.0])
    g = ops.clipped_log_grad(p, 1e-8)
    assert g[0] == 0.0 and g[2] == 2.0 and g[3] == 1.0


def test_check_finite():
    ops.check_finite("ok", np.ones(3))
    with pytest.raises(NumericsError, match="bad_tensor"):
        ops.check_finite("bad_tensor", np.array([1.0, np.nan]))
    with pytest.raises(NumericsError):
        ops.check_finite("inf_tensor", np.array([np.inf]))


def test_max_rel_error_denominator_floor():
    assert max_rel_error(np.array([0.0]), np.array([0.0])) == 0.0
    assert max_rel_error(np.array([2.0]), np.array([1.0])) == 0.5


def test_determinism_bitwise(rng):
    x = rng.normal(size=(2, 3, 8, 8))
    w = rng.normal(size=(4, 3, 3, 3))
    a = conv(x, w, padding=1)
    b = conv(x.copy(), w.copy(), padding=1)
    assert np.array_equal(a, b)


def test_parameter_zero_grad(rng):
    p = ops.Parameter("w", rng.normal(size=(2, 2)))
    p.grad += 1.0
    p.zero_grad()
    assert not np.any(p.grad)
    assert p.grad.shape == p.data.shape
