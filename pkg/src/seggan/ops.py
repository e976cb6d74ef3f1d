"""Dense NCHW tensor primitives with hand-written backward passes.

Everything here operates on plain numpy arrays laid out ``[batch, channel,
height, width]``. Each differentiable primitive is a pair of functions:
``*_forward`` returns ``(output, cache)`` and the matching ``*_backward``
consumes the upstream gradient plus that cache. There is no autodiff tape;
the networks in this package wire their fixed pipelines by hand.

Conventions:

* convolution is cross-correlation (no kernel flip),
* batched operations never mix samples, so per-sample results do not depend
  on batch composition,
* caches hold references, not copies; callers must not mutate inputs between
  the forward and backward call.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .errors import ConfigurationError, DegenerateBatchError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclasses.dataclass
class Parameter:
    """A trainable array plus its gradient accumulator.

    ``decay_exempt`` marks parameters (biases, normalization scales/shifts,
    CRF compatibilities) that weight decay must skip.
    """

    name: str
    data: np.ndarray
    decay_exempt: bool = False
    grad: np.ndarray = None

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad[...] = 0


def he_normal(rng, shape, fan_in, dtype):
    """He initialization: normal with std sqrt(2 / fan_in)."""
    std = math.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)


@dataclasses.dataclass(frozen=True)
class ConvSpec:
    """Static description of a 2-d convolution.

    Kernels are square and odd so that padding = dilation * (kernel // 2)
    preserves spatial size at stride 1.
    """

    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    dilation: int = 1

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigurationError(f"channel counts must be positive, got {self}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigurationError(f"kernel size must be odd and positive, got {self.kernel}")
        if self.stride < 1 or self.dilation < 1 or self.padding < 0:
            raise ConfigurationError(f"invalid stride/padding/dilation in {self}")

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels, self.kernel, self.kernel)

    def out_size(self, size: int) -> int:
        eff = self.dilation * (self.kernel - 1) + 1
        out = (size + 2 * self.padding - eff) // self.stride + 1
        if out < 1:
            raise ConfigurationError(
                f"input size {size} too small for kernel {self.kernel} "
                f"(dilation {self.dilation}, padding {self.padding})"
            )
        return out


def _im2col(xp, kernel, stride, dilation, out_h, out_w):
    # (N, C, Hp, Wp) -> (N, C*k*k, out_h*out_w); column order is (c, ki, kj)
    n, c, _, _ = xp.shape
    cols = np.empty((n, c, kernel, kernel, out_h, out_w), dtype=xp.dtype)
    for i in range(kernel):
        ys = slice(i * dilation, i * dilation + (out_h - 1) * stride + 1, stride)
        for j in range(kernel):
            xs = slice(j * dilation, j * dilation + (out_w - 1) * stride + 1, stride)
            cols[:, :, i, j] = xp[:, :, ys, xs]
    return cols.reshape(n, c * kernel * kernel, out_h * out_w)


def _col2im(cols, x_shape, kernel, stride, padding, dilation, out_h, out_w):
    # adjoint of _im2col: overlapping windows accumulate
    n, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    gxp = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    cols6 = cols.reshape(n, c, kernel, kernel, out_h, out_w)
    for i in range(kernel):
        ys = slice(i * dilation, i * dilation + (out_h - 1) * stride + 1, stride)
        for j in range(kernel):
            xs = slice(j * dilation, j * dilation + (out_w - 1) * stride + 1, stride)
            gxp[:, :, ys, xs] += cols6[:, :, i, j]
    if padding:
        gxp = gxp[:, :, padding:padding + h, padding:padding + w]
    return np.ascontiguousarray(gxp)


@dataclasses.dataclass
class Conv2dCache:
    cols: np.ndarray
    x_shape: tuple
    weight: np.ndarray
    spec: ConvSpec
    out_hw: tuple
    has_bias: bool


def conv2d_forward(x, weight, bias, spec: ConvSpec):
    """Cross-correlation with stride/padding/dilation via im2col + matmul."""
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ConfigurationError(
            f"conv2d input shape {x.shape} does not match spec {spec} "
            f"(expected channel axis {spec.in_channels})"
        )
    if weight.shape != spec.weight_shape:
        raise ConfigurationError(
            f"conv2d weight shape {weight.shape} does not match spec shape {spec.weight_shape}"
        )
    n, _, h, w = x.shape
    out_h, out_w = spec.out_size(h), spec.out_size(w)
    if spec.padding:
        xp = np.pad(x, ((0, 0), (0, 0), (spec.padding,) * 2, (spec.padding,) * 2))
    else:
        xp = x
    cols = _im2col(xp, spec.kernel, spec.stride, spec.dilation, out_h, out_w)
    w2 = weight.reshape(spec.out_channels, -1)
    y = np.matmul(w2, cols)  # (O, Q) @ (N, Q, L) -> (N, O, L)
    if bias is not None:
        y += bias.reshape(1, -1, 1)
    y = y.reshape(n, spec.out_channels, out_h, out_w)
    return y, Conv2dCache(cols, x.shape, weight, spec, (out_h, out_w), bias is not None)


def conv2d_backward(grad_out, cache: Conv2dCache):
    """Returns (grad_input, grad_weight, grad_bias); grad_bias is None without bias."""
    spec = cache.spec
    n = cache.x_shape[0]
    out_h, out_w = cache.out_hw
    g2 = grad_out.reshape(n, spec.out_channels, out_h * out_w)
    grad_b = g2.sum(axis=(0, 2)) if cache.has_bias else None
    grad_w = np.matmul(g2, cache.cols.transpose(0, 2, 1)).sum(axis=0)
    grad_w = grad_w.reshape(spec.weight_shape)
    gcols = np.matmul(cache.weight.reshape(spec.out_channels, -1).T, g2)
    grad_x = _col2im(gcols, cache.x_shape, spec.kernel, spec.stride, spec.padding,
                     spec.dilation, out_h, out_w)
    return grad_x, grad_w, grad_b


def leaky_relu_forward(x, slope):
    if not 0.0 <= slope < 1.0:
        raise ConfigurationError(f"leaky_relu slope must be in [0, 1), got {slope}")
    # derivative at exactly 0 is the slope: mask is strict
    mask = x > 0
    return np.where(mask, x, slope * x), (mask, slope)


def leaky_relu_backward(grad_out, cache):
    mask, slope = cache
    return np.where(mask, grad_out, slope * grad_out)


def relu_forward(x):
    return leaky_relu_forward(x, 0.0)


relu_backward = leaky_relu_backward


def sigmoid_forward(x):
    # split on sign to avoid overflow in exp
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return y, y


def sigmoid_backward(grad_out, y):
    return grad_out * y * (1.0 - y)


def softmax_channels_forward(x):
    """Softmax over the channel axis of an NCHW tensor."""
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    y = e / e.sum(axis=1, keepdims=True)
    return y, y


def softmax_channels_backward(grad_out, y):
    dot = (grad_out * y).sum(axis=1, keepdims=True)
    return y * (grad_out - dot)


@dataclasses.dataclass
class BatchNormCache:
    xhat: np.ndarray
    gamma: np.ndarray
    inv_std: np.ndarray
    mode: str
    count: int


def batch_norm_forward(x, gamma, beta, running_mean, running_var, mode,
                       momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-channel batch normalization over (N, H, W).

    Train mode uses biased batch statistics and updates the running buffers
    in place: running <- (1 - momentum) * running + momentum * batch.
    Eval mode normalizes with the running buffers and touches nothing.
    """
    if mode not in ("train", "eval"):
        raise ConfigurationError(f"batch_norm mode must be 'train' or 'eval', got {mode!r}")
    n, c, h, w = x.shape
    count = n * h * w
    if mode == "train":
        if count == 1:
            raise DegenerateBatchError(
                "batch statistics over a single element per channel are degenerate"
            )
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    y = gamma.reshape(1, c, 1, 1) * xhat + beta.reshape(1, c, 1, 1)
    return y, BatchNormCache(xhat, gamma, inv_std, mode, count)


def batch_norm_backward(grad_out, cache: BatchNormCache):
    """Returns (grad_x, grad_gamma, grad_beta).

    In train mode the batch mean/var depend on x, which yields the usual
    three-term expression; in eval mode the statistics are constants.
    """
    c = cache.gamma.shape[0]
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    grad_gamma = (grad_out * cache.xhat).sum(axis=(0, 2, 3))
    scale = (cache.gamma * cache.inv_std).reshape(1, c, 1, 1)
    if cache.mode == "eval":
        return grad_out * scale, grad_gamma, grad_beta
    m = cache.count
    gx = (scale / m) * (
        m * grad_out
        - grad_beta.reshape(1, c, 1, 1)
        - cache.xhat * grad_gamma.reshape(1, c, 1, 1)
    )
    return gx, grad_gamma, grad_beta


def bilinear_matrix(in_size, out_size, dtype=np.float64):
    """Dense (out_size, in_size) interpolation matrix, half-pixel centers.

    Source coordinate of output i is (i + 0.5) * in/out - 0.5, clamped at the
    borders. Rows sum to 1, so resizing preserves constants.
    """
    if in_size < 1 or out_size < 1:
        raise ConfigurationError("resize sizes must be positive")
    m = np.zeros((out_size, in_size), dtype=dtype)
    ratio = in_size / out_size
    for i in range(out_size):
        src = (i + 0.5) * ratio - 0.5
        i0 = math.floor(src)
        frac = src - i0
        lo = min(max(i0, 0), in_size - 1)
        hi = min(max(i0 + 1, 0), in_size - 1)
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


def bilinear_resize(x, out_h, out_w):
    """Non-differentiable bilinear resize of an NCHW tensor (used in augmentation)."""
    ry = bilinear_matrix(x.shape[2], out_h, x.dtype)
    cx = bilinear_matrix(x.shape[3], out_w, x.dtype)
    return np.matmul(np.matmul(ry, x), cx.T)


def bilinear_upsample_forward(x, factor):
    """Upsample H and W by an integer factor."""
    if not isinstance(factor, int) or factor < 1:
        raise ConfigurationError(f"upsample factor must be a positive integer, got {factor}")
    _, _, h, w = x.shape
    ry = bilinear_matrix(h, h * factor, x.dtype)
    cx = bilinear_matrix(w, w * factor, x.dtype)
    y = np.matmul(np.matmul(ry, x), cx.T)
    return y, (ry, cx)


def bilinear_upsample_backward(grad_out, cache):
    ry, cx = cache
    # exact adjoint of the forward matrix product
    return np.matmul(np.matmul(ry.T, grad_out), cx)


def clipped_log(p, eps):
    """log(clip(p, eps, 1)); keeps log-probabilities finite."""
    return np.log(np.clip(p, eps, 1.0))


def clipped_log_grad(p, eps):
    """Derivative of clipped_log: 1/p inside the clamp window, 0 outside."""
    g = np.zeros_like(p)
    inside = (p >= eps) & (p <= 1.0)
    g[inside] = 1.0 / p[inside]
    return g


def check_finite(name, *arrays):
    """Raise NumericsError naming the offending tensor if any entry is non-finite."""
    from .errors import NumericsError

    for i, a in enumerate(arrays):
        if not np.all(np.isfinite(a)):
            suffix = f"[{i}]" if len(arrays) > 1 else ""
            raise NumericsError(f"non-finite values in {name}{suffix}")
