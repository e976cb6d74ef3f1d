"""Fully convolutional discriminator with cascaded CRF refinement.

The input is a per-pixel label distribution field. Four mean-field CRF
modules refine it in sequence (each with its own learnable compatibility and
kernel mixture, all sharing one Gaussian kernel stack built from the image),
then a stack of stride-2 convolutions with leaky ReLU maps the refined field
to a confidence map in (0, 1) at 1/32 resolution. No normalization layers
anywhere in the discriminator.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import ops
from .convcrf import ConvCrfConfig, ConvCrfModule, validate_distribution_field
from .errors import ConfigurationError
from .layers import Conv2d


@dataclasses.dataclass(frozen=True)
class DiscriminatorConfig:
    channels: tuple = (8, 16, 32, 64, 1)
    kernel: int = 3
    stride: int = 2
    leaky_slope: float = 0.2
    num_crf_modules: int = 4
    crf: ConvCrfConfig = dataclasses.field(default_factory=ConvCrfConfig)
    label_smoothing: float = 0.1

    def __post_init__(self):
        if len(self.channels) < 1 or self.channels[-1] != 1:
            raise ConfigurationError(
                f"discriminator channels must end in 1, got {self.channels}"
            )
        if any(c < 1 for c in self.channels):
            raise ConfigurationError("discriminator channels must be positive")
        if self.stride < 1:
            raise ConfigurationError("stride must be positive")
        if self.num_crf_modules < 0:
            raise ConfigurationError("num_crf_modules must be >= 0")
        if not 0.0 <= self.label_smoothing < 0.5:
            raise ConfigurationError(
                f"label_smoothing must be in [0, 0.5), got {self.label_smoothing}"
            )
        if not 0.0 <= self.leaky_slope < 1.0:
            raise ConfigurationError(f"leaky_slope must be in [0, 1), got {self.leaky_slope}")

    @property
    def total_stride(self):
        return self.stride ** len(self.channels)


def full_scale_discriminator_config():
    return DiscriminatorConfig(channels=(64, 128, 256, 512, 1),
                               crf=ConvCrfConfig(filter_size=7, iterations=5))


def one_hot_encode(labels, num_classes, smoothing=0.0, dtype=np.float64,
                   ignore_value=255):
    """Labels (N, H, W) -> smoothed one-hot field (N, C, H, W).

    The true class gets 1 - smoothing * (C - 1) / C, every other class
    smoothing / C; ignored pixels become the uniform distribution.
    """
    if not 0.0 <= smoothing < 0.5:
        raise ConfigurationError(f"smoothing must be in [0, 0.5), got {smoothing}")
    n, h, w = labels.shape
    c = num_classes
    valid = labels != ignore_value
    if (valid & ((labels < 0) | (labels >= c))).any():
        raise ConfigurationError(
            f"labels contain values outside [0, {c}) that are not the ignore value"
        )
    off = smoothing / c
    on = 1.0 - smoothing * (c - 1) / c
    out = np.full((n, c, h, w), off, dtype=dtype)
    safe = np.where(valid, labels, 0)
    np.put_along_axis(out, safe[:, None], np.where(valid, on, off)[:, None].astype(dtype),
                      axis=1)
    out[np.broadcast_to(~valid[:, None], out.shape)] = 1.0 / c
    return out


class Discriminator:
    def __init__(self, config: DiscriminatorConfig, num_classes, rng,
                 dtype=np.float64):
        self.config = config
        self.num_classes = num_classes
        self.crf_modules = [
            ConvCrfModule(f"crf{i}", num_classes, config.crf, dtype=dtype)
            for i in range(config.num_crf_modules)
        ]
        chans = (num_classes,) + tuple(config.channels)
        self.convs = [
            Conv2d(f"conv{i}", chans[i], chans[i + 1], config.kernel, rng,
                   stride=config.stride, padding=config.kernel // 2, bias=True,
                   dtype=dtype)
            for i in range(len(config.channels))
        ]

    def forward(self, kernels, label_field, trace=None):
        """kernels: prebuilt Gaussian stack for the image batch.

        label_field (N, C, H, W) must be a valid distribution field with
        H, W divisible by the total stride. Returns (confidence, cache) with
        confidence of shape (N, 1, H/32, W/32) for the default depth.
        """
        validate_distribution_field("label_field", label_field)
        h, w = label_field.shape[2], label_field.shape[3]
        stride = self.config.total_stride
        if h % stride or w % stride:
            raise ConfigurationError(
                f"label field size {h}x{w} must be divisible by {stride}"
            )
        q = label_field
        crf_caches = []
        for mod in self.crf_modules:
            q, c = mod.forward(kernels, q)
            crf_caches.append(c)
            if trace is not None:
                trace.append(mod.name)
        x = q
        conv_caches = []
        act_caches = []
        last = len(self.convs) - 1
        for i, conv in enumerate(self.convs):
            x, c = conv.forward(x)
            conv_caches.append(c)
            if trace is not None:
                trace.append(conv.name)
            if i < last:
                x, a = ops.leaky_relu_forward(x, self.config.leaky_slope)
                act_caches.append(a)
        y, c_sig = ops.sigmoid_forward(x)
        return y, (crf_caches, conv_caches, act_caches, c_sig)

    def backward(self, grad_conf, cache, accumulate=True):
        """Returns the gradient w.r.t. the input label field."""
        crf_caches, conv_caches, act_caches, c_sig = cache
        g = ops.sigmoid_backward(grad_conf, c_sig)
        last = len(self.convs) - 1
        for i in range(last, -1, -1):
            if i < last:
                g = ops.leaky_relu_backward(g, act_caches[i])
            g = self.convs[i].backward(g, conv_caches[i], accumulate)
        for mod, c in zip(reversed(self.crf_modules), reversed(crf_caches)):
            g = mod.backward(g, c, accumulate)
        return g

    def parameters(self):
        out = []
        for mod in self.crf_modules:
            out += mod.parameters()
        for conv in self.convs:
            out += conv.parameters()
        return out

    def all_parameters(self):
        out = []
        for mod in self.crf_modules:
            out += mod.all_parameters()
        for conv in self.convs:
            out += conv.parameters()
        return out

    def param_count(self):
        return sum(p.data.size for p in self.all_parameters())
