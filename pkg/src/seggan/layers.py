"""Thin stateful wrappers around the functional primitives.

A layer owns its Parameters (and running buffers for normalization). The
forward pass returns (output, cache) like the primitives do; backward takes
the cache back, accumulates parameter gradients unless told otherwise, and
returns the input gradient.
"""

from __future__ import annotations

import numpy as np

from . import ops


class Conv2d:
    def __init__(self, name, in_channels, out_channels, kernel, rng, *, stride=1,
                 padding=0, dilation=1, bias=True, dtype=np.float64):
        self.name = name
        self.spec = ops.ConvSpec(in_channels, out_channels, kernel,
                                 stride=stride, padding=padding, dilation=dilation)
        fan_in = in_channels * kernel * kernel
        self.weight = ops.Parameter(f"{name}.weight",
                                    ops.he_normal(rng, self.spec.weight_shape, fan_in, dtype))
        self.bias = None
        if bias:
            self.bias = ops.Parameter(f"{name}.bias", np.zeros(out_channels, dtype=dtype),
                                      decay_exempt=True)

    def forward(self, x):
        b = self.bias.data if self.bias is not None else None
        return ops.conv2d_forward(x, self.weight.data, b, self.spec)

    def backward(self, grad_out, cache, accumulate=True):
        gx, gw, gb = ops.conv2d_backward(grad_out, cache)
        if accumulate:
            self.weight.grad += gw
            if self.bias is not None:
                self.bias.grad += gb
        return gx

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])


class BatchNorm2d:
    def __init__(self, name, channels, dtype=np.float64):
        self.name = name
        self.gamma = ops.Parameter(f"{name}.gamma", np.ones(channels, dtype=dtype),
                                   decay_exempt=True)
        self.beta = ops.Parameter(f"{name}.beta", np.zeros(channels, dtype=dtype),
                                  decay_exempt=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def forward(self, x, mode):
        return ops.batch_norm_forward(x, self.gamma.data, self.beta.data,
                                      self.running_mean, self.running_var, mode)

    def backward(self, grad_out, cache, accumulate=True):
        gx, ggamma, gbeta = ops.batch_norm_backward(grad_out, cache)
        if accumulate:
            self.gamma.grad += ggamma
            self.beta.grad += gbeta
        return gx

    def parameters(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return [(f"{self.name}.running_mean", self.running_mean),
                (f"{self.name}.running_var", self.running_var)]
