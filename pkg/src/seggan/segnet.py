"""Dilated-convolution segmentation network.

Layout: a stride-2 stem, four residual stages (the first two stride 2, the
last two stride 1 with growing dilation, so the deepest features sit at 1/8
resolution), a pyramid of parallel dilated 3x3 convolutions projecting to
class scores whose branches are summed, bilinear upsampling by 8 back to
input resolution, and a channel softmax.

The toy preset is a narrow instance of the same shape; the full-scale preset
mirrors a ResNet-101 style backbone with pyramid rates {6, 12, 18, 24}.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import ops
from .errors import ConfigurationError
from .layers import BatchNorm2d, Conv2d

OUTPUT_STRIDE = 8


@dataclasses.dataclass(frozen=True)
class SegNetConfig:
    num_classes: int = 4
    base_channels: int = 16
    blocks_per_stage: tuple = (2, 2, 2, 2)
    stage_dilations: tuple = (2, 4)  # for the two stride-1 stages
    aspp_rates: tuple = (2, 4, 8)

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.base_channels < 1:
            raise ConfigurationError("base_channels must be positive")
        if len(self.blocks_per_stage) != 4 or any(b < 1 for b in self.blocks_per_stage):
            raise ConfigurationError(
                f"blocks_per_stage needs 4 positive entries, got {self.blocks_per_stage}"
            )
        if len(self.stage_dilations) != 2 or any(d < 1 for d in self.stage_dilations):
            raise ConfigurationError(
                f"stage_dilations needs 2 positive entries, got {self.stage_dilations}"
            )
        if not self.aspp_rates or any(r < 1 for r in self.aspp_rates):
            raise ConfigurationError(
                f"aspp_rates needs at least one positive rate, got {self.aspp_rates}"
            )


def full_scale_segnet_config(num_classes=21):
    return SegNetConfig(num_classes=num_classes, base_channels=64,
                        blocks_per_stage=(3, 4, 23, 3), stage_dilations=(2, 4),
                        aspp_rates=(6, 12, 18, 24))


class ResidualBlock:
    """conv-bn-relu-conv-bn plus a skip, relu after the sum.

    The skip is the identity when shapes allow, otherwise a 1x1 projection
    with its own batch norm.
    """

    def __init__(self, name, in_channels, out_channels, rng, *, stride=1,
                 dilation=1, dtype=np.float64):
        self.conv1 = Conv2d(f"{name}.conv1", in_channels, out_channels, 3, rng,
                            stride=stride, padding=dilation, dilation=dilation,
                            bias=False, dtype=dtype)
        self.bn1 = BatchNorm2d(f"{name}.bn1", out_channels, dtype=dtype)
        self.conv2 = Conv2d(f"{name}.conv2", out_channels, out_channels, 3, rng,
                            stride=1, padding=dilation, dilation=dilation,
                            bias=False, dtype=dtype)
        self.bn2 = BatchNorm2d(f"{name}.bn2", out_channels, dtype=dtype)
        self.proj = None
        self.bn_proj = None
        if stride != 1 or in_channels != out_channels:
            self.proj = Conv2d(f"{name}.proj", in_channels, out_channels, 1, rng,
                               stride=stride, bias=False, dtype=dtype)
            self.bn_proj = BatchNorm2d(f"{name}.bn_proj", out_channels, dtype=dtype)

    def forward(self, x, mode):
        h1, c1 = self.conv1.forward(x)
        h1, cb1 = self.bn1.forward(h1, mode)
        h1, ca1 = ops.relu_forward(h1)
        h2, c2 = self.conv2.forward(h1)
        h2, cb2 = self.bn2.forward(h2, mode)
        if self.proj is not None:
            skip, cp = self.proj.forward(x)
            skip, cbp = self.bn_proj.forward(skip, mode)
        else:
            skip, cp, cbp = x, None, None
        out, ca2 = ops.relu_forward(h2 + skip)
        return out, (c1, cb1, ca1, c2, cb2, cp, cbp, ca2)

    def backward(self, grad_out, cache, accumulate=True):
        c1, cb1, ca1, c2, cb2, cp, cbp, ca2 = cache
        g = ops.relu_backward(grad_out, ca2)
        gb = self.bn2.backward(g, cb2, accumulate)
        gb = self.conv2.backward(gb, c2, accumulate)
        gb = ops.relu_backward(gb, ca1)
        gb = self.bn1.backward(gb, cb1, accumulate)
        gx = self.conv1.backward(gb, c1, accumulate)
        if self.proj is not None:
            gs = self.bn_proj.backward(g, cbp, accumulate)
            gx = gx + self.proj.backward(gs, cp, accumulate)
        else:
            gx = gx + g
        return gx

    def _layers(self):
        out = [self.conv1, self.bn1, self.conv2, self.bn2]
        if self.proj is not None:
            out += [self.proj, self.bn_proj]
        return out

    def parameters(self):
        return [p for layer in self._layers() for p in layer.parameters()]

    def buffers(self):
        return [b for layer in self._layers()
                if isinstance(layer, BatchNorm2d) for b in layer.buffers()]


class SegNet:
    def __init__(self, config: SegNetConfig, rng, dtype=np.float64):
        self.config = config
        self.dtype = dtype
        b = config.base_channels
        self.stem_conv = Conv2d("stem.conv", 3, b, 3, rng, stride=2, padding=1,
                                bias=False, dtype=dtype)
        self.stem_bn = BatchNorm2d("stem.bn", b, dtype=dtype)
        d2, d4 = config.stage_dilations
        stage_plan = [  # (out_channels, first stride, dilation)
            (b, 2, 1),
            (2 * b, 2, 1),
            (4 * b, 1, d2),
            (8 * b, 1, d4),
        ]
        self.stages = []
        in_ch = b
        for si, (out_ch, stride, dil) in enumerate(stage_plan):
            blocks = []
            for bi in range(config.blocks_per_stage[si]):
                blocks.append(ResidualBlock(
                    f"stage{si}.block{bi}", in_ch, out_ch, rng,
                    stride=stride if bi == 0 else 1, dilation=dil, dtype=dtype))
                in_ch = out_ch
            self.stages.append(blocks)
        self.aspp = [Conv2d(f"aspp.rate{r}", 8 * b, config.num_classes, 3, rng,
                            padding=r, dilation=r, bias=True, dtype=dtype)
                     for r in config.aspp_rates]

    def forward(self, image, mode):
        """image (N, 3, H, W) with H, W divisible by 8.

        Returns (prob_map, score_map, cache): per-pixel class distributions
        at input resolution and the pre-upsampling class scores at 1/8.
        """
        if image.ndim != 4 or image.shape[1] != 3:
            raise ConfigurationError(f"expected (N, 3, H, W) image, got {image.shape}")
        h, w = image.shape[2], image.shape[3]
        if h % OUTPUT_STRIDE or w % OUTPUT_STRIDE:
            raise ConfigurationError(
                f"input size {h}x{w} must be divisible by {OUTPUT_STRIDE}"
            )
        x, c_stem = self.stem_conv.forward(image)
        x, cb_stem = self.stem_bn.forward(x, mode)
        x, ca_stem = ops.relu_forward(x)
        block_caches = []
        for blocks in self.stages:
            for block in blocks:
                x, c = block.forward(x, mode)
                block_caches.append(c)
        aspp_caches = []
        scores = None
        for conv in self.aspp:
            y, c = conv.forward(x)
            aspp_caches.append(c)
            scores = y if scores is None else scores + y
        up, c_up = ops.bilinear_upsample_forward(scores, OUTPUT_STRIDE)
        prob, c_sm = ops.softmax_channels_forward(up)
        cache = (c_stem, cb_stem, ca_stem, block_caches, aspp_caches, c_up, c_sm)
        return prob, scores, cache

    def backward(self, grad_prob, cache, accumulate=True):
        c_stem, cb_stem, ca_stem, block_caches, aspp_caches, c_up, c_sm = cache
        g = ops.softmax_channels_backward(grad_prob, c_sm)
        g = ops.bilinear_upsample_backward(g, c_up)
        gx = None
        for conv, c in zip(self.aspp, aspp_caches):
            gi = conv.backward(g, c, accumulate)
            gx = gi if gx is None else gx + gi
        idx = len(block_caches)
        for blocks in reversed(self.stages):
            for block in reversed(blocks):
                idx -= 1
                gx = block.backward(gx, block_caches[idx], accumulate)
        gx = ops.relu_backward(gx, ca_stem)
        gx = self.stem_bn.backward(gx, cb_stem, accumulate)
        return self.stem_conv.backward(gx, c_stem, accumulate)

    def parameters(self):
        out = self.stem_conv.parameters() + self.stem_bn.parameters()
        for blocks in self.stages:
            for block in blocks:
                out += block.parameters()
        for conv in self.aspp:
            out += conv.parameters()
        return out

    def buffers(self):
        out = list(self.stem_bn.buffers())
        for blocks in self.stages:
            for block in blocks:
                out += block.buffers()
        return out

    def param_count(self):
        return sum(p.data.size for p in self.parameters())


def build_segnet(config: SegNetConfig, seed=0, dtype=np.float64):
    return SegNet(config, np.random.default_rng(seed), dtype=dtype)
