"""Desk-scale hierarchical feature extractor (residual, stride ladder 4/8/16/32).

Stem: two stride-2 3x3 convs. Each stage is `blocks_per_stage` residual
units; stage 1 keeps the stem stride, stages 2-4 downsample by 2 at
entry. Both temporal phases run through the same weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor, conv2d, relu
from .errors import ContractViolation


@dataclass
class PyramidConfig:
    stem_channels: int = 8
    stage_channels: list = field(default_factory=lambda: [16, 32, 64, 128])
    blocks_per_stage: int = 1
    input_channels: int = 3

    def __post_init__(self):
        if len(self.stage_channels) != 4:
            raise ContractViolation("stage_channels must list exactly 4 widths")
        if self.blocks_per_stage < 1:
            raise ContractViolation("blocks_per_stage must be >= 1")


def _conv_param(name, rng, out_c, in_c, k, dtype):
    w = Parameter(f"{name}.weight",
                  ad.uniform_init(rng, (out_c, in_c, k, k), in_c * k * k, dtype))
    b = Parameter(f"{name}.bias", np.zeros(out_c, dtype=dtype))
    return w, b


class ResidualUnit:
    def __init__(self, name, in_c, out_c, stride, rng, dtype):
        self.stride = stride
        self.w1, self.b1 = _conv_param(f"{name}.conv1", rng, out_c, in_c, 3, dtype)
        self.w2, self.b2 = _conv_param(f"{name}.conv2", rng, out_c, out_c, 3, dtype)
        if stride != 1 or in_c != out_c:
            self.wp, self.bp = _conv_param(f"{name}.proj", rng, out_c, in_c, 1, dtype)
        else:
            self.wp = self.bp = None

    def __call__(self, x):
        y = relu(conv2d(x, self.w1.tensor, self.b1.tensor, stride=self.stride, padding=1))
        y = conv2d(y, self.w2.tensor, self.b2.tensor, stride=1, padding=1)
        if self.wp is not None:
            skip = conv2d(x, self.wp.tensor, self.bp.tensor, stride=self.stride, padding=0)
        else:
            skip = x
        return relu(y + skip)

    def parameters(self):
        out = [self.w1, self.b1, self.w2, self.b2]
        if self.wp is not None:
            out += [self.wp, self.bp]
        return out


class Backbone:
    def __init__(self, config: PyramidConfig, rng, dtype=np.float32):
        self.config = config
        c = config.stem_channels
        self.stem1_w, self.stem1_b = _conv_param(
            "backbone.stem1", rng, c, config.input_channels, 3, dtype)
        self.stem2_w, self.stem2_b = _conv_param("backbone.stem2", rng, c, c, 3, dtype)
        self.stages = []
        in_c = c
        for i, out_c in enumerate(config.stage_channels):
            blocks = []
            for j in range(config.blocks_per_stage):
                stride = 2 if (i > 0 and j == 0) else 1
                blocks.append(ResidualUnit(
                    f"backbone.stage{i + 1}.block{j + 1}", in_c, out_c, stride, rng, dtype))
                in_c = out_c
            self.stages.append(blocks)

    def parameters(self):
        out = [self.stem1_w, self.stem1_b, self.stem2_w, self.stem2_b]
        for blocks in self.stages:
            for b in blocks:
                out += b.parameters()
        return out

    def extract(self, image: Tensor):
        """Return [F1, F2, F3, F4]; input sides must be multiples of 64."""
        if image.data.ndim != 4 or image.shape[1] != self.config.input_channels:
            raise ContractViolation(
                f"extract expects Bx{self.config.input_channels}xHxW, got {image.shape}")
        h, w = image.shape[2], image.shape[3]
        if h % 64 or w % 64:
            raise ContractViolation(
                f"input sides must be multiples of 64, got {h}x{w}")
        x = relu(conv2d(image, self.stem1_w.tensor, self.stem1_b.tensor,
                        stride=2, padding=1))
        x = relu(conv2d(x, self.stem2_w.tensor, self.stem2_b.tensor,
                        stride=2, padding=1))
        features = []
        for blocks in self.stages:
            for b in blocks:
                x = b(x)
            features.append(x)
        return features
