"""Dynamic Frequency Coupler.

ASFF: merge the three detail bands with a 3x3 conv, hard-threshold the
result with an iteration-decaying cutoff, upsample and fuse with the
same-phase low-level features. BTFF: fuse each phase's high-level
features with the opposite phase's approximation band.

The hard threshold keeps values strictly above g * lambda(p); its
gradient is straight-through on retained entries and zero elsewhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor, concat_channels, conv2d, make_op, upsample_bilinear
from .errors import ContractViolation
from .wavelet import WaveletBands


@dataclass
class SparsityScheduler:
    lambda0: float = 1.0
    gamma: float = 0.0001
    g: float = 0.1

    def __post_init__(self):
        if self.lambda0 <= 0:
            raise ContractViolation(f"lambda0 must be > 0, got {self.lambda0}")
        if self.gamma < 0:
            raise ContractViolation(f"gamma must be >= 0, got {self.gamma}")
        if self.g < 0:
            raise ContractViolation(f"g must be >= 0, got {self.g}")

    def strength(self, p: int) -> float:
        if p < 0:
            raise ContractViolation(f"iteration p must be >= 0, got {p}")
        return self.lambda0 * math.exp(-self.gamma * p)

    def threshold(self, p: int) -> float:
        return self.g * self.strength(p)


def sparsity_strength(scheduler: SparsityScheduler, p: int) -> float:
    return scheduler.strength(p)


def sparse_threshold(h: Tensor, scheduler: SparsityScheduler, p: int) -> Tensor:
    """Zero entries with |h| <= g*lambda(p); straight-through gradient."""
    cut = scheduler.threshold(p)
    mask = np.abs(h.data) > cut
    out = np.where(mask, h.data, 0)

    def backward(g):
        if h.requires_grad:
            h._accumulate(g * mask)

    return make_op(out, (h,), backward)


class AsffBlock:
    """One pyramid level's adaptive sparse frequency fusion."""

    def __init__(self, name, channels, low_channels, scheduler, rng, dtype=np.float32):
        self.scheduler = scheduler
        k = 3
        self.merge_w = Parameter(
            f"{name}.merge.weight",
            ad.uniform_init(rng, (channels, 3 * channels, k, k), 3 * channels * k * k, dtype))
        self.merge_b = Parameter(f"{name}.merge.bias", np.zeros(channels, dtype=dtype))
        self.fuse_w = Parameter(
            f"{name}.fuse.weight",
            ad.uniform_init(rng, (low_channels, channels + low_channels, k, k),
                            (channels + low_channels) * k * k, dtype))
        self.fuse_b = Parameter(f"{name}.fuse.bias", np.zeros(low_channels, dtype=dtype))

    def parameters(self):
        return [self.merge_w, self.merge_b, self.fuse_w, self.fuse_b]


class BtffBlock:
    """One pyramid level's bidirectional temporal frequency fusion."""

    def __init__(self, name, channels, rng, dtype=np.float32):
        k = 3
        self.fuse_w = Parameter(
            f"{name}.fuse.weight",
            ad.uniform_init(rng, (channels, 2 * channels, k, k), 2 * channels * k * k, dtype))
        self.fuse_b = Parameter(f"{name}.fuse.bias", np.zeros(channels, dtype=dtype))

    def parameters(self):
        return [self.fuse_w, self.fuse_b]


def _check_half_res(bands_shape, feat_shape, what):
    if (bands_shape[2] * 2, bands_shape[3] * 2) != (feat_shape[2], feat_shape[3]):
        raise ContractViolation(
            f"{what}: bands {bands_shape} must be exactly half the resolution "
            f"of features {feat_shape}")


def merge_high_bands(block: AsffBlock, bands: WaveletBands) -> Tensor:
    return conv2d(concat_channels(bands.hl, bands.lh, bands.hh),
                  block.merge_w.tensor, block.merge_b.tensor, stride=1, padding=1)


def asff_fuse(block: AsffBlock, f_low: Tensor, bands: WaveletBands, p: int) -> Tensor:
    """H = Conv(Cat(HL,LH,HH)); threshold; P = Conv(Cat(Up(H~,2), f_low))."""
    _check_half_res(bands.hl.shape, f_low.shape, "asff_fuse")
    h = merge_high_bands(block, bands)
    h_sparse = sparse_threshold(h, block.scheduler, p)
    return conv2d(concat_channels(upsample_bilinear(h_sparse, 2), f_low),
                  block.fuse_w.tensor, block.fuse_b.tensor, stride=1, padding=1)


def low_fuse(block: BtffBlock, f_high: Tensor, ll: Tensor) -> Tensor:
    """P = Conv(Cat(Up(LL,2), F)); shared by BTFF and the ablation variants."""
    _check_half_res(ll.shape, f_high.shape, "low-frequency fuse")
    return conv2d(concat_channels(upsample_bilinear(ll, 2), f_high),
                  block.fuse_w.tensor, block.fuse_b.tensor, stride=1, padding=1)


def btff_fuse(block: BtffBlock, f_high_this: Tensor, phase_this: int,
              ll_other: Tensor, phase_other: int) -> Tensor:
    """Cross-temporal fusion; pairing a phase with itself is an error."""
    if phase_this == phase_other:
        raise ContractViolation(
            f"btff_fuse requires opposite temporal phases, got t={phase_this} for both")
    return low_fuse(block, f_high_this, ll_other)
