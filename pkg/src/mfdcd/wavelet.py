"""Single-level orthonormal 2-D Haar analysis/synthesis over feature maps.

Per 2x2 block [[a, b], [c, d]]:
    LL = (a+b+c+d)/2   LH = (a+b-c-d)/2  (vertical detail)
    HL = (a-b+c-d)/2   HH = (a-b-c+d)/2
The transform is orthonormal, so synthesis is both the inverse and the
adjoint; that is exactly what the backward passes use.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, make_op
from .errors import ContractViolation


@dataclass
class WaveletBands:
    ll: Tensor
    hl: Tensor
    lh: Tensor
    hh: Tensor

    def shapes(self):
        return [b.shape for b in (self.ll, self.hl, self.lh, self.hh)]


def _analysis(x: np.ndarray):
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    ll = (a + b + c + d) / 2
    lh = (a + b - c - d) / 2
    hl = (a - b + c - d) / 2
    hh = (a - b - c + d) / 2
    return ll, hl, lh, hh


def _synthesis(ll, hl, lh, hh):
    a = (ll + lh + hl + hh) / 2
    b = (ll + lh - hl - hh) / 2
    c = (ll - lh + hl - hh) / 2
    d = (ll - lh - hl + hh) / 2
    shape = ll.shape[:-2] + (2 * ll.shape[-2], 2 * ll.shape[-1])
    out = np.empty(shape, dtype=ll.dtype)
    out[..., 0::2, 0::2] = a
    out[..., 0::2, 1::2] = b
    out[..., 1::2, 0::2] = c
    out[..., 1::2, 1::2] = d
    return out


def dwt2(x: Tensor) -> WaveletBands:
    """Analysis transform; requires even spatial extents (no implicit padding)."""
    if x.data.ndim != 4:
        raise ContractViolation(f"dwt2 expects a 4-D feature map, got {x.shape}")
    h, w = x.shape[2], x.shape[3]
    if h % 2 or w % 2:
        raise ContractViolation(f"dwt2 requires even spatial extents, got {h}x{w}")
    ll, hl, lh, hh = _analysis(x.data)

    # Each band node pushes its own adjoint contribution into x; synthesis
    # is linear, so per-band contributions sum to the full adjoint even
    # when some bands are unused downstream.
    def band(slot, data):
        def backward(g):
            if x.requires_grad:
                parts = [np.zeros_like(g)] * 4
                parts[slot] = g
                x._accumulate(_synthesis(*parts))
        return make_op(data, (x,), backward)

    return WaveletBands(band(0, ll), band(1, hl), band(2, lh), band(3, hh))


def idwt2(bands: WaveletBands) -> Tensor:
    """Synthesis transform, exact inverse of dwt2."""
    ll, hl, lh, hh = bands.ll, bands.hl, bands.lh, bands.hh
    shapes = {t.shape for t in (ll, hl, lh, hh)}
    if len(shapes) != 1:
        raise ContractViolation(f"idwt2 band shape mismatch: {sorted(shapes)}")
    out = _synthesis(ll.data, hl.data, lh.data, hh.data)

    def backward(g):
        gll, ghl, glh, ghh = _analysis(g)
        for t, gt in ((ll, gll), (hl, ghl), (lh, glh), (hh, ghh)):
            if t.requires_grad:
                t._accumulate(gt)

    return make_op(out, (ll, hl, lh, hh), backward)
