"""Direct discrete Fourier transform for text-embedding sequences.

Desk scale only (N <= 64), so the O(N^2) matrix form is used; the
transform runs along axis 0, independently per column. Forward is
unnormalized, the inverse carries 1/N.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation


@dataclass
class ComplexSpectrum:
    re: np.ndarray
    im: np.ndarray

    def __post_init__(self):
        self.re = np.asarray(self.re, dtype=np.float64)
        self.im = np.asarray(self.im, dtype=np.float64)
        if self.re.shape != self.im.shape:
            raise ContractViolation(
                f"spectrum re/im shape mismatch: {self.re.shape} vs {self.im.shape}")

    @property
    def shape(self):
        return self.re.shape


def _dft_matrix(n, sign):
    k = np.arange(n)
    return np.exp(sign * 2j * np.pi * np.outer(k, k) / n)


def dft(x) -> ComplexSpectrum:
    """X[k] = sum_n x[n] exp(-2pi i kn/N) along axis 0, per column."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] < 1 or x.size == 0:
        raise ContractViolation(f"dft expects a non-empty N x C matrix, got {x.shape}")
    spec = _dft_matrix(x.shape[0], -1) @ x
    return ComplexSpectrum(spec.real, spec.imag)


def idft(spectrum: ComplexSpectrum, tol=1e-9) -> np.ndarray:
    """Inverse transform; input must come from a real sequence."""
    n = spectrum.shape[0]
    z = spectrum.re + 1j * spectrum.im
    # conjugate symmetry X[k] == conj(X[N-k]) is what makes the result real
    sym_err = np.max(np.abs(z - np.conj(z[(-np.arange(n)) % n])))
    scale = max(1.0, float(np.max(np.abs(z))))
    if sym_err > tol * scale:
        raise ContractViolation(
            f"idft input is not conjugate-symmetric (residual {sym_err:.3e})")
    out = (_dft_matrix(n, +1) @ z) / n
    return out.real
