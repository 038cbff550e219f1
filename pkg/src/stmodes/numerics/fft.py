"""Discrete Fourier transforms without an external FFT dependency.

Power-of-two lengths use an iterative radix-2 decimation-in-time transform;
every other length goes through Bluestein's chirp-z identity, which rewrites
the DFT as a circular convolution of power-of-two length.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ..errors import InvalidInputError

__all__ = ["ComplexSpectrum", "SymmetryError", "fft", "ifft", "cfft", "icfft"]

# imaginary residue below this absolute level is silently discarded by ifft
_DISCARD_ABS = 1e-9
# residue at or above this fraction of the real-part norm is a symmetry violation
_SYMMETRY_REL = 1e-6


class SymmetryError(InvalidInputError):
    """Raised when an inverse transform would leave a non-negligible imaginary part."""


@dataclass(frozen=True)
class ComplexSpectrum:
    """Spectrum of a length-``length`` real signal in standard (unshifted) bin order."""

    values: np.ndarray
    sample_spacing: float = 1.0

    @property
    def length(self) -> int:
        return int(self.values.shape[-1])

    def frequencies(self) -> np.ndarray:
        """Bin frequencies in cycles per unit of ``sample_spacing``."""
        n = self.length
        k = np.arange(n)
        k = np.where(k < (n + 1) // 2, k, k - n)
        return k / (n * self.sample_spacing)

    def energy(self) -> float:
        return float(np.sum(np.abs(self.values) ** 2))


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


@lru_cache(maxsize=64)
def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@lru_cache(maxsize=128)
def _twiddles(size: int, inverse: bool) -> np.ndarray:
    sign = 1.0 if inverse else -1.0
    return np.exp(sign * 2j * np.pi * np.arange(size // 2) / size)


def _radix2(x: np.ndarray, inverse: bool) -> np.ndarray:
    n = x.shape[-1]
    lead = x.shape[:-1]
    a = x[..., _bit_reverse(n)]
    size = 2
    while size <= n:
        half = size // 2
        a = a.reshape(*lead, n // size, size)
        even = a[..., :half]
        odd = a[..., half:] * _twiddles(size, inverse)
        a = np.concatenate([even + odd, even - odd], axis=-1)
        size *= 2
    return a.reshape(*lead, n)


@lru_cache(maxsize=32)
def _chirp(n: int) -> tuple[np.ndarray, np.ndarray, int]:
    # n^2 mod 2n keeps the phase argument small for long transforms
    k = np.arange(n, dtype=np.int64)
    w = np.exp(-1j * np.pi * ((k * k) % (2 * n)) / n)
    m = 1 << (2 * n - 1).bit_length()
    b = np.zeros(m, dtype=complex)
    b[:n] = np.conj(w)
    b[m - n + 1:] = np.conj(w[1:])[::-1]
    return w, _radix2(b, inverse=False), m


def _bluestein(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    w, b_hat, m = _chirp(n)
    a = np.zeros(x.shape[:-1] + (m,), dtype=complex)
    a[..., :n] = x * w
    conv = _radix2(_radix2(a, inverse=False) * b_hat, inverse=True) / m
    return conv[..., :n] * w


def cfft(x: np.ndarray) -> np.ndarray:
    """Forward DFT of complex data along the last axis: X_k = sum_n x_n e^{-2 pi i kn/N}."""
    x = np.asarray(x, dtype=complex)
    n = x.shape[-1]
    if n < 1:
        raise InvalidInputError("cannot transform an empty sequence")
    if n == 1:
        return x.copy()
    return _radix2(x, inverse=False) if _is_pow2(n) else _bluestein(x)


def icfft(x: np.ndarray) -> np.ndarray:
    """Inverse DFT along the last axis, including the 1/N factor."""
    x = np.asarray(x, dtype=complex)
    n = x.shape[-1]
    if _is_pow2(n):
        return _radix2(x, inverse=True) / n
    return np.conj(cfft(np.conj(x))) / n


def fft(signal, sample_spacing: float = 1.0) -> ComplexSpectrum:
    """Transform a real sequence (length >= 2) into its full spectrum."""
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] < 2:
        raise InvalidInputError(f"fft needs a 1-D sequence of length >= 2, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("fft input contains non-finite samples")
    return ComplexSpectrum(cfft(x), float(sample_spacing))


def ifft(spectrum: ComplexSpectrum | np.ndarray) -> np.ndarray:
    """Inverse transform of a Hermitian spectrum back to a real sequence."""
    values = spectrum.values if isinstance(spectrum, ComplexSpectrum) else np.asarray(spectrum)
    z = icfft(values)
    residue = float(np.linalg.norm(z.imag))
    scale = float(np.linalg.norm(z.real))
    if residue >= _DISCARD_ABS and residue >= _SYMMETRY_REL * scale:
        raise SymmetryError(
            f"spectrum is not Hermitian: imaginary residue {residue:.3e} "
            f"vs real norm {scale:.3e}"
        )
    return z.real.copy()
