"""Tensor arithmetic, reverse-mode gradients, FFT and gradient checking."""
from . import tensor as ops
from .fft import ComplexSpectrum, SymmetryError, cfft, fft, icfft, ifft
from .gradcheck import (check_parameters, compare_parameters, difference_noise_floor,
                        finite_difference_check, relative_error)
from .tensor import Tensor, backward, no_grad, tensor

__all__ = [
    "ComplexSpectrum",
    "SymmetryError",
    "Tensor",
    "backward",
    "cfft",
    "check_parameters",
    "compare_parameters",
    "difference_noise_floor",
    "fft",
    "finite_difference_check",
    "icfft",
    "ifft",
    "no_grad",
    "ops",
    "relative_error",
    "tensor",
]
