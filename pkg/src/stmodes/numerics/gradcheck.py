"""Central finite-difference verification of recorded gradients."""
from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from ..errors import InvalidInputError
from .tensor import Tensor, backward, no_grad

__all__ = ["finite_difference_check", "check_parameters", "compare_parameters",
           "relative_error", "difference_noise_floor"]

_FLOOR = 1e-8
# differences within a few ulps of f carry no derivative information
_RESOLUTION_ULPS = 4.0


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |analytic - numeric| / max(|analytic|, 1e-8) over elements."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.abs(analytic), _FLOOR)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _evaluate(f: Callable[[], Tensor]) -> float:
    with no_grad():
        value = f()
    v = value.item() if isinstance(value, Tensor) else float(value)
    if not np.isfinite(v):
        raise FloatingPointError(f"function evaluated to non-finite value {v}")
    return v


def _central_differences(f: Callable[[], Tensor], target: Tensor, step: float) -> np.ndarray:
    flat = target.data.reshape(-1)
    numeric = np.empty(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = _evaluate(f)
        flat[i] = orig - step
        down = _evaluate(f)
        flat[i] = orig
        diff = up - down
        if abs(diff) <= _RESOLUTION_ULPS * np.spacing(max(abs(up), abs(down))):
            diff = 0.0
        numeric[i] = diff / (2.0 * step)
    return numeric.reshape(target.shape)


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor | np.ndarray,
                            step: float = 1e-5) -> float:
    """Compare backward() against central differences of ``f`` at ``x``.

    Returns the max relative error over the elements of ``x``.
    """
    if step <= 0:
        raise InvalidInputError("step must be positive")
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    leaf = Tensor(data, requires_grad=True)
    loss = f(leaf)
    if not np.isfinite(loss.item()):
        raise FloatingPointError("function evaluated to a non-finite value")
    backward(loss)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
    probe = Tensor(data)
    numeric = _central_differences(lambda: f(probe), probe, step)
    return relative_error(analytic, numeric)


def difference_noise_floor(value: float, step: float) -> float:
    """Smallest derivative a central difference can resolve at ``f = value``:
    one ulp of rounding in f divided by the 2*step baseline."""
    return float(np.finfo(np.float64).eps * abs(value) / (2.0 * step))


def compare_parameters(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor],
                       step: float = 1e-5) -> tuple[float, dict[str, tuple[np.ndarray, np.ndarray]]]:
    """Analytic and central-difference gradients for every tensor in ``params``.

    ``loss_fn`` closes over the parameters; their ``.data`` is perturbed in place
    and restored.  Returns ``(loss value, {name: (analytic, numeric)})``.
    """
    if step <= 0:
        raise InvalidInputError("step must be positive")
    saved = {name: (p.requires_grad, p.grad) for name, p in params.items()}
    try:
        for p in params.values():
            p.requires_grad = True
            p.grad = None
        loss = loss_fn()
        value = loss.item()
        backward(loss)
        analytic = {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
                    for name, p in params.items()}
        pairs = {name: (analytic[name], _central_differences(loss_fn, p, step))
                 for name, p in params.items()}
        return value, pairs
    finally:
        for name, p in params.items():
            p.requires_grad, p.grad = saved[name]


def check_parameters(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor],
                     step: float = 1e-5) -> dict[str, float]:
    """Max relative error per parameter name (see ``compare_parameters``)."""
    _, pairs = compare_parameters(loss_fn, params, step)
    return {name: relative_error(a, n) for name, (a, n) in pairs.items()}
