import logging
from dataclasses import dataclass
from typing import Callable, List, Sequence

import numpy as np

from app.errors import DimensionError, NonFiniteError

logger = logging.getLogger("Oracle")

DEFAULT_STEP = 1e-5
RELATIVE_FLOOR = 1e-8


@dataclass(frozen=True)
class GradientComparison:
    max_rel_err: float
    mean_rel_err: float


def _evaluate(scalar_fn: Callable[[], float]) -> float:
    value = float(scalar_fn())
    if not np.isfinite(value):
        raise NonFiniteError(f"function evaluated to {value}")
    return value


def finite_diff_grad(
    scalar_fn: Callable[[], float],
    params: Sequence[np.ndarray],
    h: float = DEFAULT_STEP,
) -> List[np.ndarray]:
    """
    Central differences (f(x+h) - f(x-h)) / 2h for every coordinate of every array in `params`.
    The arrays are perturbed in place and restored; `scalar_fn` must read them on each call.
    """
    estimates = []
    for array in params:
        if not isinstance(array, np.ndarray) or not array.flags.writeable:
            raise DimensionError("finite_diff_grad needs writeable numpy arrays")
        estimate = np.zeros_like(array, dtype=np.float64)
        flat, out = array.reshape(-1), estimate.reshape(-1)
        for index in range(flat.size):
            original = flat[index]
            flat[index] = original + h
            plus = _evaluate(scalar_fn)
            flat[index] = original - h
            minus = _evaluate(scalar_fn)
            flat[index] = original
            out[index] = (plus - minus) / (2.0 * h)
        estimates.append(estimate)
    return estimates


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """|a - n| / max(|a|, |n|, 1e-8), elementwise."""
    analytic, numeric = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    if analytic.shape != numeric.shape:
        raise DimensionError(f"gradient shapes differ: {analytic.shape} vs {numeric.shape}")
    denominator = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), RELATIVE_FLOOR)
    return np.abs(analytic - numeric) / denominator


def compare_gradients(analytic: np.ndarray, numeric: np.ndarray) -> GradientComparison:
    errors = relative_error(analytic, numeric)
    if errors.size == 0:
        return GradientComparison(0.0, 0.0)
    return GradientComparison(max_rel_err=float(errors.max()), mean_rel_err=float(errors.mean()))
