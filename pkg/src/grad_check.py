from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_index: Tuple[int, ...]
    analytic: float
    numeric: float

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_error < tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_gradient(f: Callable[[np.ndarray], float], point: np.ndarray, h: float = 1e-5,
                     indices: Optional[Sequence[Tuple[int, ...]]] = None) -> np.ndarray:
    """Central differences of scalar ``f`` at ``point``; ``point`` is perturbed in place and restored."""
    grad = np.zeros_like(point, dtype=np.float64)
    if indices is None:
        indices = list(np.ndindex(point.shape))
    for idx in indices:
        original = point[idx]
        point[idx] = original + h
        f_plus = f(point)
        point[idx] = original - h
        f_minus = f(point)
        point[idx] = original
        grad[idx] = (f_plus - f_minus) / (2 * h)
    return grad


def grad_check(f: Callable[[np.ndarray], float], point: np.ndarray, analytic: np.ndarray, h: float = 1e-5,
               indices: Optional[Sequence[Tuple[int, ...]]] = None) -> GradCheckResult:
    """Compare an analytic gradient of scalar ``f`` against central differences.

    Only ``indices`` are checked when given. Reports the worst coordinate.
    """
    if point.dtype != np.float64:
        raise ValueError(f"grad_check needs a float64 point, got {point.dtype}")
    if indices is None:
        indices = list(np.ndindex(point.shape))
    numeric = numeric_gradient(f, point, h, indices)
    errors = np.array([relative_error(np.float64(analytic[idx]), numeric[idx]) for idx in indices])
    worst = int(np.argmax(errors))
    idx = tuple(indices[worst])
    return GradCheckResult(
        max_rel_error=float(errors[worst]),
        worst_index=idx,
        analytic=float(analytic[idx]),
        numeric=float(numeric[idx]),
    )


def projected_loss(forward: Callable[[np.ndarray], np.ndarray], projection: np.ndarray
                   ) -> Callable[[np.ndarray], float]:
    """Scalarize a tensor-valued op as sum(forward(x) * projection)."""
    def loss(x: np.ndarray) -> float:
        return float(np.sum(forward(x) * projection))
    return loss
