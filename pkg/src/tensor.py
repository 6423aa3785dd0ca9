from typing import Optional, Tuple, Union

import numpy as np

from .errors import ShapeError, TrainingError


class Tensor3:
    """Batched signal or activation array [batch, channels, length].

    Holds the row-major data block and an optional gradient slot of identical
    shape.
    """

    def __init__(self, data, grad: Optional[np.ndarray] = None):
        data = np.ascontiguousarray(data)
        if data.ndim != 3:
            raise ShapeError(f"Tensor3 expects [batch, channels, length], got shape {data.shape}")
        if grad is not None and np.shape(grad) != data.shape:
            raise ShapeError(f"Gradient shape {np.shape(grad)} does not match data shape {data.shape}")
        self.data = data
        self.grad = grad

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.data.shape

    @property
    def batch(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def length(self) -> int:
        return self.data.shape[2]

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def check_finite(self, where: str = "tensor") -> None:
        check_finite(self.data, where)
        if self.grad is not None:
            check_finite(self.grad, f"{where} (grad)")

    def __repr__(self):
        return f"Tensor3(shape={self.shape}, dtype={self.data.dtype}, grad={'yes' if self.grad is not None else 'no'})"


ArrayLike3 = Union[Tensor3, np.ndarray]


def as_array3(x: ArrayLike3, name: str = "x") -> np.ndarray:
    """Unwrap a Tensor3 or validate a raw [B, C, L] array."""
    if isinstance(x, Tensor3):
        return x.data
    arr = np.asarray(x)
    if arr.ndim != 3:
        raise ShapeError(f"{name} must have shape [batch, channels, length], got {arr.shape}")
    return arr


def check_finite(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise TrainingError(f"Non-finite values in {where}: {bad} of {np.size(arr)} elements")
