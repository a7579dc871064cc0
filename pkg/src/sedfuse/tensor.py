"""Dense tensor plumbing shared by all layers.

Feature tensors are plain numpy arrays: row-major, float32 by default,
float64 when a gradient check needs the headroom.  Parameters carry their
gradient buffer alongside the value so optimizers can walk a flat list.
"""

from __future__ import annotations

import numpy as np

FLOAT32 = np.float32
FLOAT64 = np.float64


class ShapeError(ValueError):
    """Tensor extents incompatible with an operation's contract."""


class DataError(ValueError):
    """Input data violates a documented invariant (labels, modalities, ...)."""


class ConfigError(ValueError):
    """A configuration value is out of range or inconsistent."""


def as_tensor(data, dtype=FLOAT32) -> np.ndarray:
    """Coerce to a contiguous ndarray of the requested float dtype."""
    return np.ascontiguousarray(np.asarray(data, dtype=dtype))


def check_finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise DataError(f"non-finite values in {what}")
    return x


class ParamTensor:
    """A learnable tensor and its gradient accumulator.

    ``grad`` always has the same shape as ``value`` and is reset by
    :meth:`zero_grad` at the start of each optimization step.
    """

    __slots__ = ("value", "grad")

    def __init__(self, value) -> None:
        self.value = np.ascontiguousarray(value)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def astype(self, dtype) -> "ParamTensor":
        out = ParamTensor(self.value.astype(dtype))
        out.grad = self.grad.astype(dtype)
        return out

    def copy(self) -> "ParamTensor":
        out = ParamTensor(self.value.copy())
        out.grad = self.grad.copy()
        return out


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int,
                   dtype=FLOAT32) -> np.ndarray:
    """Uniform init over +-sqrt(6 / (fan_in + fan_out))."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)
