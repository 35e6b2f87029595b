"""Input validation helpers shared by the functional API and the estimators."""
from __future__ import annotations

import numbers

import numpy as np

from .exceptions import ShapeError


def check_signal(x, name: str = "signal") -> np.ndarray:
    """Return ``x`` as a finite 1-D float array.

    Column or row vectors, as produced by sklearn-style ``(n_samples, 1)``
    inputs, are flattened.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 2 and 1 in x.shape:
        x = x.ravel()
    if x.ndim != 1:
        raise ShapeError(f"{name} must be one-dimensional, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite samples")
    return x


def check_signal_pair(u, y) -> tuple[np.ndarray, np.ndarray]:
    u = check_signal(u, "input")
    y = check_signal(y, "output")
    if u.shape != y.shape:
        raise ShapeError(f"input has {u.size} samples but output has {y.size}")
    return u, y


def check_degrees(degrees) -> tuple[int, ...]:
    """Sorted tuple of distinct positive integer degrees."""
    if isinstance(degrees, numbers.Integral):
        degrees = (degrees,)
    out = tuple(sorted({int(d) for d in degrees}))
    if not out or out[0] < 1:
        raise ValueError(f"degrees must be positive integers, got {degrees!r}")
    return out


def check_nonneg_int(value, name: str) -> int:
    if not isinstance(value, numbers.Integral) or value < 0:
        raise ValueError(f"{name} must be a non-negative integer, got {value!r}")
    return int(value)
