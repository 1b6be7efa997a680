"""Input validation helpers used by the public API surface."""

from __future__ import annotations

import numpy as np

from .errors import DomainError


def as_float_array(x, name: str, *, ndim: int | None = None) -> np.ndarray:
    """Coerce ``x`` to a float64 ndarray, rejecting non-finite entries."""
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise DomainError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if arr.size and not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} contains non-finite values")
    return arr


def check_positive_int(value, name: str) -> int:
    value = int(value)
    if value < 1:
        raise DomainError(f"{name} must be a positive integer, got {value}")
    return value


def check_nonnegative(value, name: str) -> float:
    value = float(value)
    if not np.isfinite(value) or value < 0:
        raise DomainError(f"{name} must be a finite nonnegative number, got {value}")
    return value
