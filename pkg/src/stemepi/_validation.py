"""Input validation helpers shared across the package."""

import numpy as np


class InputError(ValueError):
    """Raised when user-supplied data violate a documented precondition."""


def check_points(points, name="points"):
    """Return ``points`` as a finite float array of shape (n, 2)."""
    arr = np.asarray(points, dtype=float)
    if arr.ndim == 1 and arr.shape[0] == 2:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise InputError(f"{name} must have shape (n, 2), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name} contains non-finite coordinates")
    return arr


def check_counts(y, name="y"):
    """Return ``y`` as a 1-D float array of non-negative finite values."""
    arr = np.asarray(y, dtype=float).ravel()
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name} contains non-finite values")
    if np.any(arr < 0):
        raise InputError(f"{name} contains negative counts")
    return arr


def check_rng(seed):
    """Turn ``seed`` into a :class:`numpy.random.Generator`."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def frozen(arr, dtype=float):
    """Copy ``arr`` into a read-only array."""
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out
