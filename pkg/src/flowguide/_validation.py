"""Input validation helpers shared across the package."""

import numbers

import numpy as np


class GuidanceError(RuntimeError):
    """Raised when a guidance computation produces unusable values.

    Carries the offending field id and denoising step index when known.
    """

    def __init__(self, message, field_id=None, step=None, stage=None):
        super().__init__(message)
        self.field_id = field_id
        self.step = step
        self.stage = stage


def check_chunk(a, name="chunk", min_ndim=2):
    """Return ``a`` as a float array of shape (..., H, D) with finite entries."""
    arr = np.asarray(a, dtype=float)
    if arr.ndim < min_ndim:
        raise ValueError(f"{name} must have at least {min_ndim} dims, got shape {arr.shape}")
    if arr.shape[-1] < 1 or arr.shape[-2] < 1:
        raise ValueError(f"{name} must have H >= 1 and D >= 1, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def check_same_shape(a, b, names=("a", "b")):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {names[0]} {a.shape} vs {names[1]} {b.shape}")


def check_tau(tau, allow_one=True):
    tau = float(tau)
    upper_ok = tau <= 1.0 if allow_one else tau < 1.0
    if not (0.0 <= tau and upper_ok):
        raise ValueError(f"flow time tau must lie in [0, 1{']' if allow_one else ')'}, got {tau}")
    return tau


def check_positive(value, name):
    if not isinstance(value, numbers.Real) or not np.isfinite(value) or value <= 0:
        raise ValueError(f"{name} must be a positive finite number, got {value!r}")
    return float(value)


def check_points(points, name="points"):
    """Coerce to an (M, 3) float array; M may be zero."""
    arr = np.asarray(points, dtype=float)
    if arr.size == 0:
        return arr.reshape(0, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{name} must be an (M, 3) array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite coordinates")
    return arr


def check_vector3(x, name="vector"):
    arr = np.asarray(x, dtype=float).reshape(-1)
    if arr.shape != (3,):
        raise ValueError(f"{name} must have 3 components, got shape {np.shape(x)}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr
