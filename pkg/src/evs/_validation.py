"""Small input-validation helpers in the spirit of ``sklearn.utils.validation``."""

from __future__ import annotations

import os

import numpy as np

from .exceptions import DimensionMismatchError, ValidationError


def check_size(size, name="size"):
    """Return ``(width, height)`` as positive ints or raise."""
    try:
        width, height = (int(v) for v in size)
    except (TypeError, ValueError):
        raise ValidationError(f"{name} must be a (width, height) pair, got {size!r}")
    if width <= 0 or height <= 0:
        raise ValidationError(f"{name} must be positive, got {width}x{height}")
    return width, height


def check_same_shape(*rasters, what="inputs"):
    shapes = {(r.width, r.height) for r in rasters}
    if len(shapes) != 1:
        dims = ", ".join(f"{w}x{h}" for w, h in sorted(shapes))
        raise DimensionMismatchError(f"{what} have mismatched dimensions: {dims}")


def check_finite(array, name):
    if not np.all(np.isfinite(array)):
        raise ValidationError(f"{name} contains non-finite values")


def check_nonnegative(value, name):
    if value < 0:
        raise ValidationError(f"{name} must be >= 0, got {value}")
    return value


def readonly(array):
    """Mark ``array`` read-only and return it."""
    array.flags.writeable = False
    return array


def effective_n_jobs(n_jobs=None):
    """Resolve a worker count, honouring the ``EVS_THREADS`` cap."""
    cap = os.environ.get("EVS_THREADS")
    if n_jobs is None:
        n_jobs = int(cap) if cap else (os.cpu_count() or 1)
    elif cap:
        n_jobs = min(int(n_jobs), int(cap))
    return max(1, int(n_jobs))
