"""Input validation helpers used by the public API."""

from __future__ import annotations

import numpy as np

from .errors import DataError

# exp() overflows float64 just above 709; reject anything past this point
# instead of silently clamping.
LOG_RATE_LIMIT = 700.0


def as_float_array(x, name="array"):
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite entries")
    return arr


def check_profile(profile, n_conditions=None):
    """Validate a binary condition-status vector and return it as int8."""
    arr = np.asarray(profile)
    if arr.ndim != 1:
        raise DataError("condition profile must be a 1-d vector")
    if not np.isin(arr, (0, 1)).all():
        raise DataError("condition profile entries must be 0 or 1")
    if n_conditions is not None and arr.shape[0] != n_conditions:
        raise DataError(
            f"condition profile has length {arr.shape[0]}, expected {n_conditions}"
        )
    return arr.astype(np.int8)


def check_design(z, n_factors=None):
    """Validate a risk-factor design vector (leading intercept entry == 1)."""
    arr = as_float_array(z, "risk-factor vector")
    if arr.ndim != 1 or arr.shape[0] < 1:
        raise DataError("risk-factor vector must be a non-empty 1-d vector")
    if arr[0] != 1.0:
        raise DataError("risk-factor vector must carry a leading intercept entry of 1")
    if n_factors is not None and arr.shape[0] != n_factors + 1:
        raise DataError(
            f"risk-factor vector has length {arr.shape[0]}, expected {n_factors + 1}"
        )
    return arr


def check_exponent(value):
    """Guard log-rates against exp() overflow; raises instead of clamping."""
    from .errors import NumericalError

    if np.any(np.asarray(value) > LOG_RATE_LIMIT):
        raise NumericalError(
            f"log-intensity exceeds {LOG_RATE_LIMIT}; exp() would overflow"
        )
    return value
