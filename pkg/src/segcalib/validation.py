"""Input validation helpers.

A "grid" throughout this package is a 2-D ``float64`` numpy array in row-major
order. These helpers normalise inputs to that representation and enforce the
value-domain contracts (probability grids in [0, 1], mask grids in {0, 1}).
Shape mismatches always raise instead of broadcasting.
"""

from __future__ import annotations

import numpy as np

from .exceptions import GridError, ParameterError


def as_grid(values, name: str = "grid", *, allow_non_finite: bool = False) -> np.ndarray:
    """Return ``values`` as a validated 2-D float64 array.

    Raises GridError for wrong dimensionality, zero-sized axes, or (by
    default) non-finite entries. The returned array is a float64 view or
    copy; callers must not rely on aliasing.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise GridError(f"{name} must be 2-D, got {arr.ndim}-D")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise GridError(f"{name} must have positive dimensions, got {arr.shape}")
    if not allow_non_finite and not np.all(np.isfinite(arr)):
        raise GridError(f"{name} contains non-finite values")
    return arr


def check_probability_grid(values, name: str = "probabilities") -> np.ndarray:
    grid = as_grid(values, name)
    if grid.min() < 0.0 or grid.max() > 1.0:
        raise GridError(f"{name} must lie in [0, 1]")
    return grid


def check_binary_grid(values, name: str = "mask") -> np.ndarray:
    grid = as_grid(values, name)
    if not np.all((grid == 0.0) | (grid == 1.0)):
        raise GridError(f"{name} must contain only 0 and 1")
    return grid


def check_same_shape(*named_grids: tuple[str, np.ndarray]) -> None:
    """Raise GridError unless every named grid shares one shape."""
    if not named_grids:
        return
    ref_name, ref = named_grids[0]
    for name, grid in named_grids[1:]:
        if grid.shape != ref.shape:
            raise GridError(
                f"shape mismatch: {ref_name} is {ref.shape}, {name} is {grid.shape}"
            )


def check_in_range(value: float, low: float, high: float, name: str) -> float:
    if not (low <= value <= high):
        raise ParameterError(f"{name} must be in [{low}, {high}], got {value}")
    return float(value)


def check_positive(value, name: str):
    if value <= 0:
        raise ParameterError(f"{name} must be positive, got {value}")
    return value
