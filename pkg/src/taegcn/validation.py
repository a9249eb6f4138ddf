"""Input coercion and checks shared by the estimator facade."""

from __future__ import annotations

import numpy as np

from .data import SeriesDataset
from .errors import DataError

__all__ = ["as_series", "check_horizon_fits", "check_is_fitted"]


def as_series(X, missing_marker: float = 0.0, step_seconds: int = 300) -> SeriesDataset:
    """Coerce estimator input into a SeriesDataset.

    Accepts a SeriesDataset unchanged, a [nodes, steps] array (one channel
    implied), or a [nodes, steps, channels] array. Arrays get synthetic
    node ids and evenly spaced timestamps; NaN entries are rewritten to the
    missing marker and excluded from the observation mask.
    """
    if isinstance(X, SeriesDataset):
        return X
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise DataError(f"expected [nodes, steps] or [nodes, steps, channels], "
                        f"got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1 or arr.shape[2] < 1:
        raise DataError(f"empty series of shape {arr.shape}")
    if np.isinf(arr).any():
        raise DataError("series contains infinite values")
    observed = ~np.isnan(arr) & (arr != missing_marker)
    values = np.where(np.isnan(arr), missing_marker, arr)
    return SeriesDataset(values=values,
                         node_ids=[f"n{i}" for i in range(arr.shape[0])],
                         timestamps=[t * step_seconds for t in range(arr.shape[1])],
                         missing_marker=missing_marker,
                         observed=observed)


def check_horizon_fits(dataset: SeriesDataset, input_length: int, horizon: int,
                       role: str) -> None:
    need = input_length + horizon
    if dataset.n_steps < need:
        raise DataError(f"{role} series has {dataset.n_steps} steps but one "
                        f"window needs input_length {input_length} plus "
                        f"horizon {horizon} = {need}")


def check_is_fitted(estimator, attribute: str = "model_") -> None:
    if not hasattr(estimator, attribute):
        from sklearn.exceptions import NotFittedError
        raise NotFittedError(
            f"this {type(estimator).__name__} instance is not fitted yet; "
            f"call fit before using this method")
