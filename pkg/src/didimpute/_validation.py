"""Small input-validation helpers shared across modules."""

from __future__ import annotations

import numbers

import numpy as np
import pandas as pd

from .exceptions import DimensionMismatch, MissingColumn


def check_frame(df, columns=()):
    """Return ``df`` as a DataFrame after checking that ``columns`` exist."""
    if not isinstance(df, pd.DataFrame):
        df = pd.DataFrame(df)
    missing = [c for c in columns if c is not None and c not in df.columns]
    if missing:
        raise MissingColumn(f"missing column(s): {', '.join(map(str, missing))}")
    return df


def check_vector(x, n=None, name="vector", finite=True):
    """1-d float array, optionally of length ``n`` and all-finite."""
    a = np.asarray(x, dtype=float)
    if a.ndim != 1:
        raise DimensionMismatch(f"{name} must be one-dimensional, got shape {a.shape}")
    if n is not None and a.shape[0] != n:
        raise DimensionMismatch(f"{name} has length {a.shape[0]}, expected {n}")
    if finite and not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return a


def check_positive_int(value, name, minimum=1):
    if not isinstance(value, numbers.Integral) or isinstance(value, bool) or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_choice(value, choices, name):
    if value not in choices:
        raise ValueError(f"{name} must be one of {tuple(choices)}, got {value!r}")
    return value
