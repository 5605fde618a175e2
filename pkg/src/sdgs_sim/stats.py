"""Percentiles and mean/std aggregation used by every report."""

from __future__ import annotations

import math

import numpy as np


class MissingCoverageError(ValueError):
    """Raised when a statistic is requested over an empty set of rows."""


def nearest_rank(values, p: float) -> float:
    """Nearest-rank percentile: the ceil(p/100 * N)-th smallest value."""
    v = np.sort(np.asarray(values, dtype=float).ravel())
    if v.size == 0:
        raise MissingCoverageError("percentile of an empty sample")
    if not 0 < p <= 100:
        raise ValueError(f"percentile must be in (0, 100], got {p}")
    rank = max(1, math.ceil(p / 100.0 * v.size - 1e-12))
    return float(v[rank - 1])


def mean_std(values) -> tuple[float, float]:
    """Mean and sample (n-1) standard deviation; std is nan for a single value."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise MissingCoverageError("mean of an empty sample")
    std = float(np.std(v, ddof=1)) if v.size > 1 else float("nan")
    return float(np.mean(v)), std


def percent_change(controlled: float, reference: float) -> float:
    return 100.0 * (controlled - reference) / reference
