from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from scipy.stats import rankdata

from .errors import NumericError, UndefinedCorrelationError


@dataclass(frozen=True)
class ScorePairSeries:
    predicted: np.ndarray
    actual: np.ndarray

    def __post_init__(self):
        predicted = np.asarray(self.predicted, dtype=np.float64).reshape(-1)
        actual = np.asarray(self.actual, dtype=np.float64).reshape(-1)
        if predicted.size != actual.size:
            raise NumericError(f"series lengths differ ({predicted.size} vs {actual.size})", code="length_mismatch")
        if predicted.size < 2:
            raise NumericError("rank correlation needs at least two pairs", code="too_short")
        if not (np.all(np.isfinite(predicted)) and np.all(np.isfinite(actual))):
            raise NumericError("series contain non-finite values", code="non_finite")
        object.__setattr__(self, "predicted", predicted)
        object.__setattr__(self, "actual", actual)


def rank(values: Sequence[float]) -> np.ndarray:
    """Ascending 1-based ranks; ties share the average of their positions."""
    array = np.asarray(values, dtype=np.float64).reshape(-1)
    if array.size == 0:
        raise NumericError("cannot rank an empty series", code="too_short")
    if not np.all(np.isfinite(array)):
        raise NumericError("cannot rank non-finite values", code="non_finite")
    return rankdata(array, method="average").astype(np.float64)


def spearman(
    series: Union[ScorePairSeries, Sequence[float]],
    actual: Optional[Sequence[float]] = None,
) -> float:
    """Pearson correlation of the two rank vectors (exact under ties)."""
    if not isinstance(series, ScorePairSeries):
        series = ScorePairSeries(predicted=series, actual=actual)
    rx = rank(series.predicted)
    ry = rank(series.actual)
    dx = rx - rx.mean()
    dy = ry - ry.mean()
    denominator = np.sqrt(np.dot(dx, dx) * np.dot(dy, dy))
    if denominator == 0.0:
        raise UndefinedCorrelationError()
    return float(np.clip(np.dot(dx, dy) / denominator, -1.0, 1.0))


def mean_rho(rhos: Sequence[float]) -> float:
    values = [float(rho) for rho in rhos]
    if not values:
        raise NumericError("cannot average an empty list of correlations", code="empty")
    return float(np.mean(values))
