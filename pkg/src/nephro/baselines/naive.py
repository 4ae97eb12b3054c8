from __future__ import annotations

import datetime as dt
from typing import Sequence

import numpy as np

from nephro.domain import EGFR_MAX, ObservationPoint
from nephro.errors import DomainError

EGFR_FLOOR = 0.1


def last_value_predict(history: Sequence[ObservationPoint]) -> float:
    if not history:
        raise DomainError("last_value_predict needs at least one observation")
    return float(history[-1].egfr)


def ols_slope(days: np.ndarray, values: np.ndarray) -> tuple[float, float]:
    """Slope and intercept of the least-squares line through (days, values)."""
    x = days - days.mean()
    denom = float(np.dot(x, x))
    if denom == 0.0:
        raise DomainError("OLS needs at least two distinct dates")
    slope = float(np.dot(x, values - values.mean())) / denom
    return slope, float(values.mean() - slope * days.mean())


def linear_trend_predict(history: Sequence[ObservationPoint], window: int, target_date: dt.date) -> float:
    """OLS over the last ``window`` points in day units, extrapolated and clamped to (0, 250]."""
    points = list(history)[-window:]
    if window < 2 or len(points) < 2:
        raise DomainError("linear_trend_predict needs at least 2 points in the window")
    origin = points[-1].date
    days = np.array([(p.date - origin).days for p in points], dtype=float)
    values = np.array([p.egfr for p in points], dtype=float)
    slope, intercept = ols_slope(days, values)
    pred = intercept + slope * (target_date - origin).days
    return float(min(max(pred, EGFR_FLOOR), EGFR_MAX))
