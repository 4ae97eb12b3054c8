from __future__ import annotations

from typing import Sequence

import numpy as np

from nephro.errors import ValidationError


def _pair(predictions: Sequence[float], truths: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(predictions, dtype=float)
    t = np.asarray(truths, dtype=float)
    if p.ndim != 1 or p.shape != t.shape or len(p) == 0:
        raise ValidationError([f"need equal nonzero lengths, got {p.shape} and {t.shape}"])
    return p, t


def mae(predictions: Sequence[float], truths: Sequence[float]) -> float:
    p, t = _pair(predictions, truths)
    return float(np.mean(np.abs(p - t)))


def mape(predictions: Sequence[float], truths: Sequence[float]) -> float:
    """Mean absolute percentage error relative to the truth, in percent."""
    p, t = _pair(predictions, truths)
    if not (t > 0).all():
        raise ValidationError(["MAPE needs strictly positive truths"])
    return float(np.mean(np.abs(p - t) / t) * 100.0)


def mse(predictions: Sequence[float], truths: Sequence[float]) -> float:
    p, t = _pair(predictions, truths)
    return float(np.mean((p - t) ** 2))
