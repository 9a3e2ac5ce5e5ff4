"""RMSE and empirical CDF of absolute errors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DataError, ShapeError
from ..mfef import MFEFNet
from .training import predict


@dataclass
class Metrics:
    rmse_db: float
    per_sample_abs_err: np.ndarray
    cdf: list[tuple[float, float]]


def rmse(pred, true) -> float:
    """sqrt(mean((pred - true)^2)) in the units of the inputs."""
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    t = np.asarray(true, dtype=np.float64).reshape(-1)
    if p.shape != t.shape:
        raise ShapeError(f"rmse: {p.shape} predictions vs {t.shape} labels")
    if p.size == 0:
        raise DataError("rmse of an empty set")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def empirical_cdf(errors) -> list[tuple[float, float]]:
    """One (error, fraction <= error) point per distinct error value."""
    e = np.sort(np.asarray(errors, dtype=np.float64).reshape(-1))
    if e.size == 0:
        raise DataError("CDF of an empty set")
    values, counts = np.unique(e, return_counts=True)
    frac = np.cumsum(counts) / e.size
    frac[-1] = 1.0
    return [(float(v), float(f)) for v, f in zip(values, frac)]


def metrics_from(pred, true) -> Metrics:
    err = np.abs(np.asarray(pred, np.float64) - np.asarray(true, np.float64))
    return Metrics(rmse(pred, true), err, empirical_cdf(err))


def evaluate(model: MFEFNet, data, split: str = "test", night_alpha: float | None = None) -> Metrics:
    """Eval-mode RMSE and error CDF on a split; ``night_alpha`` darkens images only."""
    pred, true = predict(model, data, split, night_alpha)
    return metrics_from(pred, true)
