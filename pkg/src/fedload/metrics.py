"""Forecast error metrics: MSE, RMSE, MAE and MAPE on paired sample vectors."""

import math
from dataclasses import dataclass

import numpy as np

# |actual| below this floor is excluded from MAPE instead of dividing by ~0.
MAPE_ZERO_FLOOR = 1e-8


class MetricError(ValueError):
    """Raised for empty, mismatched or degenerate metric inputs."""


def _paired(actual, predicted) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(actual, dtype=float).ravel()
    y = np.asarray(predicted, dtype=float).ravel()
    if x.size == 0:
        raise MetricError("metrics need at least one sample")
    if x.shape != y.shape:
        raise MetricError(f"length mismatch: {x.size} actual vs {y.size} predicted")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise MetricError("metrics require finite inputs")
    return x, y


def mse(actual, predicted) -> float:
    x, y = _paired(actual, predicted)
    return float(np.mean((y - x) ** 2))


def rmse(actual, predicted) -> float:
    return math.sqrt(mse(actual, predicted))


def mae(actual, predicted) -> float:
    x, y = _paired(actual, predicted)
    return float(np.mean(np.abs(y - x)))


def mape(actual, predicted) -> tuple[float, int]:
    """Mean absolute percentage error over samples with non-negligible actuals.

    Returns ``(percentage, n_skipped)`` where ``n_skipped`` counts samples with
    ``|actual| < MAPE_ZERO_FLOOR`` that were excluded from the mean. Raises
    MetricError when every sample is excluded.
    """
    x, y = _paired(actual, predicted)
    keep = np.abs(x) >= MAPE_ZERO_FLOOR
    n_skipped = int(x.size - keep.sum())
    if not keep.any():
        raise MetricError("MAPE undefined: all actual values are (near) zero")
    terms = np.abs((x[keep] - y[keep]) / x[keep])
    return float(100.0 * terms.mean()), n_skipped


@dataclass(frozen=True)
class MetricsReport:
    """All four error metrics for one evaluation, plus MAPE bookkeeping."""

    mse: float
    rmse: float
    mae: float
    mape: float
    n_used: int
    n_skipped_zero_actual: int

    CSV_HEADER = "mse,rmse,mae,mape"

    def csv_row(self) -> str:
        """One row in the table column order MSE, RMSE, MAE, MAPE."""
        return f"{self.mse:.8g},{self.rmse:.8g},{self.mae:.8g},{self.mape:.8g}"


def evaluate(actual, predicted) -> MetricsReport:
    """Compute all four metrics for one (actual, predicted) pair of vectors."""
    x, y = _paired(actual, predicted)
    m = mse(x, y)
    p, skipped = mape(x, y)
    return MetricsReport(
        mse=m,
        rmse=math.sqrt(m),
        mae=mae(x, y),
        mape=p,
        n_used=int(x.size - skipped),
        n_skipped_zero_actual=skipped,
    )
