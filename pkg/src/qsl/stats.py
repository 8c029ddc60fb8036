"""Outlier and reconstruction statistics."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from qsl.errors import DegenerateSample
from qsl.quant import QuantConfig, _as_matrix, fake_quantize


def kurtosis(values) -> float:
    """Pearson (non-excess) kurtosis ``m4 / m2**2`` of a flattened sample.

    Central moments are taken about the sample mean without bias correction,
    so a Gaussian gives 3 and a symmetric two-point sample gives 1.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size < 4:
        raise DegenerateSample(f"need at least 4 values, got {v.size}")
    d = v - v.mean()
    # second pass removes the residual mean left by rounding in the first
    d -= d.mean()
    d2 = d * d
    m2 = d2.mean()
    if not m2 > 0 or m2 <= (np.finfo(float).eps * np.max(np.abs(v))) ** 2:
        raise DegenerateSample("sample variance is zero")
    return float((d2 * d2).mean() / (m2 * m2))


@dataclass(frozen=True)
class ErrorMetrics:
    mse: float
    max_abs: float
    relative_l2: float


def error_metrics(x, x_hat) -> ErrorMetrics:
    x = np.asarray(x, dtype=np.float64)
    diff = np.asarray(x_hat, dtype=np.float64) - x
    norm = np.linalg.norm(x)
    rel = float(np.linalg.norm(diff) / norm) if norm > 0 else float(np.linalg.norm(diff) > 0) * np.inf
    if not np.any(diff):
        rel = 0.0
    return ErrorMetrics(float(np.mean(diff**2)), float(np.max(np.abs(diff))), rel)


def quant_error_metrics(x, config: QuantConfig) -> ErrorMetrics:
    x = _as_matrix(x)
    return error_metrics(x, fake_quantize(x, config))


def write_kurtosis_csv(report: dict, fh) -> None:
    w = csv.writer(fh)
    w.writerow(["layer", "kurtosis"])
    for layer, k in report.items():
        w.writerow([layer, repr(float(k))])


def read_kurtosis_csv(fh) -> dict:
    rows = list(csv.DictReader(fh))
    return {r["layer"]: float(r["kurtosis"]) for r in rows}
