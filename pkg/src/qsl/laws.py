"""Closed-form scaling laws for quantization-aware training.

N and D are raw counts (parameters, tokens). The quantization error is
``delta = loss_quantized - loss_bf16`` and is non-negative.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from importlib import resources
from typing import Sequence

import numpy as np

from qsl.errors import DegenerateInput, DomainError
from qsl.quant import Granularity

PRECISION_TAGS = ("w4a4", "w4a16", "w16a4", "w4a4_fc2_8", "w16a4_fc2_8")


@dataclass(frozen=True)
class ChinchillaParams:
    E: float
    A: float
    alpha: float
    B: float
    beta: float

    def __post_init__(self):
        if min(self.E, self.A, self.B, self.alpha, self.beta) <= 0:
            raise DomainError("Chinchilla constants must be positive")


@dataclass(frozen=True)
class DeltaParams:
    k: float
    gamma_N: float
    gamma_D: float
    gamma_G: float

    def __post_init__(self):
        if self.k < 0:
            raise DomainError("k must be non-negative")


def effective_g(granularity: Granularity, vector_len: int | None = None) -> float:
    """Elements per scale as used by the error law.

    Per-vector granularity needs the quantized vector length (the activation
    hidden size for mixed per-channel/per-token runs).
    """
    if granularity.kind == "group":
        return float(granularity.group_size)
    if granularity.kind == "per_vector":
        if vector_len is None:
            raise DomainError("per-vector granularity needs the vector length")
        return float(vector_len)
    raise DomainError("per-tensor quantization is outside the error law")


def _check_nd(N, D):
    if np.any(np.asarray(N) <= 0) or np.any(np.asarray(D) <= 0):
        raise DomainError("N and D must be positive")


def chinchilla_loss(p: ChinchillaParams, N, D):
    _check_nd(N, D)
    return p.A / np.power(N, p.alpha) + p.B / np.power(D, p.beta) + p.E


def delta(p: DeltaParams, N, D, g):
    """k * D**gamma_D * log2(g)**gamma_G / N**gamma_N, with delta = 0 at g = 1."""
    _check_nd(N, D)
    g = np.asarray(g, dtype=np.float64)
    if np.any((g < 2) & (g != 1)):
        raise DomainError("group size must be 1 (unquantized) or at least 2")
    lg = np.log2(np.maximum(g, 2.0))
    out = p.k * np.power(D, p.gamma_D) * np.power(lg, p.gamma_G) / np.power(N, p.gamma_N)
    out = np.where(g == 1, 0.0, out)
    return float(out) if out.ndim == 0 else out


def qat_loss(c: ChinchillaParams, d: DeltaParams, N, D, g):
    return chinchilla_loss(c, N, D) + delta(d, N, D, g)


def legacy_delta(c: ChinchillaParams, epm_value, N):
    """Error implied by an effective-parameter-multiplier law (no D dependence)."""
    e = np.asarray(epm_value, dtype=np.float64)
    if np.any(e <= 0) or np.any(e > 1):
        raise DomainError("effective parameter multiplier must lie in (0, 1]")
    if np.any(np.asarray(N) <= 0):
        raise DomainError("N must be positive")
    return c.A / np.power(N * e, c.alpha) - c.A / np.power(N, c.alpha)


def epm(c: ChinchillaParams, d: DeltaParams, N, D, g):
    """Effective parameter multiplier matching the QAT loss with a smaller bf16 model."""
    dl = delta(d, N, D, g)
    return np.power(c.A / (c.A + dl * np.power(N, c.alpha)), 1.0 / c.alpha)


@dataclass(frozen=True)
class ContourLine:
    level: float
    slope: float
    intercept: float  # y = slope * x + intercept, x = log10 N, y = log10 D
    x0: float
    x1: float

    @property
    def endpoints(self):
        return (self.x0, self.slope * self.x0 + self.intercept), (
            self.x1,
            self.slope * self.x1 + self.intercept,
        )


def contour_lines(d: DeltaParams, g: float, levels, N_range, D_range=None) -> list[ContourLine]:
    """Iso-error lines of the error law in (log10 N, log10 D) space.

    Lines are clipped to ``N_range``; ``D_range`` when given further clips
    each line to the rectangle and drops lines that miss it.
    """
    if d.gamma_D <= 0:
        raise DomainError("contours need gamma_D > 0")
    C = d.k * math.log2(g) ** d.gamma_G
    slope = d.gamma_N / d.gamma_D
    xa, xb = math.log10(N_range[0]), math.log10(N_range[1])
    out = []
    for z0 in levels:
        if z0 <= 0:
            raise DomainError("contour levels must be positive")
        intercept = (math.log10(z0) - math.log10(C)) / d.gamma_D
        x0, x1 = xa, xb
        if D_range is not None:
            ya, yb = math.log10(D_range[0]), math.log10(D_range[1])
            x0 = max(x0, (ya - intercept) / slope)
            x1 = min(x1, (yb - intercept) / slope)
            if x0 > x1:
                continue
        out.append(ContourLine(float(z0), slope, intercept, x0, x1))
    return out


def fit_sum_coefficient(pairs) -> float:
    """Least-squares slope through the origin of delta_W4A4 on (delta_W4A16 + delta_W16A4).

    ``pairs`` holds ``(delta_w4a4, delta_w4a16 + delta_w16a4)`` tuples.
    """
    arr = np.asarray(pairs, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 2 or arr.shape[1] != 2:
        raise DegenerateInput("need at least two (delta_w4a4, sum) pairs")
    y, x = arr[:, 0], arr[:, 1]
    sxx = float(x @ x)
    if sxx == 0:
        raise DegenerateInput("all summed errors are zero")
    return float(x @ y) / sxx


def ratio_R(d_w16a4: DeltaParams, d_w4a16: DeltaParams, N, D, g):
    """Activation-to-weight error ratio delta_W16A4 / delta_W4A16."""
    den = delta(d_w4a16, N, D, g)
    if np.any(np.asarray(den) <= 0):
        raise DomainError("weight-only error must be positive")
    return delta(d_w16a4, N, D, g) / den


def relative_error(predicted: Sequence[float], actual: Sequence[float]) -> float:
    """Mean absolute relative residual."""
    p = np.asarray(predicted, dtype=np.float64)
    a = np.asarray(actual, dtype=np.float64)
    if p.shape != a.shape or a.size == 0:
        raise DomainError("predicted and actual must be equal-length and non-empty")
    if np.any(a <= 0):
        raise DomainError("actual values must be positive")
    return float(np.mean(np.abs(p - a) / a))


# parameter files


def params_to_dict(chinchilla: ChinchillaParams | None = None, deltas: dict | None = None) -> dict:
    out = {}
    if chinchilla is not None:
        out["chinchilla"] = asdict(chinchilla)
    if deltas:
        out["delta"] = {tag: asdict(p) for tag, p in deltas.items()}
    return out


def params_from_dict(d: dict):
    c = ChinchillaParams(**d["chinchilla"]) if "chinchilla" in d else None
    deltas = {tag: DeltaParams(**v) for tag, v in d.get("delta", {}).items()}
    unknown = set(deltas) - set(PRECISION_TAGS)
    if unknown:
        raise DomainError(f"unknown precision tags: {sorted(unknown)}")
    return c, deltas


def load_params(path):
    with open(path) as fh:
        return params_from_dict(json.load(fh))


def save_params(path, chinchilla=None, deltas=None, **extra) -> None:
    d = params_to_dict(chinchilla, deltas)
    d.update(extra)
    with open(path, "w") as fh:
        json.dump(d, fh, indent=2)
        fh.write("\n")


def reference_params():
    """Reference fitted constants (Chinchilla plus the five error-law rows)."""
    text = resources.files("qsl.data").joinpath("reference.json").read_text()
    return params_from_dict(json.loads(text))
