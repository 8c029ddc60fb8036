"""Robust fitting of the Chinchilla law and the QAT error law.

Both fits minimize a Huber loss on log-space residuals with L-BFGS started
from every point of a fixed grid; the best start wins. Internally the
log-count regressors are centred so the optimizer sees a well-conditioned
problem; results are mapped back to the usual parameterization.
"""

from __future__ import annotations

import itertools
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from qsl.errors import InsufficientData, NonPositiveDelta, SingularDesign, DegenerateInput
from qsl.laws import ChinchillaParams, DeltaParams, relative_error
from qsl.lbfgs import OptimConfig, lbfgs_minimize

log = logging.getLogger(__name__)

EXPONENT_GRID = (0.1, 0.3, 0.5, 0.7)
LOG_COEF_GRID = (-2.0, 0.0, 2.0, 4.0, 6.0)
MAX_STARTS = 500


@dataclass(frozen=True)
class HuberConfig:
    delta: float = 1e-3

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("Huber delta must be positive")


def huber(residual, cfg: HuberConfig = HuberConfig()):
    r = np.abs(np.asarray(residual, dtype=np.float64))
    d = cfg.delta
    out = np.where(r <= d, 0.5 * r * r, d * (r - 0.5 * d) if np.isfinite(d) else 0.0)
    return float(out) if out.ndim == 0 else out


def huber_grad(residual, cfg: HuberConfig = HuberConfig()):
    r = np.asarray(residual, dtype=np.float64)
    return np.clip(r, -cfg.delta, cfg.delta)


@dataclass
class FitResult:
    params: Union[ChinchillaParams, DeltaParams]
    objective: float
    converged: bool
    n_starts_used: int
    r_squared: float
    mse: float
    start_index: int = -1
    trace: list = field(default_factory=list, repr=False)

    def report(self) -> dict:
        return {
            "objective": self.objective,
            "converged": self.converged,
            "n_starts_used": self.n_starts_used,
            "start_index": self.start_index,
            "r_squared": self.r_squared,
            "mse": self.mse,
            "objective_trace": list(self.trace),
        }


def fit_metrics(predicted, actual) -> tuple[float, float]:
    """Mean squared error and coefficient of determination."""
    p = np.asarray(predicted, dtype=np.float64)
    a = np.asarray(actual, dtype=np.float64)
    if p.shape != a.shape or a.size < 2:
        raise DegenerateInput("need two or more equal-length values")
    ss_tot = float(np.sum((a - a.mean()) ** 2))
    if ss_tot == 0:
        raise DegenerateInput("actual values have zero variance")
    res = p - a
    return float(np.mean(res**2)), 1.0 - float(res @ res) / ss_tot


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("QSL_THREADS", "1")))
    except ValueError:
        return 1


def _multistart(objective, starts: np.ndarray, cfg: OptimConfig):
    """Run L-BFGS from every start; return (best result, index, n_finite)."""

    def run(x0):
        try:
            return lbfgs_minimize(objective, x0, cfg)
        except Exception as e:  # a start landing on a non-finite point is skipped
            log.debug("start %s skipped: %s", x0, e)
            return None

    workers = _workers()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, starts))
    else:
        results = [run(x0) for x0 in starts]
    best, best_i, n_used = None, -1, 0
    for i, r in enumerate(results):
        if r is None or not np.isfinite(r.fun):
            continue
        n_used += 1
        if best is None or r.fun < best.fun or (r.fun == best.fun and tuple(r.x) < tuple(best.x)):
            best, best_i = r, i
    return best, best_i, n_used


def _prune(starts: np.ndarray, objective, limit: int) -> np.ndarray:
    if len(starts) <= limit:
        return starts
    vals = np.array([objective(s)[0] for s in starts])
    vals = np.where(np.isfinite(vals), vals, np.inf)
    keep = np.sort(np.argsort(vals, kind="stable")[:limit])
    return starts[keep]


# Chinchilla


def _runs_arrays(runs):
    rows = []
    for r in runs:
        if hasattr(r, "n_params"):
            rows.append((r.n_params, r.d_tokens, r.final_loss))
        else:
            rows.append(tuple(r)[:3])
    arr = np.asarray(rows, dtype=np.float64).reshape(-1, 3)
    return arr[:, 0], arr[:, 1], arr[:, 2]


def chinchilla_objective(N, D, L, huber_cfg: HuberConfig, tie: bool, centre=(0.0, 0.0)):
    """Huber objective over ``(a, b, e, alpha[, beta])`` with log-counts shifted by ``centre``.

    With a shift the coefficients are ``a - alpha * cN`` and ``b - beta * cD``.
    """
    lN = np.log(N) - centre[0]
    lD = np.log(D) - centre[1]
    lL = np.log(L)
    hd = huber_cfg.delta
    finite = bool(np.isfinite(hd))

    def fun(x):
        a, b, e, alpha = x[:4]
        beta = alpha if tie else x[4]
        t1 = a - alpha * lN
        t2 = b - beta * lD
        m = np.maximum(np.maximum(t1, t2), e)
        w1, w2, w3 = np.exp(t1 - m), np.exp(t2 - m), np.exp(e - m)
        tot = w1 + w2 + w3
        r = m + np.log(tot) - lL
        psi = np.clip(r, -hd, hd) / tot
        absr = np.abs(r)
        val = np.where(absr <= hd, 0.5 * r * r, hd * (absr - 0.5 * hd) if finite else 0.0).sum()
        g_alpha = -(w1 * psi) @ lN
        g_beta = -(w2 * psi) @ lD
        head = [(w1 * psi).sum(), (w2 * psi).sum(), (w3 * psi).sum()]
        grad = np.array(head + ([g_alpha + g_beta] if tie else [g_alpha, g_beta]))
        return float(val), grad

    return fun


def chinchilla_grid(tie: bool) -> np.ndarray:
    """Starting points ``(a, b, e, alpha[, beta])`` in the raw parameterization."""
    if tie:
        pts = [(a, b, e, al) for al in EXPONENT_GRID for a in LOG_COEF_GRID
               for b in LOG_COEF_GRID for e in LOG_COEF_GRID]
    else:
        pts = [(a, b, e, al, be) for al in EXPONENT_GRID for be in EXPONENT_GRID
               for a in LOG_COEF_GRID for b in LOG_COEF_GRID for e in LOG_COEF_GRID]
    return np.array(pts, dtype=np.float64)


def fit_chinchilla(
    runs,
    cfg: Optional[OptimConfig] = None,
    huber_cfg: HuberConfig = HuberConfig(),
    constrain_alpha_eq_beta: bool = True,
) -> FitResult:
    """Fit ``L = A/N**alpha + B/D**beta + E`` to (N, D, loss) observations.

    ``runs`` may hold RunRecords or plain ``(N, D, loss)`` tuples. Extra
    large-model anchor runs are just more rows.
    """
    cfg = cfg or OptimConfig()
    N, D, L = _runs_arrays(runs)
    if len(L) < 6:
        raise InsufficientData(f"need at least 6 runs, got {len(L)}")
    if np.any(N <= 0) or np.any(D <= 0) or np.any(L <= 0):
        raise InsufficientData("counts and losses must be positive")
    if len(np.unique(N)) < 2 or len(np.unique(D)) < 2:
        raise InsufficientData("need at least two distinct N and two distinct D")
    tie = constrain_alpha_eq_beta
    cN, cD = float(np.mean(np.log(N))), float(np.mean(np.log(D)))
    fun = chinchilla_objective(N, D, L, huber_cfg, tie, (cN, cD))

    raw = chinchilla_grid(tie) if cfg.multistart_grid is None else np.asarray(cfg.multistart_grid, float)
    starts = raw.copy()
    starts[:, 0] -= raw[:, 3] * cN
    starts[:, 1] -= (raw[:, 3] if tie else raw[:, 4]) * cD
    starts = _prune(starts, fun, min(cfg.max_starts, MAX_STARTS))

    best, idx, used = _multistart(fun, starts, cfg)
    if best is None:
        raise InsufficientData("no start produced a finite fit")
    a, b, e, alpha = best.x[:4]
    beta = alpha if tie else best.x[4]
    params = ChinchillaParams(
        E=float(np.exp(e)),
        A=float(np.exp(a + alpha * cN)),
        alpha=float(alpha),
        B=float(np.exp(b + beta * cD)),
        beta=float(beta),
    )
    pred = params.A / N**params.alpha + params.B / D**params.beta + params.E
    mse, r2 = fit_metrics(pred, L) if np.ptp(L) > 0 else (float(np.mean((pred - L) ** 2)), 1.0)
    return FitResult(params, best.fun, best.converged, used, r2, mse, idx, best.trace)


# QAT error law


def _obs_arrays(observations):
    arr = np.asarray([tuple(o)[:4] for o in observations], dtype=np.float64).reshape(-1, 4)
    return arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3]


def delta_design(N, D, g) -> np.ndarray:
    """Regressors of log delta: columns (1, -log N, log D, log log2 g)."""
    g = np.asarray(g, dtype=np.float64)
    if np.any(g < 2):
        raise DegenerateInput("group sizes must be at least 2")
    return np.column_stack([np.ones_like(g), -np.log(N), np.log(D), np.log(np.log2(g))])


def _check_delta_obs(N, D, g, dlt, min_obs=4):
    if len(dlt) < min_obs:
        raise InsufficientData(f"need at least {min_obs} observations, got {len(dlt)}")
    if np.any(dlt <= 0):
        raise NonPositiveDelta("observed quantization errors must be positive")
    if np.any(N <= 0) or np.any(D <= 0):
        raise InsufficientData("counts must be positive")


def _theta_to_params(theta: np.ndarray) -> DeltaParams:
    return DeltaParams(k=float(np.exp(theta[0])), gamma_N=float(theta[1]),
                       gamma_D=float(theta[2]), gamma_G=float(theta[3]))


def fit_delta(
    observations,
    cfg: Optional[OptimConfig] = None,
    huber_cfg: HuberConfig = HuberConfig(),
    freeze_gamma_d: Optional[float] = None,
) -> FitResult:
    """Fit ``delta = k * D**gD * log2(g)**gG / N**gN`` to (N, D, g, delta) rows.

    ``log delta`` is linear in ``(log k, gN, gD, gG)`` so the optimizer works
    directly in that space. ``freeze_gamma_d`` pins gD (0 drops D entirely).
    """
    cfg = cfg or OptimConfig()
    N, D, g, dlt = _obs_arrays(observations)
    _check_delta_obs(N, D, g, dlt)
    X = delta_design(N, D, g)
    y = np.log(dlt)
    free = [0, 1, 2, 3]
    if freeze_gamma_d is not None:
        y = y - freeze_gamma_d * X[:, 2]
        free = [0, 1, 3]
    Xf = X[:, free]
    mu = Xf.mean(axis=0)
    mu[0] = 0.0
    sd = Xf.std(axis=0)
    sd[0] = 1.0
    if np.any(sd == 0):
        raise InsufficientData("observations must vary in N, D and g")
    Z = (Xf - mu) / sd
    Z[:, 0] = 1.0

    def fun(phi):
        r = Z @ phi - y
        return float(np.sum(huber(r, huber_cfg))), Z.T @ huber_grad(r, huber_cfg)

    if cfg.multistart_grid is None:
        n_exp = len(free) - 1
        raw = np.array([(lk, *ex) for lk in LOG_COEF_GRID
                        for ex in itertools.product(EXPONENT_GRID, repeat=n_exp)], dtype=np.float64)
    else:
        raw = np.asarray(cfg.multistart_grid, dtype=np.float64)[:, : len(free)]
    # theta -> phi: phi0 = theta0 + sum(theta_j mu_j), phi_j = theta_j sd_j
    starts = raw * sd
    starts[:, 0] = raw @ mu + raw[:, 0]
    starts = _prune(starts, fun, min(cfg.max_starts, MAX_STARTS))

    best, idx, used = _multistart(fun, starts, cfg)
    if best is None:
        raise InsufficientData("no start produced a finite fit")
    theta_f = best.x / sd
    theta_f[0] = best.x[0] - (theta_f[1:] @ mu[1:])
    theta = np.empty(4)
    theta[free] = theta_f
    if freeze_gamma_d is not None:
        theta[2] = freeze_gamma_d
    params = _theta_to_params(theta)
    pred = np.exp(X @ theta)
    mse, r2 = fit_metrics(pred, dlt) if np.ptp(dlt) > 0 else (float(np.mean((pred - dlt) ** 2)), 1.0)
    return FitResult(params, best.fun, best.converged, used, r2, mse, idx, best.trace)


def fit_delta_ols(observations, freeze_gamma_d: Optional[float] = None) -> DeltaParams:
    """Closed-form least squares on the log-linear form (normal equations)."""
    N, D, g, dlt = _obs_arrays(observations)
    _check_delta_obs(N, D, g, dlt, min_obs=1)
    X = delta_design(N, D, g)
    y = np.log(dlt)
    cols = [0, 1, 2, 3]
    if freeze_gamma_d is not None:
        y = y - freeze_gamma_d * X[:, 2]
        cols = [0, 1, 3]
    Xc = X[:, cols]
    shift = Xc.mean(axis=0)
    shift[0] = 0.0
    Xc = Xc - shift
    gram = Xc.T @ Xc
    if np.linalg.matrix_rank(gram) < len(cols):
        raise SingularDesign("design matrix is rank deficient")
    beta = np.linalg.solve(gram, Xc.T @ y)
    beta[0] -= beta[1:] @ shift[1:]
    theta = np.empty(4)
    theta[cols] = beta
    if freeze_gamma_d is not None:
        theta[2] = freeze_gamma_d
    return _theta_to_params(theta)


def predict_delta(p: DeltaParams, N, D, g) -> np.ndarray:
    return np.exp(delta_design(N, D, g) @ np.array([np.log(p.k), p.gamma_N, p.gamma_D, p.gamma_G]))


def ablate_D(
    observations,
    cfg: Optional[OptimConfig] = None,
    huber_cfg: HuberConfig = HuberConfig(),
) -> tuple[float, float]:
    """Relative error of the full error law and of the law without D."""
    N, D, g, dlt = _obs_arrays(observations)
    with_d = fit_delta(observations, cfg, huber_cfg)
    without_d = fit_delta(observations, cfg, huber_cfg, freeze_gamma_d=0.0)
    return (
        relative_error(predict_delta(with_d.params, N, D, g), dlt),
        relative_error(predict_delta(without_d.params, N, D, g), dlt),
    )
