"""Limited-memory BFGS with a strong-Wolfe line search.

Objectives are callables ``fun(x) -> (value, gradient)`` on 1-D float arrays.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from qsl.errors import NonFiniteObjective

log = logging.getLogger(__name__)

Objective = Callable[[np.ndarray], tuple]


@dataclass
class OptimConfig:
    memory: int = 10
    grad_tol: float = 1e-9
    max_iters: int = 2000
    multistart_grid: Optional[list] = None
    max_starts: int = 500

    def __post_init__(self):
        if self.memory < 1:
            raise ValueError("memory must be >= 1")
        if self.grad_tol <= 0:
            raise ValueError("grad_tol must be positive")
        if self.multistart_grid is not None and len(self.multistart_grid) == 0:
            raise ValueError("multistart grid is empty")


@dataclass
class LBFGSResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    n_iter: int
    converged: bool
    message: str
    trace: list = field(default_factory=list)

    def __iter__(self):
        # allows ``x, value = lbfgs_minimize(...)``
        yield self.x
        yield self.fun


def _cubic_min(a, fa, ga, b, fb, gb):
    """Minimizer of the cubic interpolating two points and slopes, or None."""
    if a == b:
        return None
    d1 = ga + gb - 3 * (fa - fb) / (a - b)
    rad = d1 * d1 - ga * gb
    if rad < 0:
        return None
    d2 = np.copysign(np.sqrt(rad), b - a)
    den = gb - ga + 2 * d2
    if den == 0:
        return None
    return b - (b - a) * (gb + d2 - d1) / den


def _strong_wolfe(phi, f0, g0, step, c1=1e-4, c2=0.9, max_evals=40):
    """Line search on ``phi(a) -> (f, slope, x, grad)``.

    Returns the accepted evaluation tuple ``(a, f, slope, x, grad)`` or None.
    """
    prev = (0.0, f0, g0, None, None)
    a = step
    evals = 0
    # near a minimum f stops resolving steps; fall back on the slope alone
    f_tol = 1e-12 * max(1.0, abs(f0))

    def approx_wolfe(f, g):
        return f <= f0 + f_tol and c2 * g0 <= g <= (2 * c1 - 1) * g0

    def zoom(lo, hi):
        nonlocal evals
        while evals < max_evals:
            a_lo, f_lo, g_lo = lo[0], lo[1], lo[2]
            a_hi, f_hi, g_hi = hi[0], hi[1], hi[2]
            width = abs(a_hi - a_lo)
            t = _cubic_min(a_lo, f_lo, g_lo, a_hi, f_hi, g_hi) if np.isfinite(f_hi) else None
            left, right = min(a_lo, a_hi), max(a_lo, a_hi)
            if t is None or not (left + 0.1 * width <= t <= right - 0.1 * width):
                t = 0.5 * (a_lo + a_hi)
            f, g, x, gr = phi(t)
            evals += 1
            cur = (t, f, g, x, gr)
            if np.isfinite(f) and approx_wolfe(f, g):
                return cur
            if not np.isfinite(f) or f > f0 + c1 * t * g0 or f >= f_lo:
                hi = cur
            else:
                if abs(g) <= -c2 * g0:
                    return cur
                if g * (a_hi - a_lo) >= 0:
                    hi = lo
                lo = cur
            if width < 1e-16 * max(1.0, right):
                break
        return lo if lo[3] is not None and lo[1] < f0 else None

    while evals < max_evals:
        f, g, x, gr = phi(a)
        evals += 1
        cur = (a, f, g, x, gr)
        if not np.isfinite(f):
            # overshoot into a non-finite region: shrink before bracketing
            a = 0.5 * (prev[0] + a)
            continue
        if approx_wolfe(f, g):
            return cur
        if f > f0 + c1 * a * g0 or (evals > 1 and f >= prev[1]):
            return zoom(prev, cur)
        if abs(g) <= -c2 * g0:
            return cur
        if g >= 0:
            return zoom(cur, prev)
        prev = cur
        a *= 2.0
    return None


def lbfgs_minimize(fun: Objective, x0, cfg: OptimConfig | None = None) -> LBFGSResult:
    """Minimize ``fun`` from ``x0``.

    Stops when the max-norm of the gradient drops to ``cfg.grad_tol``.
    A failed line search or stalled progress returns the best iterate with
    ``converged=False`` and the reason in ``message``.
    """
    cfg = cfg or OptimConfig()
    x = np.array(x0, dtype=np.float64)
    f, g = fun(x)
    f = float(f)
    g = np.asarray(g, dtype=np.float64)
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise NonFiniteObjective(f"objective is not finite at the starting point: {f}")
    s_hist: deque = deque(maxlen=cfg.memory)
    y_hist: deque = deque(maxlen=cfg.memory)
    rho_hist: deque = deque(maxlen=cfg.memory)
    trace = [f]

    for it in range(cfg.max_iters):
        if np.max(np.abs(g)) <= cfg.grad_tol:
            return LBFGSResult(x, f, g, it, True, "gradient tolerance reached", trace)

        # two-loop recursion
        q = g.copy()
        alphas = []
        for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
            a_i = rho * (s @ q)
            alphas.append(a_i)
            q -= a_i * y
        if s_hist:
            q *= (s_hist[-1] @ y_hist[-1]) / (y_hist[-1] @ y_hist[-1])
        for (s, y, rho), a_i in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
            b = rho * (y @ q)
            q += (a_i - b) * s
        p = -q
        slope = float(g @ p)
        if slope >= 0:
            # lost descent; restart from steepest descent
            s_hist.clear(), y_hist.clear(), rho_hist.clear()
            p = -g
            slope = float(g @ p)

        step0 = 1.0 if s_hist else min(1.0, 1.0 / max(np.linalg.norm(g), 1e-300))

        def phi(a, x=x, p=p):
            xa = x + a * p
            fa, ga = fun(xa)
            fa = float(fa)
            ga = np.asarray(ga, dtype=np.float64)
            if not np.all(np.isfinite(ga)):
                fa = np.inf
            return fa, float(ga @ p) if np.isfinite(fa) else np.nan, xa, ga

        res = _strong_wolfe(phi, f, slope, step0)
        if res is None:
            msg = "line search failed"
            log.debug("%s at iteration %d (f=%.6g)", msg, it, f)
            return LBFGSResult(x, f, g, it, False, msg, trace)
        _, f_new, _, x_new, g_new = res
        s = x_new - x
        y = g_new - g
        sy = float(s @ y)
        stalled = f - f_new <= 1e-16 * max(1.0, abs(f)) and np.max(np.abs(g_new)) >= np.max(np.abs(g))
        x, f, g = x_new, f_new, g_new
        trace.append(f)
        if sy > 1e-300:
            s_hist.append(s)
            y_hist.append(y)
            rho_hist.append(1.0 / sy)
        if stalled and np.max(np.abs(g)) > cfg.grad_tol:
            return LBFGSResult(x, f, g, it + 1, False, "no further decrease possible", trace)

    converged = bool(np.max(np.abs(g)) <= cfg.grad_tol)
    return LBFGSResult(x, f, g, cfg.max_iters, converged, "iteration limit", trace)
