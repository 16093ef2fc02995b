"""Exact gradients and a limited-memory BFGS minimizer.

Objectives come in two flavours.  A *plain* objective ``f(x)`` is written with
the operations in :mod:`genservo.dual` and differentiated by seeding ``x`` with
the identity.  A *value-and-gradient* objective returns ``(f, g)`` itself;
the learning code uses this form to exploit Jacobian sparsity.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from . import dual as ad
from .errors import NonFiniteObjective

GRADIENT_TOL = "gradient_tol"
MAX_ITER = "max_iter"
LINE_SEARCH_FAILURE = "line_search_failure"

# damping of dense (Gauss-Newton) preconditioners, relative to a unit diagonal
DAMPING_START = 1e-4
DAMPING_MIN = 1e-12
DAMPING_MAX = 1e2


@dataclass(frozen=True)
class OptimizerOptions:
    max_iterations: int = 500
    gradient_tolerance: float = 1e-9
    history_size: int = 20
    line_search_max_steps: int = 20

    def __post_init__(self):
        for name in ("max_iterations", "gradient_tolerance", "history_size", "line_search_max_steps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")

    def replace(self, **changes) -> "OptimizerOptions":
        return OptimizerOptions(**{**asdict(self), **changes})


@dataclass
class FitReport:
    initial_objective: float
    final_objective: float
    iterations: int
    converged: bool
    termination_reason: str
    evaluations: int = 0
    stage: str = ""
    notes: list = field(default_factory=list)
    history: list = field(default_factory=list, repr=False)

    def to_dict(self, with_history: bool = False) -> dict:
        d = asdict(self)
        if not with_history:
            d.pop("history")
        return d


def gradient(f: Callable, x) -> np.ndarray:
    """Gradient of a scalar objective by forward accumulation."""
    x = np.asarray(x, dtype=float).ravel()
    y = f(ad.Dual.variable(x))
    if not ad.is_dual(y):
        if not np.all(np.isfinite(y)):
            raise NonFiniteObjective(f"objective is {y}")
        return np.zeros_like(x)
    if y.value.size != 1:
        raise ValueError("objective must be scalar")
    if not np.isfinite(y.value).all():
        raise NonFiniteObjective(f"objective is {float(y.value)}")
    return np.array(y.grad.reshape(-1), dtype=float)


def value_and_gradient(f: Callable) -> Callable:
    """Wrap a plain objective into the ``x -> (f, g)`` form."""

    def fg(x):
        y = f(ad.Dual.variable(x))
        if not ad.is_dual(y):
            return float(y), np.zeros(len(x))
        return float(y.value), np.array(y.grad.reshape(-1))

    return fg


class _Metric:
    """Initial inverse-Hessian guess from a positive diagonal or a dense PSD matrix.

    Dense matrices are Jacobi-scaled to unit diagonal and damped by
    ``damping`` times the identity before factorization; the damping keeps
    flat (gauge) and weakly determined directions from producing huge steps.
    """

    def __init__(self, approx, damping: float = 0.0):
        approx = np.asarray(approx, dtype=float)
        self.dense = approx.ndim == 2
        if self.dense:
            d = np.diag(approx).copy()
            scale = max(float(np.max(d)), 1e-300) if d.size else 1.0
            d = np.maximum(d, 1e-12 * scale)
            self.inv_sqrt = 1.0 / np.sqrt(d)
            scaled = approx * np.outer(self.inv_sqrt, self.inv_sqrt)
            scaled[np.diag_indices_from(scaled)] += max(damping, 1e-12)
            self.factor = cho_factor(scaled, lower=True, check_finite=False)
        else:
            floor = 1e-12 * max(float(np.max(approx)), 1e-300) if approx.size else 1.0
            self.inv_diag = 1.0 / np.maximum(approx, floor)

    def solve(self, v):
        if self.dense:
            return self.inv_sqrt * cho_solve(self.factor, self.inv_sqrt * v, check_finite=False)
        return self.inv_diag * v


def _free_direction(g, pinned, precond, x, damping):
    # Newton-like step over the coordinates not held at a bound; the
    # curvature memory mixes in the pinned ones, so it is not used here
    if precond is None:
        return None
    approx = np.asarray(precond(x) if callable(precond) else precond, dtype=float)
    free = ~pinned
    if approx.ndim != 2 or not free.any():
        return None
    try:
        metric = _Metric(approx[np.ix_(free, free)], damping)
    except (LinAlgError, ValueError):
        return None
    d = np.zeros_like(g)
    d[free] = -metric.solve(g[free])
    return d if g @ d < 0 else None


def _two_loop(g, s_hist, y_hist, rho_hist, gamma, metric):
    q = g.copy()
    alphas = []
    for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    r = gamma * (q if metric is None else metric.solve(q))
    for (s, y, rho), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
        b = rho * (y @ r)
        r += s * (a - b)
    return r


def _cubicmin(a, fa, fpa, b, fb, c, fc):
    # minimizer of the cubic through (a, fa, fpa), (b, fb), (c, fc)
    with np.errstate(divide="raise", over="raise", invalid="raise"):
        try:
            C = fpa
            db, dc = b - a, c - a
            denom = (db * dc) ** 2 * (db - dc)
            d1 = np.array([[dc**2, -(db**2)], [-(dc**3), db**3]])
            A, B = d1 @ np.array([fb - fa - C * db, fc - fa - C * dc]) / denom
            radical = B * B - 3 * A * C
            xmin = a + (-B + np.sqrt(radical)) / (3 * A)
        except (ArithmeticError, FloatingPointError):
            return None
    return xmin if np.isfinite(xmin) else None


def _quadmin(a, fa, fpa, b, fb):
    with np.errstate(divide="raise", over="raise", invalid="raise"):
        try:
            db = b - a
            B = (fb - fa - fpa * db) / (db * db)
            xmin = a - fpa / (2.0 * B)
        except (ArithmeticError, FloatingPointError):
            return None
    return xmin if np.isfinite(xmin) else None


def _zoom(phi, a_lo, a_hi, f_lo, f_hi, d_lo, f0, d0, c1, c2, budget):
    a_rec, f_rec = 0.0, f0
    for j in range(budget):
        lo, hi = min(a_lo, a_hi), max(a_lo, a_hi)
        width = hi - lo
        a_j = None
        if j > 0:
            a_j = _cubicmin(a_lo, f_lo, d_lo, a_hi, f_hi, a_rec, f_rec)
            if a_j is not None and not (lo + 0.2 * width < a_j < hi - 0.2 * width):
                a_j = None
        if a_j is None:
            a_j = _quadmin(a_lo, f_lo, d_lo, a_hi, f_hi)
            if a_j is None or not (lo + 0.1 * width < a_j < hi - 0.1 * width):
                a_j = lo + 0.5 * width
        f_j, g_j, d_j = phi(a_j)
        if f_j > f0 + c1 * a_j * d0 or f_j >= f_lo:
            a_rec, f_rec = a_hi, f_hi
            a_hi, f_hi = a_j, f_j
        else:
            if abs(d_j) <= -c2 * d0:
                return a_j, f_j, g_j
            if d_j * (a_hi - a_lo) >= 0:
                a_rec, f_rec = a_hi, f_hi
                a_hi, f_hi = a_lo, f_lo
            else:
                a_rec, f_rec = a_lo, f_lo
            a_lo, f_lo, d_lo = a_j, f_j, d_j
    return None


def _wolfe_search(fg, x, f0, g0, d, alpha0, max_steps, c1=1e-4, c2=0.9):
    """Strong-Wolfe bracketing line search.  Returns ``(alpha, f, g, nevals)`` or ``None``."""
    nevals = [0]
    cache = {}

    def phi(alpha):
        nevals[0] += 1
        f, g = fg(x + alpha * d)
        if not np.isfinite(f):
            f, g = np.inf, np.full_like(g0, np.nan)
        cache[alpha] = (f, g)
        return f, g, (g @ d if np.isfinite(f) else np.inf)

    d0 = g0 @ d
    a_prev, f_prev, dd_prev = 0.0, f0, d0
    a = alpha0
    for i in range(max_steps):
        f_a, g_a, d_a = phi(a)
        if not np.isfinite(f_a):
            # overshot into an invalid region: shrink and retry
            a = 0.5 * (a_prev + a) if a > a_prev else 0.5 * a
            continue
        if f_a > f0 + c1 * a * d0 or (i > 0 and f_a >= f_prev):
            res = _zoom(phi, a_prev, a, f_prev, f_a, dd_prev, f0, d0, c1, c2, max_steps - nevals[0])
            return None if res is None else (*res, nevals[0])
        if abs(d_a) <= -c2 * d0:
            return a, f_a, g_a, nevals[0]
        if d_a >= 0:
            res = _zoom(phi, a, a_prev, f_a, f_prev, d_a, f0, d0, c1, c2, max_steps - nevals[0])
            return None if res is None else (*res, nevals[0])
        a_prev, f_prev, dd_prev = a, f_a, d_a
        a = 2.0 * a
    return None


def _projected_search(fg, project, x, f0, g0, d, alpha0, max_steps, c1=1e-4):
    alpha = alpha0
    for k in range(1, max_steps + 1):
        xt = project(x + alpha * d)
        f, g = fg(xt)
        if np.isfinite(f) and f <= f0 + c1 * (g0 @ (xt - x)) and f < f0:
            return xt, f, g, k
        alpha *= 0.5
    return None


def minimize(
    fun: Callable,
    x0,
    opts: Optional[OptimizerOptions] = None,
    *,
    with_gradient: bool = False,
    precond=None,
    precond_every: int = 10,
    project: Optional[Callable] = None,
    callback: Optional[Callable] = None,
    stage: str = "",
):
    """L-BFGS with a strong-Wolfe line search.

    ``fun`` is either a plain objective or, with ``with_gradient=True``, a
    callable returning ``(f, g)``.  ``precond`` shapes the initial
    inverse-Hessian guess of the two-loop recursion: a positive diagonal or a
    dense SPD matrix approximating the Hessian, or a callable ``x -> approx``
    that is re-evaluated every ``precond_every`` iterations and after a
    line-search failure.  ``project`` maps points back onto a feasible box
    after each step (the line search then backtracks along the projected
    path).  Returns ``(x, FitReport)``; the best iterate is always returned,
    line-search failures are reported rather than raised.
    """
    opts = opts or OptimizerOptions()
    fg = fun if with_gradient else value_and_gradient(fun)
    x = np.array(x0, dtype=float).ravel()
    if project is not None:
        x = project(x)
    f, g = fg(x)
    nevals = 1
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise NonFiniteObjective(f"objective is not finite at the starting point ({f})")

    damping = [DAMPING_START]
    full_steps = [0, 0]  # (accepted at unit step, total) since the last refresh

    def make_metric(at):
        if precond is None:
            return None
        if full_steps[1]:
            # shrink damping while unit steps keep being accepted, grow it otherwise
            if full_steps[0] == full_steps[1]:
                damping[0] = max(damping[0] * 0.1, DAMPING_MIN)
            elif full_steps[0] < full_steps[1] / 2:
                damping[0] = min(damping[0] * 10.0, DAMPING_MAX)
        full_steps[0] = full_steps[1] = 0
        approx = precond(at) if callable(precond) else precond
        try:
            return _Metric(approx, damping[0])
        except (LinAlgError, ValueError):
            return _Metric(np.abs(np.diag(np.asarray(approx, dtype=float))))

    metric = make_metric(x)
    metric_age = 0
    f_init = f
    s_hist, y_hist, rho_hist = [], [], []
    history = [f]
    reason = MAX_ITER
    it = 0
    gamma = 1.0
    retried = False
    def stationarity(x, g):
        # with a box, components pinned at a bound by the gradient do not count
        return g if project is None else x - project(x - g)

    while True:
        if np.max(np.abs(stationarity(x, g)), initial=0.0) < opts.gradient_tolerance:
            reason = GRADIENT_TOL
            break
        if it >= opts.max_iterations:
            reason = MAX_ITER
            break
        if callable(precond) and metric_age >= precond_every:
            metric, metric_age = make_metric(x), 0
            s_hist, y_hist, rho_hist = [], [], []
            gamma = 1.0
        if s_hist:
            d = -_two_loop(g, s_hist, y_hist, rho_hist, gamma, metric)
            alpha0 = 1.0
        else:
            d = -(g if metric is None else metric.solve(g))
            alpha0 = 1.0 if metric is not None else min(1.0, 1.0 / max(np.max(np.abs(g)), 1e-300))
        if not (g @ d < 0):
            s_hist, y_hist, rho_hist = [], [], []
            d = -(g if metric is None else metric.solve(g))
            if not (g @ d < 0):
                d = -g
        pinned_any = False
        if project is not None:
            pinned = (stationarity(x, g) == 0.0) & (g != 0.0)
            pinned_any = bool(pinned.any())
            if pinned_any:
                d = _free_direction(g, pinned, precond, x, damping[0])
                if d is None:
                    d = np.where(pinned, 0.0, -g)
        res = None
        if not pinned_any:
            # away from the bounds the box is invisible: keep the curvature
            # condition, and fall back to the projected path only on leaving it
            res = _wolfe_search(fg, x, f, g, d, alpha0, opts.line_search_max_steps)
            if res is not None:
                alpha, f_new, g_new, k = res
                x_new = x + alpha * d
                if project is not None and not np.array_equal(project(x_new), x_new):
                    nevals += k
                    res = None
                else:
                    full_steps[0] += alpha == 1.0
                    full_steps[1] += 1
        if res is None and project is not None:
            res = _projected_search(fg, project, x, f, g, d, alpha0, opts.line_search_max_steps)
            if res is not None:
                x_new, f_new, g_new, k = res
                full_steps[0] += k == 1
                full_steps[1] += 1
        if res is None:
            nevals += opts.line_search_max_steps
            if not retried:
                # stale curvature pairs or preconditioner; retry once from scratch
                retried = True
                s_hist, y_hist, rho_hist = [], [], []
                gamma = 1.0
                if precond is not None:
                    damping[0] = min(damping[0] * 100.0, DAMPING_MAX)
                    full_steps[0] = full_steps[1] = 0
                    metric, metric_age = make_metric(x), 0
                continue
            reason = LINE_SEARCH_FAILURE
            break
        retried = False
        nevals += k
        s = x_new - x
        y = g_new - g
        sy = s @ y
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            s_hist.append(s)
            y_hist.append(y)
            rho_hist.append(1.0 / sy)
            if len(s_hist) > opts.history_size:
                s_hist.pop(0)
                y_hist.pop(0)
                rho_hist.pop(0)
            yhy = y @ (y if metric is None else metric.solve(y))
            gamma = sy / yhy
        x, f, g = x_new, f_new, g_new
        it += 1
        metric_age += 1
        history.append(f)
        if callback is not None:
            callback(it, f)
        if f == 0.0:
            reason = GRADIENT_TOL
            break

    report = FitReport(
        initial_objective=float(f_init),
        final_objective=float(f),
        iterations=it,
        converged=reason == GRADIENT_TOL,
        termination_reason=reason,
        evaluations=nevals,
        stage=stage,
        history=history,
    )
    return x, report


def fsum(values) -> float:
    """Order-independent sum."""
    return math.fsum(np.asarray(values, dtype=float).ravel())
