"""Derivative-free hyperparameter search.

Powell's direction-set method with Brent line minimization, wrapped in a
multi-start loop that shares one hard budget of objective evaluations.
Hyperparameters are searched in log space; points outside the bound box or
kernels that fail to factorize are penalized rather than raised.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .gp import GPModel, NotPSD
from .kernels import EvaluationFault, KernelLike, PairFeatures, as_kernel

PENALTY = 1e10
# line-search resolution in log-hyperparameter space (1% relative change)
LOG_XTOL = 1e-2
GOLDEN = 0.3819660112501051  # 2 - golden ratio
GROW = 1.618033988749895


class AllRunsFailed(RuntimeError):
    """Every evaluated hyperparameter set was penalized."""


class BudgetExhausted(Exception):
    pass


@dataclass
class OptBudget:
    max_lml_evals: int = 150
    ftol: float = 1e-4
    bounds: Optional[np.ndarray] = None  # p x 2; None means the kernel's own bounds

    def __post_init__(self):
        if self.max_lml_evals < 1:
            raise ValueError("max_lml_evals must be >= 1")
        if self.bounds is not None:
            self.bounds = np.asarray(self.bounds, dtype=float)
            if np.any(self.bounds[:, 0] >= self.bounds[:, 1]):
                raise ValueError("every bound needs lo < hi")


@dataclass
class OptResult:
    theta: np.ndarray
    best_lml: float
    evals_used: int
    restarts: int


class _Counted:
    """Objective wrapper that enforces the budget and remembers the best point."""

    def __init__(self, fn: Callable[[np.ndarray], float], limit: int):
        self.fn = fn
        self.limit = limit
        self.calls = 0
        self.best_x: Optional[np.ndarray] = None
        self.best_f = math.inf

    def __call__(self, x: np.ndarray) -> float:
        if self.calls >= self.limit:
            raise BudgetExhausted
        self.calls += 1
        f = float(self.fn(x))
        if not math.isfinite(f):
            f = PENALTY
        if f < self.best_f:
            self.best_f = f
            self.best_x = np.array(x, dtype=float)
        return f


def _expand(phi, a, b, fa, fb, lo, hi):
    """March away from ``a`` past ``b`` (``fb <= fa``) until the function rises.

    Returns a bracket ``(a, b, c, fa, fb, fc)``, or ``(None, b, None, None,
    fb, None)`` when the function is still decreasing at an end of ``[lo, hi]``.
    """
    while True:
        c = min(max(b + GROW * (b - a), lo), hi)
        if c == b:
            return None, b, None, None, fb, None
        fc = phi(c)
        if fc >= fb:
            return a, b, c, fa, fb, fc
        a, b, fa, fb = b, c, fb, fc


def _brent(phi, a, b, c, fa, fb, fc, tol: float = 1e-4, abs_tol: float = 1e-6, max_iter: int = 100):
    """Brent's method: golden-section search accelerated by parabolic steps.

    Starts from the bracket ``a < b < c`` (or reversed) so the first step is
    already parabolic, and stops once a parabolic step would move less than
    the tolerance.  Returns the best point and the two runner-up points.
    """
    lo, hi = min(a, c), max(a, c)
    x, fx = b, fb
    (w, fw), (v, fv) = sorted([(a, fa), (c, fc)], key=lambda t: t[1])
    d = e = hi - lo
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        tol1 = tol * abs(x) + abs_tol
        tol2 = 2.0 * tol1
        if abs(x - mid) <= tol2 - 0.5 * (hi - lo):
            break
        use_golden = True
        if abs(e) > tol1:
            r = (x - w) * (fx - fv)
            q = (x - v) * (fx - fw)
            p = (x - v) * q - (x - w) * r
            q = 2.0 * (q - r)
            if q > 0:
                p = -p
            q = abs(q)
            if abs(p) < abs(0.5 * q * e) and q * (lo - x) < p < q * (hi - x):
                e, d = d, p / q
                if abs(d) < tol1:
                    break
                u = x + d
                if u - lo < tol2 or hi - u < tol2:
                    d = math.copysign(tol1, mid - x)
                use_golden = False
        if use_golden:
            e = (lo - x) if x >= mid else (hi - x)
            d = GOLDEN * e
        u = x + (d if abs(d) >= tol1 else math.copysign(tol1, d))
        fu = phi(u)
        if fu <= fx:
            if u >= x:
                lo = x
            else:
                hi = x
            v, w, x = w, x, u
            fv, fw, fx = fw, fx, fu
        else:
            if u < x:
                lo = u
            else:
                hi = u
            if fu <= fw or w == x:
                v, w = w, u
                fv, fw = fw, fu
            elif fu <= fv or v == x or v == w:
                v, fv = u, fu
    return (x, fx), (w, fw), (v, fv)


def _curvature(points) -> float:
    """Second derivative of the parabola through three ``(t, f)`` points.

    NaN when the points are too close for the estimate to rise above rounding.
    """
    (t0, f0), (t1, f1), (t2, f2) = sorted(points)
    fs = (f0, f1, f2)
    if t0 == t1 or t1 == t2 or max(fs) - min(fs) <= 1e-8 * max(map(abs, fs)):
        return math.nan
    return 2.0 * ((f2 - f1) / (t2 - t1) - (f1 - f0) / (t1 - t0)) / (t2 - t0)


def _feasible_segment(x, direction, bounds):
    if bounds is None:
        return -math.inf, math.inf
    lo, hi = -math.inf, math.inf
    for xi, di, (L, U) in zip(x, direction, bounds):
        if di > 0:
            lo, hi = max(lo, (L - xi) / di), min(hi, (U - xi) / di)
        elif di < 0:
            lo, hi = max(lo, (U - xi) / di), min(hi, (L - xi) / di)
    return min(lo, 0.0), max(hi, 0.0)


def _line_minimize(f, x, fx, direction, bounds=None, xtol=1e-4, step=1.0,
                   curvature=math.nan, known=()):
    """Minimize ``f`` along ``x + t * direction``.

    ``known`` holds already evaluated ``(t, f)`` pairs on the line and
    ``curvature`` the second derivative seen along this direction last time;
    both save evaluations.  Returns ``(x_new, f_new, t, curvature)``.
    """

    def phi(t):
        return f(x + t * direction)

    lo, hi = _feasible_segment(x, direction, bounds)
    pts = {0.0: fx}
    pts.update((t, ft) for t, ft in known if lo <= t <= hi)
    if len(pts) == 1:
        t1 = min(step, hi) if hi > 0 else max(-step, lo)
        if t1 == 0.0:
            return x, fx, 0.0, curvature
        pts[t1] = phi(t1)
        if len(pts) == 2 and curvature > 0:
            # Newton step on the parabola with the remembered curvature
            slope = (pts[t1] - fx - 0.5 * curvature * t1 * t1) / t1
            tn = min(max(-slope / curvature, lo), hi)
            if tn not in pts:
                predicted = fx + slope * tn + 0.5 * curvature * tn * tn
                pts[tn] = phi(tn)
                drop = fx - predicted
                t_best = min(pts, key=pts.get)
                settled = abs(tn) * np.linalg.norm(direction) <= xtol * (1.0 + np.linalg.norm(x))
                if settled or (
                    drop > 0 and t_best == tn and abs(pts[tn] - predicted) <= 0.01 * drop
                ):
                    kappa = _curvature(pts.items())
                    if not kappa > 0:
                        kappa = curvature
                    return x + t_best * direction, pts[t_best], t_best, kappa

    order = sorted(pts.items())
    i = min(range(len(order)), key=lambda k: order[k][1])
    if 0 < i < len(order) - 1:
        (a, fa), (b, fb), (c, fc) = order[i - 1], order[i], order[i + 1]
    elif i == 0:
        (b, fb), (a, fa) = order[0], order[1]
        a, b, c, fa, fb, fc = _expand(phi, a, b, fa, fb, lo, hi)
    else:
        (a, fa), (b, fb) = order[-2], order[-1]
        a, b, c, fa, fb, fc = _expand(phi, a, b, fa, fb, lo, hi)
    if a is None:
        t, ft, kappa = b, fb, curvature
    else:
        best, w, v = _brent(phi, a, b, c, fa, fb, fc, tol=xtol, abs_tol=0.01 * xtol)
        (t, ft), kappa = best, _curvature([best, w, v])
        if not kappa > 0:
            kappa = curvature
    if ft > fx:  # never move uphill
        return x, fx, 0.0, kappa
    return x + t * direction, ft, t, kappa


def powell_minimize(
    objective: Callable[[np.ndarray], float],
    x0,
    budget: Optional[OptBudget] = None,
    *,
    max_evals: Optional[int] = None,
    ftol: Optional[float] = None,
    bounds=None,
    xtol: float = 1e-4,
) -> tuple[np.ndarray, float, int]:
    """Minimize ``objective`` with Powell's direction-set method.

    Returns ``(x_best, f_best, evals)``.  The evaluation limit is a hard
    ceiling; on exhaustion the best point visited so far is returned.
    ``bounds`` (p x 2) confines line searches to the box; the objective is
    still free to penalize points outside it.
    """
    budget = budget or OptBudget()
    limit = budget.max_lml_evals if max_evals is None else max_evals
    tol = budget.ftol if ftol is None else ftol
    f = objective if isinstance(objective, _Counted) else _Counted(objective, limit)
    start_calls = f.calls
    x = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    p = x.size
    directions = np.eye(p)
    # trial step and last seen curvature per direction
    steps = np.ones(p)
    curv = np.full(p, math.nan)
    try:
        fx = f(x)
        while True:
            x_start, f_start = x.copy(), fx
            biggest_drop, biggest_idx = 0.0, 0
            for i in range(p):
                f_before = fx
                x, fx, t, curv[i] = _line_minimize(
                    f, x, fx, directions[i], bounds, xtol, steps[i], curv[i]
                )
                steps[i] = min(max(2.0 * abs(t), 1e-2), 1.0)
                if f_before - fx > biggest_drop:
                    biggest_drop, biggest_idx = f_before - fx, i
            if 2.0 * (f_start - fx) <= tol * (abs(f_start) + abs(fx)) + 1e-20:
                break
            # a whole sweep that moves less than the line resolution has stalled
            if np.max(np.abs(x - x_start)) <= xtol:
                break
            # Powell's rule: maybe replace the direction of largest decrease
            new_dir = x - x_start
            x_ext = 2.0 * x - x_start
            if bounds is not None and np.any((x_ext < bounds[:, 0]) | (x_ext > bounds[:, 1])):
                f_ext = math.inf  # never probe outside the box
            else:
                f_ext = f(x_ext)
            if f_ext < f_start:
                try:
                    t = 2.0 * (f_start - 2.0 * fx + f_ext) * (f_start - fx - biggest_drop) ** 2
                    t -= biggest_drop * (f_start - f_ext) ** 2
                except OverflowError:  # astronomically large objective values
                    t = math.nan
                if t < 0:
                    x, fx, _, kappa = _line_minimize(
                        f, x, fx, new_dir, bounds, xtol,
                        known=((-1.0, f_start), (1.0, f_ext)),
                    )
                    directions[biggest_idx] = directions[-1]
                    steps[biggest_idx], curv[biggest_idx] = steps[-1], curv[-1]
                    directions[-1] = new_dir
                    steps[-1], curv[-1] = 1.0, kappa
    except BudgetExhausted:
        pass
    if f.best_x is None:
        return x, math.inf, f.calls - start_calls
    return f.best_x.copy(), f.best_f, f.calls - start_calls


# ----------------------------------------------------------------------------
# LML objective

class LMLObjective:
    """Negative LML of a kernel over log-hyperparameters, with penalties.

    Counts every call in ``evals`` so callers can audit the budget.
    """

    def __init__(self, kernel: KernelLike, X, f, bounds=None):
        self.kernel = as_kernel(kernel)
        self.X = np.atleast_2d(np.asarray(X, dtype=float))
        self.f = np.asarray(f, dtype=float).ravel()
        self.bounds = self.kernel.bounds() if bounds is None else np.asarray(bounds, float)
        self.log_bounds = np.log(self.bounds)
        self.feats = PairFeatures(self.X)
        self.evals = 0

    def lml(self, theta) -> float:
        model = GPModel(self.kernel, theta, self.X, self.f)
        model.factorize(self.feats)
        return model.log_marginal_likelihood()

    def __call__(self, log_theta) -> float:
        self.evals += 1
        log_theta = np.asarray(log_theta, dtype=float)
        lo, hi = self.log_bounds[:, 0], self.log_bounds[:, 1]
        outside = np.maximum(lo - log_theta, 0.0) + np.maximum(log_theta - hi, 0.0)
        if np.any(outside > 0):
            return PENALTY + float(outside.sum())
        try:
            value = -self.lml(np.exp(log_theta))
        except (NotPSD, EvaluationFault, np.linalg.LinAlgError, ValueError):
            return PENALTY
        return value if math.isfinite(value) else PENALTY


def penalized_objective(kernel: KernelLike, X, f, theta_raw) -> float:
    """``-LML`` at ``exp(theta_raw)``; ``PENALTY`` (+ distance to the box) otherwise."""
    return LMLObjective(kernel, X, f)(theta_raw)


def optimize_hyperparams(
    kernel: KernelLike,
    X,
    f,
    budget: Optional[OptBudget] = None,
    rng: Optional[np.random.Generator] = None,
    objective: Optional[LMLObjective] = None,
) -> OptResult:
    """Multi-start Powell search maximizing the LML under a shared budget."""
    budget = budget or OptBudget()
    rng = rng if rng is not None else np.random.default_rng()
    obj = objective or LMLObjective(kernel, X, f, budget.bounds)
    p = obj.kernel.n_params
    if p == 0:
        # nothing to search: report the true LML, however poor, unless it faults
        obj.evals += 1
        try:
            value = obj.lml(np.zeros(0))
        except (NotPSD, EvaluationFault, np.linalg.LinAlgError, ValueError) as exc:
            raise AllRunsFailed(f"{obj.kernel.label} cannot be factorized") from exc
        if not math.isfinite(value):
            raise AllRunsFailed(f"{obj.kernel.label} has a non-finite LML")
        return OptResult(np.zeros(0), value, 1, 0)

    counted = _Counted(obj, budget.max_lml_evals)
    lo, hi = obj.log_bounds[:, 0], obj.log_bounds[:, 1]
    restarts = -1
    while counted.calls < budget.max_lml_evals:
        restarts += 1
        x0 = rng.uniform(lo, hi)
        powell_minimize(counted, x0, budget, bounds=obj.log_bounds, xtol=LOG_XTOL)
    if counted.best_x is None or counted.best_f >= PENALTY:
        raise AllRunsFailed(f"every evaluation of {obj.kernel.label} was penalized")
    return OptResult(np.exp(counted.best_x), -counted.best_f, counted.calls, max(restarts, 0))
