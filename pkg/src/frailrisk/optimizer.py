"""Quasi-Newton minimisation with a Wolfe line search.

The inverse-Hessian approximation is updated by the BFGS formula from
gradient differences only.  Each accepted Wolfe step is refined by secant
iterations on the directional derivative, which makes the line search exact
on quadratics and gives finite termination there (up to rounding).

Near the optimum f differences fall to roundoff and the Armijo test stops
being informative.  Steps are then accepted on slopes alone, letting f rise by
at most a few ulps, so the recorded f-values are non-increasing up to that
allowance.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

EPS = np.finfo(float).eps
# predicted decrease below FLAT_FACTOR ulps of |f| counts as roundoff-level
FLAT_FACTOR = 1e4
NOISE_FACTOR = 16.0

Objective = Callable[[np.ndarray], float]
Gradient = Callable[[np.ndarray], np.ndarray]


class LineSearchError(RuntimeError):
    pass


class OptimizationError(RuntimeError):
    pass


class CovarianceError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    max_iterations: int = 500
    gradient_tolerance: float = 1e-8
    c1: float = 1e-4
    c2: float = 0.9
    max_trials: int = 40
    initial_scaling: str = "gradient_norm"  # or "identity"
    rescale_after_first_step: bool = True

    def __post_init__(self):
        if self.gradient_tolerance <= 0 or self.max_iterations < 0:
            raise ValueError("tolerances must be positive")
        if not 0 < self.c1 < self.c2 < 1:
            raise ValueError("need 0 < c1 < c2 < 1")


@dataclass
class IterationRecord:
    iteration: int
    theta: list[float]
    f: float
    max_abs_gradient: float
    step_length: float
    direction_norm: float


@dataclass
class OptimizerTrace:
    records: list[IterationRecord] = field(default_factory=list)
    termination: str = ""
    steepest_descent_resets: int = 0
    n_function_evals: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @property
    def f_values(self) -> list[float]:
        return [r.f for r in self.records]


@dataclass
class OptimizeResult:
    theta: np.ndarray
    f: float
    gradient: np.ndarray
    hessian: np.ndarray
    inverse_hessian: np.ndarray
    converged: bool
    iterations: int
    trace: OptimizerTrace

    @property
    def max_abs_gradient(self) -> float:
        return float(np.max(np.abs(self.gradient))) if self.gradient.size else 0.0


class _Line:
    """phi(a) = f(x + a p) with caching and non-finite values mapped to +inf."""

    def __init__(self, fg, x, p, trace):
        self.fg, self.x, self.p, self.trace = fg, x, p, trace
        self.cache: dict[float, tuple[float, float, np.ndarray | None]] = {}

    def __call__(self, a: float):
        if a not in self.cache:
            self.trace.n_function_evals += 1
            try:
                f, g = self.fg(self.x + a * self.p)
            except (ArithmeticError, ValueError, OverflowError):
                f, g = math.inf, None
            if not math.isfinite(f) or g is None or not np.all(np.isfinite(g)):
                self.cache[a] = (math.inf, math.nan, None)
            else:
                self.cache[a] = (f, float(g @ self.p), g)
        return self.cache[a]


def _cubic_min(a0, f0, d0, a1, f1, d1):
    """Minimiser of the cubic Hermite interpolant on [a0, a1], or None."""
    d = a1 - a0
    if d == 0:
        return None
    t1 = d0 + d1 - 3.0 * (f1 - f0) / d
    disc = t1 * t1 - d0 * d1
    if disc < 0:
        return None
    t2 = math.copysign(math.sqrt(disc), d)
    denom = d1 - d0 + 2.0 * t2
    if denom == 0:
        return None
    a = a1 - d * (d1 + t2 - t1) / denom
    return a if math.isfinite(a) else None


def _zoom(phi, lo, hi, f0, d0, c1, c2, trials):
    a_lo, f_lo, d_lo = lo
    a_hi, f_hi, d_hi = hi
    for _ in range(trials):
        a = None
        if math.isfinite(f_hi) and math.isfinite(d_hi):
            a = _cubic_min(a_lo, f_lo, d_lo, a_hi, f_hi, d_hi)
        lo_b, hi_b = min(a_lo, a_hi), max(a_lo, a_hi)
        margin = 0.1 * (hi_b - lo_b)
        if a is None or not (lo_b + margin <= a <= hi_b - margin):
            a = 0.5 * (a_lo + a_hi)
        if a == a_lo or a == a_hi:
            break
        f, dphi, _ = phi(a)
        if not math.isfinite(f) or f > f0 + c1 * a * d0 or f >= f_lo:
            a_hi, f_hi, d_hi = a, f, dphi
        else:
            if abs(dphi) <= -c2 * d0:
                return a
            if dphi * (a_hi - a_lo) >= 0:
                a_hi, f_hi, d_hi = a_lo, f_lo, d_lo
            a_lo, f_lo, d_lo = a, f, dphi
    return None


def wolfe_line_search(phi, f0, d0, alpha0=1.0, c1=1e-4, c2=0.9, max_trials=40):
    """Step satisfying the strong Wolfe conditions (bracketing then zoom)."""
    a_prev, f_prev, d_prev = 0.0, f0, d0
    a = alpha0
    for i in range(max_trials):
        f, dphi, _ = phi(a)
        if not math.isfinite(f):
            # rejected trial: shrink toward the last good point
            a = a_prev + 0.5 * (a - a_prev)
            continue
        if f > f0 + c1 * a * d0 or (i > 0 and f >= f_prev):
            return _zoom(phi, (a_prev, f_prev, d_prev), (a, f, dphi), f0, d0, c1, c2, max_trials)
        if abs(dphi) <= -c2 * d0:
            return a
        if dphi >= 0:
            return _zoom(phi, (a, f, dphi), (a_prev, f_prev, d_prev), f0, d0, c1, c2, max_trials)
        a_prev, f_prev, d_prev = a, f, dphi
        a = 2.0 * a
    return None


def _refine(phi, a, f0, d0, c1, c2, steps=3):
    """Secant iterations on the directional derivative toward the line minimiser.

    Uses slopes only, so it stays accurate when f differences are at
    roundoff, and it is exact on quadratics up to rounding (the extra steps
    mop that up).  Each accepted point keeps the Armijo condition.
    """
    ap, dp = 0.0, d0
    _, da, _ = phi(a)
    for _ in range(steps):
        if da == 0 or da == dp:
            break
        ac = a - da * (a - ap) / (da - dp)
        if not math.isfinite(ac) or ac <= 0 or abs(ac - a) <= 1e-12 * a:
            break
        fc, dc, _ = phi(ac)
        if not (math.isfinite(fc) and fc <= f0 + c1 * ac * d0 and abs(dc) < abs(da)):
            break
        ap, dp = a, da
        a, da = ac, dc
    return a


def _flat_step(phi, f0, d0, c2, noise):
    """Slope-based step for when f can no longer resolve the predicted decrease.

    Near the optimum the Armijo test compares values that differ only by
    roundoff.  On a convex line ``|phi'(a)| <= c2 |phi'(0)|`` already implies
    a decrease, so the unit step and the slope-secant step are judged by their
    directional derivatives, with f allowed to exceed f0 by at most ``noise``.
    """
    cands = [1.0]
    f1, d1, _ = phi(1.0)
    if math.isfinite(f1) and d1 > d0:
        a = d0 / (d0 - d1)
        if math.isfinite(a) and a > 0:
            cands.append(a)
    good = []
    for a in cands:
        f, dphi, _ = phi(a)
        if math.isfinite(f) and f <= f0 + noise and abs(dphi) <= -c2 * d0:
            good.append((f > f0, abs(dphi), a))
    return min(good)[2] if good else None


def minimize(
    f: Objective,
    g: Gradient | None,
    theta0,
    config: OptimizerConfig | None = None,
    fg: Callable[[np.ndarray], tuple[float, np.ndarray]] | None = None,
) -> OptimizeResult:
    """Minimise ``f`` from ``theta0`` with BFGS updates and Wolfe line searches.

    ``fg`` may supply value and gradient together; otherwise ``f`` and ``g``
    are called separately.  Terminates when ``max |g_j| <= gradient_tolerance``.
    Hitting the iteration cap returns the best point with ``converged=False``;
    a line-search failure resets the direction to steepest descent once and
    raises :class:`LineSearchError` if it fails again.
    """
    cfg = config or OptimizerConfig()
    if fg is None:
        if g is None:
            raise ValueError("a gradient callback is required")

        def fg(x):
            return f(x), g(x)

    x = np.array(theta0, dtype=float)
    n = len(x)
    trace = OptimizerTrace()
    try:
        fx, gx = fg(x)
    except (ArithmeticError, ValueError, OverflowError) as exc:
        raise OptimizationError(f"objective not evaluable at theta0: {exc}") from None
    trace.n_function_evals += 1
    gx = np.asarray(gx, dtype=float)
    if not math.isfinite(fx) or not np.all(np.isfinite(gx)):
        raise OptimizationError("non-finite objective or gradient at theta0")

    def initial_inverse(gvec):
        gn = float(np.linalg.norm(gvec))
        if cfg.initial_scaling == "gradient_norm" and gn > 0:
            return np.eye(n) / gn
        return np.eye(n)

    H = initial_inverse(gx)
    trace.records.append(IterationRecord(0, x.tolist(), fx, float(np.max(np.abs(gx), initial=0.0)), 0.0, 0.0))
    reset_used = False
    k = 0
    while True:
        gmax = float(np.max(np.abs(gx), initial=0.0))
        if gmax <= cfg.gradient_tolerance:
            trace.termination = "gradient_tolerance"
            converged = True
            break
        if k >= cfg.max_iterations:
            trace.termination = "max_iterations"
            converged = False
            break
        p = -H @ gx
        d0 = float(gx @ p)
        if not d0 < 0:
            H = initial_inverse(gx)
            p = -H @ gx
            d0 = float(gx @ p)
        phi = _Line(fg, x, p, trace)
        a = wolfe_line_search(phi, fx, d0, 1.0, cfg.c1, cfg.c2, cfg.max_trials)
        if a is not None:
            a = _refine(phi, a, fx, d0, cfg.c1, cfg.c2)
        elif -d0 <= FLAT_FACTOR * EPS * max(1.0, abs(fx)):
            a = _flat_step(phi, fx, d0, cfg.c2, NOISE_FACTOR * EPS * max(1.0, abs(fx)))
        if a is None:
            if reset_used:
                trace.termination = "line_search_failure"
                raise LineSearchError(
                    f"line search failed at iteration {k} after steepest-descent reset "
                    f"(f={fx!r}, max|g|={gmax:.3e})"
                )
            reset_used = True
            trace.steepest_descent_resets += 1
            H = initial_inverse(gx)
            continue
        f_new, _, g_new = phi(a)
        s = a * p
        y = g_new - gx
        sy = float(s @ y)
        if sy > 1e-300 * max(1.0, float(np.linalg.norm(s) * np.linalg.norm(y))):
            if k == 0 and cfg.rescale_after_first_step:
                # the first direction is unaffected; later updates start well scaled
                H = np.eye(n) * (sy / float(y @ y))
            rho = 1.0 / sy
            V = np.eye(n) - rho * np.outer(s, y)
            H = V @ H @ V.T + rho * np.outer(s, s)
            H = 0.5 * (H + H.T)
        x = x + s
        fx, gx = f_new, g_new
        k += 1
        trace.records.append(
            IterationRecord(k, x.tolist(), fx, float(np.max(np.abs(gx))), a, float(np.linalg.norm(p)))
        )
    B = np.linalg.inv(H)
    return OptimizeResult(x, fx, gx, 0.5 * (B + B.T), H, converged, k, trace)


def wald_covariance(hessian, max_condition: float = 1e12) -> np.ndarray:
    """Inverse of a symmetric positive-definite Hessian.

    Raises :class:`CovarianceError` naming the weakest eigendirection when the
    matrix is not positive definite or its condition number exceeds
    ``max_condition``.
    """
    H = np.asarray(hessian, dtype=float)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise CovarianceError("Hessian must be square")
    if not np.allclose(H, H.T, rtol=1e-8, atol=1e-12 * max(1.0, np.abs(H).max())):
        raise CovarianceError("Hessian is not symmetric")
    H = 0.5 * (H + H.T)
    vals, vecs = np.linalg.eigh(H)
    lo, hi = vals[0], vals[-1]
    if lo <= 0 or hi / lo > max_condition:
        direction = np.round(vecs[:, 0], 6).tolist()
        what = "not positive definite" if lo <= 0 else f"ill-conditioned (condition {hi / lo:.3g})"
        raise CovarianceError(f"Hessian {what}; weakest eigendirection {direction}, eigenvalue {lo:.3g}")
    V = (vecs / vals) @ vecs.T
    return 0.5 * (V + V.T)
