"""Marginal likelihood of the Weibull proportional-hazards model with a normal
frailty on the log-hazard scale.

For spell ``j`` of subject ``i`` the hazard is ``(w+1) t^w exp(eta_ij + g_i)``
with ``g_i ~ N(0, sigma_u^2)``.  The frailty is integrated out per subject by
adaptive Gauss-Hermite quadrature: the rule is recentred at the subject's
empirical-Bayes mode and rescaled by the curvature there.

Parameters are optimised on an unconstrained internal scale
``[beta..., log(omega + 1), log(sigma_u)]``; the exponential family drops the
``log(omega + 1)`` entry and fixes ``omega = 0``.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy.special import logsumexp

from .cohort import Cohort, DesignMatrix

EPS = np.finfo(float).eps
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
MAX_ORDER = 51
THREADS_ENV = "FRAILRISK_THREADS"


class LikelihoodError(ArithmeticError):
    """Likelihood evaluation failed; ``subject_id`` names the offending subject."""

    def __init__(self, message: str, subject_id: str | None = None):
        self.subject_id = subject_id
        super().__init__(message if subject_id is None else f"subject {subject_id!r}: {message}")


class ModeError(RuntimeError):
    pass


class QuadratureOrderError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# hazard primitives
# ---------------------------------------------------------------------------


def _check_domain(t, omega):
    if np.any(np.asarray(t) <= 0):
        raise ValueError("time must be positive")
    if omega <= -1:
        raise ValueError("omega must exceed -1")


def hazard(t, omega: float, lin):
    """Weibull hazard ``(omega+1) t^omega exp(lin)``; constant in t when omega=0."""
    _check_domain(t, omega)
    return (omega + 1.0) * np.power(t, omega) * np.exp(lin)


def cum_hazard(t, omega: float, lin):
    """Cumulative hazard ``t^(omega+1) exp(lin)``."""
    _check_domain(t, omega)
    return np.power(t, omega + 1.0) * np.exp(lin)


# ---------------------------------------------------------------------------
# parameters and quadrature rules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParameterVector:
    """Model parameters on the reporting scale."""

    beta: tuple[float, ...]
    omega: float = 0.0
    sigma_u: float = 1.0
    family: str = "weibull"

    def __post_init__(self):
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        if not self.omega > -1:
            raise ValueError(f"omega must exceed -1, got {self.omega}")
        if not self.sigma_u > 0:
            raise ValueError(f"sigma_u must be positive, got {self.sigma_u}")
        if self.family == "exponential" and self.omega != 0:
            raise ValueError("the exponential family fixes omega = 0")
        if self.family not in ("weibull", "exponential"):
            raise ValueError(f"unknown family {self.family!r}")

    @property
    def beta_array(self) -> np.ndarray:
        return np.array(self.beta)

    @property
    def n_internal(self) -> int:
        return len(self.beta) + (2 if self.family == "weibull" else 1)

    def to_internal(self) -> np.ndarray:
        tail = [math.log1p(self.omega)] if self.family == "weibull" else []
        return np.array(list(self.beta) + tail + [math.log(self.sigma_u)])

    @classmethod
    def from_internal(cls, vec: Sequence[float], family: str = "weibull") -> "ParameterVector":
        vec = np.asarray(vec, dtype=float)
        if family == "weibull":
            return cls(tuple(vec[:-2]), math.expm1(vec[-2]), math.exp(vec[-1]), family)
        return cls(tuple(vec[:-1]), 0.0, math.exp(vec[-1]), family)


def internal_names(columns: Sequence[str], family: str) -> list[str]:
    return list(columns) + (["log(omega+1)"] if family == "weibull" else []) + ["log(sd)"]


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    order: int
    nodes: np.ndarray
    weights: np.ndarray
    adaptive: bool = True

    @classmethod
    def of_order(cls, order: int, adaptive: bool = True) -> "QuadratureRule":
        if order < 1:
            raise ValueError("quadrature order must be positive")
        x, w = hermgauss(order)
        x.setflags(write=False)
        w.setflags(write=False)
        return cls(order, x, w, adaptive)

    @property
    def log_weights(self) -> np.ndarray:
        """log(w_k) + x_k^2, the weights for integrands not carrying exp(-x^2)."""
        return np.log(self.weights) + self.nodes**2


def adaptive_log_integral(
    log_f: Callable[[np.ndarray], np.ndarray], mode: float, curvature: float, rule: QuadratureRule
) -> float:
    """``log \\int exp(log_f(g)) dg`` on the rule recentred at ``mode``.

    Nodes are ``mode + sqrt(2 / curvature) * x_k``; exact when ``log_f`` is a
    quadratic with that mode and curvature.
    """
    scale = math.sqrt(2.0 / curvature)
    g = mode + scale * rule.nodes
    return math.log(scale) + float(logsumexp(rule.log_weights + log_f(g)))


# ---------------------------------------------------------------------------
# packed data
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FrailtyData:
    """Spell arrays packed contiguously by subject.

    ``starts[i]`` is the first row of subject ``i``; times are analysis times
    (censoring already recoded if the cohort requested it).
    """

    times: np.ndarray
    events: np.ndarray
    X: np.ndarray
    starts: np.ndarray
    subject_ids: tuple[str, ...]

    def __post_init__(self):
        if np.any(self.times <= 0):
            raise ValueError("analysis times must be positive")
        if len(self.starts) == 0 or self.starts[0] != 0 or np.any(np.diff(self.starts) <= 0):
            raise ValueError("starts must begin at 0 and strictly increase")
        object.__setattr__(self, "log_times", np.log(self.times))

    @classmethod
    def from_cohort(cls, cohort: Cohort, design: DesignMatrix) -> "FrailtyData":
        return cls.from_arrays(
            cohort.analysis_times(),
            cohort.events(),
            design.matrix,
            design.subject_index,
            tuple(s.subject_id for s in cohort.subjects),
        )

    @classmethod
    def from_arrays(cls, times, events, X, subject_index, subject_ids=None) -> "FrailtyData":
        subject_index = np.asarray(subject_index)
        if np.any(np.diff(subject_index) < 0):
            raise ValueError("rows must be grouped by subject")
        starts = np.flatnonzero(np.r_[True, np.diff(subject_index) != 0])
        if subject_ids is None:
            subject_ids = tuple(str(v) for v in subject_index[starts])
        X = np.ascontiguousarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        return cls(
            np.asarray(times, dtype=float), np.asarray(events, dtype=float), X, starts, tuple(subject_ids)
        )

    @property
    def n_subjects(self) -> int:
        return len(self.starts)

    @property
    def n_spells(self) -> int:
        return len(self.times)

    @property
    def n_beta(self) -> int:
        return self.X.shape[1]

    def _stops(self) -> np.ndarray:
        return np.r_[self.starts[1:], self.n_spells]

    def subset(self, first: int, last: int) -> "FrailtyData":
        """Subjects ``first..last-1`` as a new packed block."""
        stops = self._stops()
        lo, hi = self.starts[first], stops[last - 1]
        return FrailtyData(
            self.times[lo:hi],
            self.events[lo:hi],
            self.X[lo:hi],
            self.starts[first:last] - lo,
            self.subject_ids[first:last],
        )

    def subject(self, i: int) -> "FrailtyData":
        return self.subset(i, i + 1)

    def chunks(self, k: int) -> list["FrailtyData"]:
        k = max(1, min(k, self.n_subjects))
        edges = np.linspace(0, self.n_subjects, k + 1).round().astype(int)
        return [self.subset(a, b) for a, b in zip(edges[:-1], edges[1:]) if b > a]


# ---------------------------------------------------------------------------
# per-subject sufficient quantities
# ---------------------------------------------------------------------------


@dataclass
class _Summaries:
    """Per-subject pieces of l_i(g) = C + d g - exp(g) A, plus their
    derivatives in the internal parameters (the log-sd column is zero)."""

    d: np.ndarray
    A: np.ndarray
    C: np.ndarray
    dA: np.ndarray | None = None
    dC: np.ndarray | None = None


def _linear_predictor(X: np.ndarray, beta: np.ndarray) -> np.ndarray:
    # column-wise accumulation keeps each row's value independent of chunking
    eta = X[:, 0] * beta[0]
    for j in range(1, X.shape[1]):
        eta = eta + X[:, j] * beta[j]
    return eta


def _summaries(data: FrailtyData, theta: ParameterVector, gradient: bool = False) -> _Summaries:
    beta = theta.beta_array
    if len(beta) != data.n_beta:
        raise ValueError(f"parameter vector has {len(beta)} coefficients, design has {data.n_beta}")
    shape = theta.omega + 1.0
    with np.errstate(over="ignore", invalid="ignore"):
        eta = _linear_predictor(data.X, beta)
        w = np.exp(shape * data.log_times + eta)
        ev = data.events
        d = np.add.reduceat(ev, data.starts)
        A = np.add.reduceat(w, data.starts)
        C = np.add.reduceat(ev * (math.log(shape) + theta.omega * data.log_times + eta), data.starts)
        bad = ~(np.isfinite(A) & np.isfinite(C))
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise LikelihoodError("non-finite linear predictor or cumulative hazard", data.subject_ids[i])
        if not gradient:
            return _Summaries(d, A, C)
        P = theta.n_internal
        n = data.n_spells
        spell_dA = np.zeros((n, P))
        spell_dC = np.zeros((n, P))
        p = data.n_beta
        spell_dA[:, :p] = w[:, None] * data.X
        spell_dC[:, :p] = ev[:, None] * data.X
        if theta.family == "weibull":
            spell_dA[:, p] = shape * data.log_times * w
            spell_dC[:, p] = ev * (1.0 + shape * data.log_times)
        dA = np.add.reduceat(spell_dA, data.starts, axis=0)
        dC = np.add.reduceat(spell_dC, data.starts, axis=0)
    return _Summaries(d, A, C, dA, dC)


def _solve_modes(d: np.ndarray, A: np.ndarray, var: float, max_iter: int = 100) -> np.ndarray:
    """Roots of ``d - exp(g) A - g / var`` by bracketed Newton, vectorised.

    The score is strictly decreasing and concave, so Newton started to the
    right of the root descends monotonically; the bracket
    ``[min(0, var(d-A)), max(0, var(d-A))]`` catches roundoff excursions.
    """
    lo = np.minimum(0.0, var * (d - A))
    hi = np.maximum(0.0, var * (d - A))
    start = np.zeros_like(d)
    pos = d > A
    with np.errstate(divide="ignore"):
        start[pos] = np.minimum(hi[pos], np.log(d[pos] / A[pos]))
    u = start
    active = np.ones(len(u), dtype=bool)
    for _ in range(max_iter):
        ua = u[active]
        e = np.exp(ua) * A[active]
        grad = e - d[active] + ua / var  # derivative of the negative log joint
        step = grad / (e + 1.0 / var)
        new = ua - step
        lo_a, hi_a = lo[active], hi[active]
        out = (new < lo_a) | (new > hi_a)
        if out.any():
            new[out] = np.clip(new[out], lo_a[out], hi_a[out])
        u[active] = new
        done = np.abs(step) <= 4.0 * EPS * np.maximum(1.0, np.abs(new))
        idx = np.flatnonzero(active)
        active[idx[done]] = False
        if not active.any():
            return u
    raise ModeError(
        f"empirical-Bayes mode did not converge for {int(active.sum())} subject(s) "
        f"after {max_iter} iterations"
    )


def _log_marginals(s: _Summaries, log_sigma: float, rule: QuadratureRule, gradient: bool = False):
    """Per-subject log marginal likelihoods and, optionally, their gradients."""
    var = math.exp(2.0 * log_sigma)
    u = _solve_modes(s.d, s.A, var)
    eu = np.exp(u)
    gam = eu * s.A + 1.0 / var
    x = rule.nodes
    with np.errstate(over="ignore", invalid="ignore"):
        if rule.adaptive:
            scale = np.sqrt(2.0 / gam)
            g = u[:, None] + scale[:, None] * x[None, :]
        else:
            scale = np.full_like(u, math.sqrt(2.0 * var))
            g = np.broadcast_to(scale[:, None] * x[None, :], (len(u), len(x)))
        E = np.exp(g)
        h = (
            s.C[:, None]
            + s.d[:, None] * g
            - E * s.A[:, None]
            - g * g / (2.0 * var)
            - log_sigma
            - HALF_LOG_2PI
        )
        terms = rule.log_weights[None, :] + h
        lse = logsumexp(terms, axis=1)
        logL = np.log(scale) + lse
    if not gradient:
        return logL, u, gam
    P = s.dA.shape[1]
    pi = np.exp(terms - lse[:, None])
    hp = s.d[:, None] - E * s.A[:, None] - g / var
    cross = eu[:, None] * s.dA
    cross[:, -1] += -2.0 * u / var
    dU = -cross / gam[:, None]
    if rule.adaptive:
        dGam = (eu * s.A)[:, None] * dU + eu[:, None] * s.dA
        dGam[:, -1] += -2.0 / var
        dlogs = -0.5 * dGam / gam[:, None]
        pi_hp = np.sum(pi * hp, axis=1)
        pi_hp_x = np.sum(pi * hp * x[None, :], axis=1)
    else:
        dU = np.zeros_like(dU)
        dlogs = np.zeros((len(u), P))
        dlogs[:, -1] = 1.0
        pi_hp = np.zeros(len(u))
        pi_hp_x = np.sum(pi * hp * x[None, :], axis=1)
    pi_E = np.sum(pi * E, axis=1)
    grad = (
        dlogs
        + s.dC
        - pi_E[:, None] * s.dA
        + pi_hp[:, None] * dU
        + (pi_hp_x * scale)[:, None] * dlogs
    )
    grad[:, -1] += np.sum(pi * g * g, axis=1) / var - 1.0
    return logL, u, gam, grad


# ---------------------------------------------------------------------------
# public evaluation API
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SubjectPosterior:
    """Empirical-Bayes frailty summary for one subject.

    ``du_dtheta`` is taken with respect to the internal parameter vector.
    """

    subject_id: str
    u_hat: float
    gamma_curv: float
    du_dtheta: np.ndarray


def conditional_loglik(subject: FrailtyData, theta: ParameterVector, gamma: float) -> float:
    """``sum_j [event_j log hazard(t_j) - cum_hazard(t_j)]`` at frailty ``gamma``."""
    s = _summaries(subject, theta)
    with np.errstate(over="ignore"):
        val = s.C + s.d * gamma - math.exp(gamma) * s.A if gamma < 700 else np.full_like(s.C, -np.inf)
    return float(math.fsum(val))


def _mode_sensitivity(s: _Summaries, u: np.ndarray, var: float) -> tuple[np.ndarray, np.ndarray]:
    eu = np.exp(u)
    gam = eu * s.A + 1.0 / var
    cross = eu[:, None] * s.dA
    cross[:, -1] += -2.0 * u / var
    return gam, -cross / gam[:, None]


def posteriors(data: FrailtyData, theta: ParameterVector) -> list[SubjectPosterior]:
    """Empirical-Bayes modes, curvatures and mode sensitivities for all subjects."""
    s = _summaries(data, theta, gradient=True)
    var = theta.sigma_u**2
    u = _solve_modes(s.d, s.A, var)
    gam, du = _mode_sensitivity(s, u, var)
    return [
        SubjectPosterior(data.subject_ids[i], float(u[i]), float(gam[i]), du[i].copy())
        for i in range(data.n_subjects)
    ]


def eb_mode(subject: FrailtyData, theta: ParameterVector) -> SubjectPosterior:
    """Mode of the frailty's joint density with the subject's data.

    Solves ``d - exp(u) A - u / sigma_u^2 = 0``; the curvature is
    ``exp(u) A + 1/sigma_u^2`` and the sensitivity comes from implicit
    differentiation of the score.
    """
    if subject.n_subjects != 1:
        raise ValueError("eb_mode expects a single subject")
    return posteriors(subject, theta)[0]


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


class MarginalLikelihood:
    """Marginal log-likelihood and its gradient on the internal scale.

    Subjects may be evaluated in ``n_threads`` chunks; per-subject values are
    reduced with :func:`math.fsum`, so the result does not depend on chunking.
    """

    def __init__(self, data: FrailtyData, family: str = "weibull", rule: QuadratureRule | None = None,
                 n_threads: int | None = None):
        self.data = data
        self.family = family
        self.rule = rule if rule is not None else QuadratureRule.of_order(5)
        self.n_threads = default_threads() if n_threads is None else max(1, n_threads)
        self._chunks = data.chunks(self.n_threads) if self.n_threads > 1 else [data]

    @property
    def n_params(self) -> int:
        return self.data.n_beta + (2 if self.family == "weibull" else 1)

    def with_rule(self, rule: QuadratureRule) -> "MarginalLikelihood":
        return MarginalLikelihood(self.data, self.family, rule, self.n_threads)

    def _theta(self, x) -> ParameterVector:
        x = np.asarray(x, dtype=float)
        if not np.all(np.isfinite(x)):
            raise LikelihoodError("non-finite parameter vector")
        try:
            return ParameterVector.from_internal(x, self.family)
        except (OverflowError, ValueError) as exc:
            raise LikelihoodError(f"parameter out of range: {exc}") from None

    def _eval_chunk(self, chunk: FrailtyData, theta: ParameterVector, gradient: bool):
        s = _summaries(chunk, theta, gradient)
        try:
            out = _log_marginals(s, math.log(theta.sigma_u), self.rule, gradient)
        except ModeError as exc:
            raise LikelihoodError(str(exc)) from None
        logL = out[0]
        bad = ~np.isfinite(logL)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise LikelihoodError("marginal likelihood underflow (log 0)", chunk.subject_ids[i])
        return (logL, out[3]) if gradient else (logL, None)

    def _per_subject(self, x, gradient: bool):
        theta = self._theta(x)
        if len(self._chunks) == 1:
            parts = [self._eval_chunk(self._chunks[0], theta, gradient)]
        else:
            with ThreadPoolExecutor(self.n_threads) as pool:
                parts = list(pool.map(lambda c: self._eval_chunk(c, theta, gradient), self._chunks))
        logL = np.concatenate([p[0] for p in parts])
        grad = np.concatenate([p[1] for p in parts]) if gradient else None
        return logL, grad

    def subject_logliks(self, x) -> np.ndarray:
        return self._per_subject(x, False)[0]

    def loglik(self, x) -> float:
        return math.fsum(self.subject_logliks(x))

    def loglik_and_gradient(self, x) -> tuple[float, np.ndarray]:
        logL, grad = self._per_subject(x, True)
        g = np.array([math.fsum(grad[:, j]) for j in range(grad.shape[1])])
        if not np.all(np.isfinite(g)):
            raise LikelihoodError("non-finite gradient")
        return math.fsum(logL), g

    def gradient(self, x) -> np.ndarray:
        """Analytic gradient of the quadrature approximation."""
        return self.loglik_and_gradient(x)[1]

    def fd_gradient(self, x) -> np.ndarray:
        return central_difference(self.loglik, x)


def central_difference(f: Callable[[np.ndarray], float], x, rel_step: float | None = None) -> np.ndarray:
    """Central differences with steps ``cbrt(eps) * max(1, |x_j|)``."""
    x = np.asarray(x, dtype=float)
    step = EPS ** (1.0 / 3.0) if rel_step is None else rel_step
    g = np.empty_like(x)
    for j in range(len(x)):
        h = step * max(1.0, abs(x[j]))
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        h = xp[j] - xm[j]  # exactly representable step
        g[j] = (f(xp) - f(xm)) / h
    return g


def marginal_loglik(
    data: FrailtyData, theta: ParameterVector, rule: QuadratureRule, n_threads: int | None = None
) -> float:
    return MarginalLikelihood(data, theta.family, rule, n_threads).loglik(theta.to_internal())


def subject_marginal_logliks(data: FrailtyData, theta: ParameterVector, rule: QuadratureRule) -> np.ndarray:
    return MarginalLikelihood(data, theta.family, rule, 1).subject_logliks(theta.to_internal())


def loglik_gradient(data: FrailtyData, theta: ParameterVector, rule: QuadratureRule) -> np.ndarray:
    """Finite-difference gradient of the marginal log-likelihood (internal scale)."""
    return MarginalLikelihood(data, theta.family, rule).fd_gradient(theta.to_internal())


def select_quadrature_order(
    data: FrailtyData,
    theta0: ParameterVector,
    rtol: float = 1e-4,
    max_order: int = MAX_ORDER,
    n_threads: int | None = None,
) -> QuadratureRule:
    """Smallest odd order whose log-likelihood at ``theta0`` is within ``rtol``
    (relative) of the previous odd order's."""
    lik = MarginalLikelihood(data, theta0.family, QuadratureRule.of_order(1), n_threads)
    x0 = theta0.to_internal()
    prev = lik.loglik(x0)
    history = [(1, prev)]
    for q in range(3, max_order + 1, 2):
        rule = QuadratureRule.of_order(q)
        cur = lik.with_rule(rule).loglik(x0)
        history.append((q, cur))
        if abs(cur - prev) < rtol * abs(cur):
            return rule
        prev = cur
    raise QuadratureOrderError(
        f"log-likelihood did not stabilise by order {max_order} "
        f"(last values {history[-2:]}); consider rescaling times or covariates"
    )
