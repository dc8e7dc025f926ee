"""Model fitting and the statistics reported for a fitted frailty model.

Fits run on the internal scale ``[beta..., log(omega+1), log(sd)]``.  Reports
use the natural scale, with delta-method standard errors for ``omega`` and
``sd``.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .cohort import INTERCEPT, Cohort, CovariateSchema, DesignError, ModelSpec, Term, build_design
from .likelihood import (
    FrailtyData,
    LikelihoodError,
    MarginalLikelihood,
    ParameterVector,
    QuadratureOrderError,
    QuadratureRule,
    central_difference,
    internal_names,
    select_quadrature_order,
)
from .optimizer import (
    CovarianceError,
    LineSearchError,
    OptimizationError,
    OptimizerConfig,
    OptimizerTrace,
    minimize,
    wald_covariance,
)

log = logging.getLogger(__name__)

Z95 = 1.959963984540054
SD_NAME = "sd"
OMEGA_NAME = "omega"


class NotConvergedError(RuntimeError):
    pass


class NullModelError(ValueError):
    pass


@dataclass(frozen=True)
class FitConfig:
    """Options for :func:`fit_model`.

    ``quadrature`` is an odd-or-even positive order or ``"auto"``.  ``r2_n``
    picks the sample size used by the generalized R^2 (``"spells"`` or
    ``"subjects"``).
    """

    quadrature: int | str = "auto"
    gradient: str = "analytic"
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    fit_null: bool = True
    r2_n: str = "spells"
    recheck_quadrature: bool = True
    n_threads: int | None = None

    def __post_init__(self):
        if self.quadrature != "auto" and not (isinstance(self.quadrature, int) and self.quadrature >= 1):
            raise ValueError(f"quadrature must be a positive integer or 'auto', got {self.quadrature!r}")
        if self.gradient not in ("analytic", "finite_difference"):
            raise ValueError(f"unknown gradient mode {self.gradient!r}")
        if self.r2_n not in ("spells", "subjects"):
            raise ValueError(f"r2_n must be 'spells' or 'subjects', got {self.r2_n!r}")


@dataclass
class FitResult:
    """A fitted model.

    ``hessian`` is the Hessian of the negative log-likelihood on the internal
    scale and ``covariance`` its inverse.
    """

    spec: ModelSpec
    schema: CovariateSchema
    columns: tuple[str, ...]
    theta_hat: ParameterVector
    loglik: float
    null_loglik: float | None
    hessian: np.ndarray
    covariance: np.ndarray
    n: int
    n_spells: int
    n_subjects: int
    quadrature_order: int
    converged: bool
    iterations: int
    max_abs_gradient: float
    termination: str
    censor_at_window: bool = False
    term_spans: Mapping[str, tuple[int, int]] = field(default_factory=dict)
    trace: OptimizerTrace | None = field(default=None, repr=False, compare=False)

    @property
    def family(self) -> str:
        return self.theta_hat.family

    @property
    def internal(self) -> np.ndarray:
        return self.theta_hat.to_internal()

    @property
    def internal_names(self) -> list[str]:
        return internal_names(self.columns, self.family)

    @property
    def n_params(self) -> int:
        return self.theta_hat.n_internal

    @property
    def rule(self) -> QuadratureRule:
        return QuadratureRule.of_order(self.quadrature_order)

    @property
    def reporting_names(self) -> list[str]:
        return list(self.columns) + [SD_NAME] + ([OMEGA_NAME] if self.family == "weibull" else [])

    def reporting_estimates(self) -> np.ndarray:
        th = self.theta_hat
        tail = [th.sigma_u] + ([th.omega] if self.family == "weibull" else [])
        return np.array(list(th.beta) + tail)

    def reporting_jacobian(self) -> np.ndarray:
        """d(reporting)/d(internal), rows in :attr:`reporting_names` order."""
        p, k = self.n_params, len(self.columns)
        J = np.zeros((p, p))
        J[:k, :k] = np.eye(k)
        J[k, p - 1] = self.theta_hat.sigma_u
        if self.family == "weibull":
            J[k + 1, k] = self.theta_hat.omega + 1.0
        return J

    def reporting_covariance(self) -> np.ndarray:
        J = self.reporting_jacobian()
        V = J @ self.covariance @ J.T
        return 0.5 * (V + V.T)

    def to_dict(self) -> dict:
        th = self.theta_hat
        return {
            "spec": self.spec.to_dict(),
            "schema": self.schema.to_dict(),
            "columns": list(self.columns),
            "theta_hat": {"beta": list(th.beta), "omega": th.omega, "sigma_u": th.sigma_u, "family": th.family},
            "internal": self.internal.tolist(),
            "loglik": self.loglik,
            "null_loglik": self.null_loglik,
            "hessian": self.hessian.tolist(),
            "covariance": self.covariance.tolist(),
            "n": self.n,
            "n_spells": self.n_spells,
            "n_subjects": self.n_subjects,
            "quadrature_order": self.quadrature_order,
            "converged": self.converged,
            "iterations": self.iterations,
            "max_abs_gradient": self.max_abs_gradient,
            "termination": self.termination,
            "censor_at_window": self.censor_at_window,
            "term_spans": {k: list(v) for k, v in self.term_spans.items()},
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "FitResult":
        family = doc["theta_hat"]["family"]
        # the internal vector round-trips exactly; the natural-scale copy is informational
        theta = ParameterVector.from_internal(doc["internal"], family)
        return cls(
            spec=ModelSpec.from_dict(doc["spec"]),
            schema=CovariateSchema.from_dict(doc["schema"]),
            columns=tuple(doc["columns"]),
            theta_hat=theta,
            loglik=float(doc["loglik"]),
            null_loglik=None if doc["null_loglik"] is None else float(doc["null_loglik"]),
            hessian=np.array(doc["hessian"], dtype=float),
            covariance=np.array(doc["covariance"], dtype=float),
            n=int(doc["n"]),
            n_spells=int(doc["n_spells"]),
            n_subjects=int(doc["n_subjects"]),
            quadrature_order=int(doc["quadrature_order"]),
            converged=bool(doc["converged"]),
            iterations=int(doc["iterations"]),
            max_abs_gradient=float(doc["max_abs_gradient"]),
            termination=str(doc["termination"]),
            censor_at_window=bool(doc.get("censor_at_window", False)),
            term_spans={k: (int(v[0]), int(v[1])) for k, v in doc.get("term_spans", {}).items()},
        )

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "FitResult":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------


def initial_theta(columns: Sequence[str], family: str) -> ParameterVector:
    """Default start: slopes 0, intercept 1, omega 0, frailty variance 1."""
    beta = [1.0 if c == INTERCEPT else 0.0 for c in columns]
    return ParameterVector(tuple(beta), 0.0, 1.0, family)


def observed_hessian(lik: MarginalLikelihood, x: np.ndarray, gradient: str = "analytic") -> np.ndarray:
    """Hessian of ``-loglik`` by central differences of the gradient, symmetrised."""
    x = np.asarray(x, dtype=float)
    if gradient == "analytic":
        grad = lik.gradient
        step = np.finfo(float).eps ** (1.0 / 3.0)
    else:
        grad = lik.fd_gradient
        step = np.finfo(float).eps ** (1.0 / 4.0)
    p = len(x)
    H = np.empty((p, p))
    for j in range(p):
        h = step * max(1.0, abs(x[j]))
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        H[:, j] = -(grad(xp) - grad(xm)) / (xp[j] - xm[j])
    return 0.5 * (H + H.T)


def _objective(lik: MarginalLikelihood, gradient: str):
    if gradient == "analytic":

        def fg(x):
            val, g = lik.loglik_and_gradient(x)
            return -val, -g

    else:

        def fg(x):
            return -lik.loglik(x), -central_difference(lik.loglik, x)

    return fg


def _optimize(lik, x0, config: FitConfig):
    fg = _objective(lik, config.gradient)
    return minimize(None, None, x0, config.optimizer, fg=fg)


def fit_model(
    cohort: Cohort,
    spec: ModelSpec,
    config: FitConfig | None = None,
    theta0: ParameterVector | None = None,
) -> FitResult:
    """Maximum marginal likelihood fit of ``spec`` to ``cohort``.

    With ``quadrature="auto"`` the order is chosen at the starting values and,
    if ``recheck_quadrature`` is set, checked again at the estimate; a larger
    order there triggers a warm-started refit.  Non-convergence is reported
    through ``converged`` rather than raised.
    """
    cfg = config or FitConfig()
    design = build_design(cohort, spec)
    data = FrailtyData.from_cohort(cohort, design)
    theta0 = theta0 if theta0 is not None else initial_theta(design.columns, spec.family)
    if len(theta0.beta) != len(design.columns) or theta0.family != spec.family:
        raise DesignError("starting values do not match the design")

    if cfg.quadrature == "auto":
        rule = select_quadrature_order(data, theta0, n_threads=cfg.n_threads)
    else:
        rule = QuadratureRule.of_order(cfg.quadrature)
    lik = MarginalLikelihood(data, spec.family, rule, cfg.n_threads)
    res = _optimize(lik, theta0.to_internal(), cfg)

    if cfg.quadrature == "auto" and cfg.recheck_quadrature:
        at_hat = ParameterVector.from_internal(res.theta, spec.family)
        try:
            better = select_quadrature_order(data, at_hat, n_threads=cfg.n_threads)
        except QuadratureOrderError:
            better = rule
        if better.order > rule.order:
            log.info("quadrature order raised from %d to %d at the estimate", rule.order, better.order)
            rule = better
            lik = lik.with_rule(rule)
            res = _optimize(lik, res.theta, cfg)

    x = res.theta
    loglik = -res.f
    hessian = observed_hessian(lik, x, cfg.gradient)
    try:
        covariance = wald_covariance(hessian)
    except CovarianceError as exc:
        log.warning("covariance unavailable: %s", exc)
        covariance = np.full_like(hessian, np.nan)

    null_loglik = None
    if not spec.terms:
        null_loglik = loglik
    elif cfg.fit_null:
        null = fit_model(cohort, spec.with_terms(()), replace(cfg, fit_null=False, quadrature=rule.order))
        null_loglik = null.loglik

    n = cohort.n_spells if cfg.r2_n == "spells" else len(cohort)
    return FitResult(
        spec=spec,
        schema=cohort.schema,
        columns=design.columns,
        theta_hat=ParameterVector.from_internal(x, spec.family),
        loglik=loglik,
        null_loglik=null_loglik,
        hessian=hessian,
        covariance=covariance,
        n=n,
        n_spells=cohort.n_spells,
        n_subjects=len(cohort),
        quadrature_order=rule.order,
        converged=res.converged,
        iterations=res.iterations,
        max_abs_gradient=res.max_abs_gradient,
        termination=res.trace.termination,
        censor_at_window=cohort.censor_at_window,
        term_spans=dict(design.term_spans),
        trace=res.trace,
    )


# ---------------------------------------------------------------------------
# coefficient table
# ---------------------------------------------------------------------------


def two_sided_p(z: float) -> float:
    return float(min(1.0, 2.0 * stats.norm.sf(abs(z))))


@dataclass(frozen=True)
class CoefficientRow:
    name: str
    estimate: float
    std_error: float
    z: float
    p_value: float
    ci_lower: float
    ci_upper: float

    @classmethod
    def from_estimate(cls, name: str, estimate: float, std_error: float) -> "CoefficientRow":
        z = estimate / std_error if std_error > 0 else math.copysign(math.inf, estimate) if estimate else 0.0
        half = Z95 * std_error
        return cls(name, estimate, std_error, z, two_sided_p(z), estimate - half, estimate + half)


def format_p(p: float) -> str:
    return "<.0001" if p < 1e-4 else f"{p:.4f}"


@dataclass(frozen=True)
class CoefficientReport:
    rows: tuple[CoefficientRow, ...]

    def __getitem__(self, name: str) -> CoefficientRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    @property
    def names(self) -> list[str]:
        return [r.name for r in self.rows]

    def to_dict(self) -> dict:
        return {"rows": [vars(r).copy() for r in self.rows]}

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    def to_text(self) -> str:
        width = max([len("Parameter")] + [len(r.name) for r in self.rows]) + 2
        head = f"{'Parameter':<{width}}{'Estimate':>10}{'St. Error':>11}{'P-Value':>9}   95% Confidence Interval"
        lines = ["Parameter Estimates", head, "-" * len(head)]
        for r in self.rows:
            lines.append(
                f"{r.name:<{width}}{r.estimate:>10.4f}{r.std_error:>11.4f}{format_p(r.p_value):>9}"
                f"   {r.ci_lower:>10.4f} {r.ci_upper:>10.4f}"
            )
        return "\n".join(lines) + "\n"


def coefficient_report(fit: FitResult) -> CoefficientReport:
    """Wald table on the reporting scale: betas, then ``sd``, then ``omega``."""
    if not fit.converged:
        raise NotConvergedError(
            f"fit did not converge ({fit.termination}, max|g|={fit.max_abs_gradient:.3g}); no report produced"
        )
    V = fit.reporting_covariance()
    if not np.all(np.isfinite(V)):
        raise NotConvergedError("covariance unavailable (singular or indefinite Hessian)")
    est = fit.reporting_estimates()
    se = np.sqrt(np.diag(V))
    rows = tuple(CoefficientRow.from_estimate(n, float(e), float(s)) for n, e, s in zip(fit.reporting_names, est, se))
    return CoefficientReport(rows)


@dataclass(frozen=True)
class HazardRatio:
    ratio: float
    std_error: float | None = None


def hazard_ratio(coef: float, variance: float | None = None) -> HazardRatio:
    """``exp(coef)``; with a coefficient variance, the delta-method SE ``exp(coef) * se``."""
    if not math.isfinite(coef):
        raise ValueError("coefficient must be finite")
    r = math.exp(coef)
    if variance is None:
        return HazardRatio(r)
    if variance < 0:
        raise ValueError("variance must be non-negative")
    return HazardRatio(r, r * math.sqrt(variance))


# ---------------------------------------------------------------------------
# model-level statistics
# ---------------------------------------------------------------------------


def r2_from_logliks(loglik: float, null_loglik: float, n: int) -> float:
    """``1 - (L0/L)^(2/n)``, evaluated in log space."""
    if n <= 0:
        raise ValueError("n must be positive")
    if loglik < null_loglik:
        raise ValueError(f"loglik {loglik} is below the null log-likelihood {null_loglik}")
    return -math.expm1(2.0 * (null_loglik - loglik) / n)


def generalized_r2(fit: FitResult) -> float:
    if fit.null_loglik is None:
        raise NullModelError("null log-likelihood missing; fit the intercept-only model first (fit_null=True)")
    return r2_from_logliks(fit.loglik, fit.null_loglik, fit.n)


@dataclass(frozen=True)
class JointTest:
    statistic: float
    p_value: float
    df_num: int
    df_den: int


def constraint_matrix(fit: FitResult, names: Sequence[str]) -> np.ndarray:
    """Rows selecting the named reporting-scale parameters."""
    all_names = fit.reporting_names
    C = np.zeros((len(names), len(all_names)))
    for i, nm in enumerate(names):
        if nm not in all_names:
            raise KeyError(f"unknown parameter {nm!r}")
        C[i, all_names.index(nm)] = 1.0
    return C


def joint_wald(estimate: np.ndarray, covariance: np.ndarray, C, df_den: int) -> JointTest:
    """``F = (C b)' (C V C')^-1 (C b) / q`` against ``F(q, df_den)``."""
    C = np.atleast_2d(np.asarray(C, dtype=float))
    b = np.asarray(estimate, dtype=float)
    if C.shape[1] != len(b):
        raise ValueError(f"constraint matrix has {C.shape[1]} columns, expected {len(b)}")
    q = C.shape[0]
    if np.linalg.matrix_rank(C) < q:
        raise ValueError("constraint matrix is rank deficient")
    cb = C @ b
    M = C @ covariance @ C.T
    F = float(cb @ np.linalg.solve(M, cb)) / q
    p = float(stats.f.sf(F, q, df_den)) if df_den > 0 else float(stats.chi2.sf(q * F, q))
    return JointTest(F, p, q, df_den)


def wald_joint_test(fit: FitResult, constraint_rows) -> JointTest:
    """Delta-method joint test on the reporting scale; denominator df = spells - parameters."""
    return joint_wald(fit.reporting_estimates(), fit.reporting_covariance(), constraint_rows, fit.n_spells - fit.n_params)


def bic_value(loglik: float, n_params: int, n: int) -> float:
    return -2.0 * loglik + n_params * math.log(n)


def bic(fit: FitResult) -> float:
    return bic_value(fit.loglik, fit.n_params, fit.n_spells)


# ---------------------------------------------------------------------------
# stepwise selection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SelectionEvent:
    step: int
    action: str  # "candidate", "enter", "remove", "skip", "stop"
    term: str | None
    p_value: float | None = None
    model: tuple[str, ...] = ()
    detail: str = ""


@dataclass
class SelectionTrace:
    events: list[SelectionEvent] = field(default_factory=list)
    termination: str = ""
    enter: float = 0.10
    remove: float = 0.15

    def to_dict(self) -> dict:
        return {
            "enter": self.enter,
            "remove": self.remove,
            "termination": self.termination,
            "events": [
                {**vars(e), "model": list(e.model)} for e in self.events
            ],
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    def replay(self) -> tuple[str, ...]:
        """Model reached by applying the recorded enter/remove decisions in order."""
        model: list[str] = []
        for e in self.events:
            if e.action == "enter":
                model.append(e.term)
            elif e.action == "remove":
                model.remove(e.term)
        return tuple(model)


def term_p_value(fit: FitResult, term: str, criterion: str = "wald", reduced_loglik: float | None = None) -> float:
    """p-value for dropping ``term``: Wald chi-square over its columns, or LR."""
    start, stop = _term_span(fit, term)
    q = stop - start
    if criterion == "lr":
        if reduced_loglik is None:
            raise ValueError("LR criterion needs the reduced-model log-likelihood")
        return float(stats.chi2.sf(max(0.0, 2.0 * (fit.loglik - reduced_loglik)), q))
    b = fit.internal[start:stop]
    V = fit.covariance[start:stop, start:stop]
    if not np.all(np.isfinite(V)):
        raise CovarianceError(f"no covariance for term {term!r}")
    chi2 = float(b @ np.linalg.solve(V, b))
    return float(stats.chi2.sf(chi2, q))


def _term_span(fit: FitResult, term: str) -> tuple[int, int]:
    if term not in fit.term_spans:
        raise KeyError(f"term {term!r} not in model")
    return fit.term_spans[term]


def _warm_start(prev: FitResult | None, spec: ModelSpec, cohort: Cohort) -> ParameterVector | None:
    if prev is None:
        return None
    columns = build_design(cohort, spec).columns
    old = dict(zip(prev.columns, prev.theta_hat.beta))
    beta = tuple(old.get(c, 0.0) for c in columns)
    th = prev.theta_hat
    return ParameterVector(beta, th.omega, th.sigma_u, th.family)


def stepwise_select(
    cohort: Cohort,
    candidate_terms: Sequence[str | Term],
    enter: float = 0.10,
    remove: float = 0.15,
    base_spec: ModelSpec | None = None,
    config: FitConfig | None = None,
    criterion: str = "wald",
) -> tuple[ModelSpec, SelectionTrace, FitResult]:
    """Forward entry / backward removal by term p-values.

    Each forward step fits every excluded candidate added to the current model
    and enters the smallest p if it is at most ``enter``.  The backward check
    then drops the largest p among the other included terms if it is at least
    ``remove``.  Equal p-values are broken by term name.  Candidate fits that
    fail are skipped and logged.  Returns the final spec, the audit trace and
    the final fit.
    """
    if not 0 < enter < remove <= 1:
        raise ValueError(f"need 0 < enter < remove <= 1, got enter={enter}, remove={remove}")
    if criterion not in ("wald", "lr"):
        raise ValueError(f"unknown criterion {criterion!r}")
    base = base_spec or ModelSpec()
    cands = sorted({(t if isinstance(t, Term) else Term.parse(t)).name: (t if isinstance(t, Term) else Term.parse(t))
                    for t in candidate_terms}.items())
    pool = {name: term for name, term in cands if name not in base.term_names}
    cfg = replace(config or FitConfig(), fit_null=False)
    trace = SelectionTrace(enter=enter, remove=remove)

    current = list(base.terms)
    fit = fit_model(cohort, base.with_terms(current), cfg)
    seen = {frozenset(t.name for t in current)}
    step = 0
    while True:
        step += 1
        names_now = tuple(t.name for t in current)
        changed = False
        best: tuple[float, str, FitResult] | None = None
        for name in sorted(set(pool) - set(names_now)):
            spec = base.with_terms(current + [pool[name]])
            try:
                cfit = fit_model(cohort, spec, cfg, _warm_start(fit, spec, cohort))
                if not cfit.converged:
                    raise NotConvergedError(cfit.termination)
                p = term_p_value(cfit, name, criterion, fit.loglik)
            except (NotConvergedError, LikelihoodError, LineSearchError, OptimizationError,
                    CovarianceError, DesignError, np.linalg.LinAlgError) as exc:
                trace.events.append(SelectionEvent(step, "skip", name, None, names_now, f"{type(exc).__name__}: {exc}"))
                continue
            trace.events.append(SelectionEvent(step, "candidate", name, p, names_now + (name,)))
            if best is None or (p, name) < (best[0], best[1]):
                best = (p, name, cfit)
        entered = None
        if best is not None and best[0] <= enter:
            entered = best[1]
            current.append(pool[entered])
            fit = best[2]
            changed = True
            trace.events.append(SelectionEvent(step, "enter", entered, best[0], tuple(t.name for t in current)))

        worst: tuple[float, str] | None = None
        for term in current:
            if term.name == entered or term.name in base.term_names:
                continue
            reduced = None
            if criterion == "lr":
                reduced = fit_model(cohort, base.with_terms([t for t in current if t is not term]), cfg).loglik
            try:
                p = term_p_value(fit, term.name, criterion, reduced)
            except (CovarianceError, np.linalg.LinAlgError):
                continue
            if worst is None or (p, term.name) > worst:
                worst = (p, term.name)
        if worst is not None and worst[0] >= remove:
            current = [t for t in current if t.name != worst[1]]
            spec = base.with_terms(current)
            fit = fit_model(cohort, spec, cfg, _warm_start(fit, spec, cohort))
            changed = True
            trace.events.append(SelectionEvent(step, "remove", worst[1], worst[0], tuple(t.name for t in current)))

        if not changed:
            trace.termination = "no_change"
            break
        state = frozenset(t.name for t in current)
        if state in seen:
            trace.termination = "cycle"
            break
        seen.add(state)
    trace.events.append(SelectionEvent(step, "stop", None, None, tuple(t.name for t in current), trace.termination))
    final = base.with_terms(current)
    return final, trace, fit
