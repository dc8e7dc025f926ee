"""Empirical-Bayes risk predictions for individual subjects.

A subject's frailty is set to its posterior mode under the fitted parameters,
and hazard, density and survivor curves follow from the Weibull form with that
frailty added to the linear predictor.  Subjects without history use the prior
mean 0 and are flagged.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .cohort import WINDOW, CohortError, DesignError, Subject, _check_covariates, design_columns
from .inference import FitResult
from .likelihood import FrailtyData, SubjectPosterior, cum_hazard, hazard, posteriors

SUMMARY_COLUMNS = ("Min", "Max", "Med", "Mean", "Std Dev", "1st Pctl", "5th Pctl", "90th Pctl", "95th Pctl", "99th Pctl")
_PCTL = {"1st Pctl": 1, "5th Pctl": 5, "90th Pctl": 90, "95th Pctl": 95, "99th Pctl": 99}


@dataclass(frozen=True)
class RiskPrediction:
    subject_id: str
    u_hat: float
    lin: float
    omega: float
    times: np.ndarray
    hazard: np.ndarray
    pdf: np.ndarray
    survivor: np.ndarray
    new_subject: bool = False

    @property
    def relative_risk(self) -> float:
        return math.exp(self.lin + self.u_hat)

    def hazard_at(self, t: float) -> float:
        return float(hazard(t, self.omega, self.lin + self.u_hat))

    def to_dict(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "u_hat": self.u_hat,
            "lin": self.lin,
            "omega": self.omega,
            "relative_risk": self.relative_risk,
            "new_subject": self.new_subject,
            "times": self.times.tolist(),
            "hazard": self.hazard.tolist(),
            "pdf": self.pdf.tolist(),
            "survivor": self.survivor.tolist(),
        }


def _check_times(times, window: float) -> np.ndarray:
    t = np.atleast_1d(np.asarray(times, dtype=float))
    if t.size == 0:
        raise ValueError("no evaluation times given")
    if np.any(~np.isfinite(t)) or np.any(t <= 0):
        raise ValueError("evaluation times must be positive and finite")
    if np.any(t > window + 1):
        raise ValueError(f"evaluation times must not exceed {window + 1:g}")
    return t


def curves(omega: float, lin: float, times) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Hazard, density and survivor at ``times`` for linear predictor ``lin``."""
    t = np.asarray(times, dtype=float)
    lam = hazard(t, omega, lin)
    S = np.exp(-cum_hazard(t, omega, lin))
    return lam, lam * S, S


def _profile_row(fit: FitResult, covariates: Mapping, seq: int) -> np.ndarray:
    try:
        _check_covariates(covariates, fit.schema)
    except CohortError as exc:
        raise DesignError(f"covariates do not match the fitted schema: {exc}") from None
    values = {"seq": np.array([float(seq)])}
    for cov in fit.schema.covariates:
        v = covariates[cov.name]
        values[cov.name] = np.array([str(v)], dtype=object) if cov.is_categorical else np.array([float(v)])
    X, cols, _ = design_columns(values, fit.schema, fit.spec)
    if cols != fit.columns:
        raise DesignError(f"design columns {cols} differ from the fit's {fit.columns}")
    return X[0]


def _subject_data(fit: FitResult, spells) -> FrailtyData:
    values = {"seq": np.array([float(s.seq) for s in spells])}
    for cov in fit.schema.covariates:
        col = [s.covariates[cov.name] for s in spells]
        values[cov.name] = np.array([str(v) for v in col], dtype=object) if cov.is_categorical else np.array(col, dtype=float)
    X, _, _ = design_columns(values, fit.schema, fit.spec)
    times = np.array([s.time for s in spells], dtype=float)
    events = np.array([s.event for s in spells], dtype=float)
    if fit.censor_at_window:
        times = np.where(events == 0, np.minimum(times, WINDOW), times)
    return FrailtyData.from_arrays(times, events, X, np.zeros(len(spells), dtype=int), [spells[0].subject_id])


def subject_posterior(fit: FitResult, subject: Subject) -> SubjectPosterior:
    spells = sorted(subject.spells, key=lambda s: s.seq)
    for sp in spells:
        try:
            _check_covariates(sp.covariates, fit.schema)
        except CohortError as exc:
            raise DesignError(f"subject {subject.subject_id!r}: {exc}") from None
    return posteriors(_subject_data(fit, spells), fit.theta_hat)[0]


def predict_subject(fit: FitResult, subject: Subject, times: Sequence[float] = (30.0,), window: float = 30.0) -> RiskPrediction:
    """Risk curves for a subject with history, using its last spell's covariates."""
    t = _check_times(times, window)
    spells = sorted(subject.spells, key=lambda s: s.seq)
    if not spells:
        raise ValueError("subject has no spells; use predict_new")
    post = subject_posterior(fit, subject)
    last = spells[-1]
    lin = float(_profile_row(fit, last.covariates, last.seq) @ fit.theta_hat.beta_array)
    lam, f, S = curves(fit.theta_hat.omega, lin + post.u_hat, t)
    return RiskPrediction(subject.subject_id, post.u_hat, lin, fit.theta_hat.omega, t, lam, f, S, False)


def predict_new(fit: FitResult, covariates: Mapping, times: Sequence[float] = (30.0,), seq: int = 1,
                subject_id: str = "new", window: float = 30.0) -> RiskPrediction:
    """Risk curves for a subject without history: frailty at its prior mean 0."""
    t = _check_times(times, window)
    lin = float(_profile_row(fit, covariates, seq) @ fit.theta_hat.beta_array)
    lam, f, S = curves(fit.theta_hat.omega, lin, t)
    return RiskPrediction(subject_id, 0.0, lin, fit.theta_hat.omega, t, lam, f, S, True)


def predict_cohort(fit: FitResult, subjects, times: Sequence[float] = (30.0,), window: float = 30.0) -> list[RiskPrediction]:
    return [predict_subject(fit, s, times, window) for s in subjects]


# ---------------------------------------------------------------------------
# prediction variance
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PredictionVariance:
    """Joint covariance of (theta-hat, u-hat) on the internal scale; frailty last."""

    matrix: np.ndarray
    names: tuple[str, ...]

    @property
    def theta_block(self) -> np.ndarray:
        return self.matrix[:-1, :-1]

    @property
    def cross(self) -> np.ndarray:
        return self.matrix[:-1, -1]

    @property
    def frailty_variance(self) -> float:
        return float(self.matrix[-1, -1])


def variance_blocks(covariance, gamma_curv: float, du_dtheta) -> np.ndarray:
    """``[[V, V d'], [d V, 1/Gamma + d V d']]`` with ``d = du/dtheta``."""
    V = np.asarray(covariance, dtype=float)
    d = np.asarray(du_dtheta, dtype=float).ravel()
    if V.shape != (len(d), len(d)):
        raise ValueError(f"du/dtheta has length {len(d)} but the covariance is {V.shape}")
    if not gamma_curv > 0:
        raise ValueError("posterior curvature must be positive")
    Vd = V @ d
    p = len(d)
    M = np.empty((p + 1, p + 1))
    M[:p, :p] = V
    M[:p, p] = Vd
    M[p, :p] = Vd
    M[p, p] = 1.0 / gamma_curv + float(d @ Vd)
    if not np.allclose(M, M.T, rtol=0, atol=1e-10 * max(1.0, np.abs(M).max())):
        raise ValueError("prediction variance is not symmetric")
    return M


def prediction_variance(fit: FitResult, posterior: SubjectPosterior) -> PredictionVariance:
    M = variance_blocks(fit.covariance, posterior.gamma_curv, posterior.du_dtheta)
    return PredictionVariance(M, tuple(fit.internal_names) + (f"u[{posterior.subject_id}]",))


# ---------------------------------------------------------------------------
# cohort summaries
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RiskSummary:
    eval_time: float
    n: int
    stats: Mapping[str, float]

    def to_dict(self) -> dict:
        return {"eval_time": self.eval_time, "n": self.n, "statistics": dict(self.stats)}

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    def to_text(self) -> str:
        head = "".join(f"{c:>11}" for c in SUMMARY_COLUMNS)
        row = "".join(f"{self.stats[c]:>11.4f}" for c in SUMMARY_COLUMNS)
        title = f"Summarized Statistics for Predicted Risk of Readmission (hazard at t={self.eval_time:g}, n={self.n})"
        return "\n".join([title, head, row]) + "\n"


def summarize_values(values, eval_time: float = 30.0) -> RiskSummary:
    x = np.asarray(values, dtype=float)
    if x.size == 0:
        raise ValueError("no predictions to summarise")
    out = {
        "Min": float(x.min()),
        "Max": float(x.max()),
        "Med": float(np.quantile(x, 0.5)),
        "Mean": float(x.mean()),
        # shifting by a sample value leaves the SD unchanged and makes constant input exactly 0
        "Std Dev": float((x - x[0]).std(ddof=1)) if x.size > 1 else 0.0,
    }
    for name, q in _PCTL.items():
        out[name] = float(np.quantile(x, q / 100.0))
    return RiskSummary(float(eval_time), int(x.size), {c: out[c] for c in SUMMARY_COLUMNS})


def cohort_risk_summary(predictions: Sequence[RiskPrediction], eval_time: float = 30.0) -> RiskSummary:
    """Ten summary statistics of the hazards at ``eval_time`` (linear-interpolation percentiles)."""
    if not predictions:
        raise ValueError("no predictions to summarise")
    return summarize_values([p.hazard_at(eval_time) for p in predictions], eval_time)


def classify_risk(
    predictions: Sequence[RiskPrediction],
    threshold: float | None = None,
    quantile: float | None = None,
    eval_time: float = 30.0,
) -> list[str]:
    """``"high"`` where the hazard at ``eval_time`` exceeds the cutoff, else ``"low"``.

    Give exactly one of an absolute ``threshold`` or a ``quantile`` of the
    predictions' own hazards.
    """
    if not predictions:
        raise ValueError("no predictions to classify")
    if (threshold is None) == (quantile is None):
        raise ValueError("give exactly one of threshold or quantile")
    h = np.array([p.hazard_at(eval_time) for p in predictions])
    if quantile is not None:
        if not 0 < quantile < 1:
            raise ValueError("quantile must lie in (0, 1)")
        cutoff = float(np.quantile(h, quantile))
    else:
        if threshold < 0:
            raise ValueError("threshold must be non-negative")
        cutoff = threshold
    return ["high" if v > cutoff else "low" for v in h]


def parse_classify(text: str) -> dict:
    """``"q0.9"`` means quantile 0.9, a bare number an absolute threshold."""
    text = text.strip()
    if text.lower().startswith("q"):
        return {"quantile": float(text[1:])}
    return {"threshold": float(text)}


def write_predictions_csv(predictions: Sequence[RiskPrediction], path: str | Path, labels: Sequence[str] | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        head = ["subject_id", "time", "hazard", "pdf", "survivor", "relative_risk", "u_hat", "new_subject"]
        w.writerow(head + (["risk_group"] if labels is not None else []))
        for k, p in enumerate(predictions):
            for t, lam, f, S in zip(p.times, p.hazard, p.pdf, p.survivor):
                row = [p.subject_id, repr(float(t)), repr(float(lam)), repr(float(f)), repr(float(S)),
                       repr(p.relative_risk), repr(p.u_hat), int(p.new_subject)]
                w.writerow(row + ([labels[k]] if labels is not None else []))


def write_predictions_json(predictions: Sequence[RiskPrediction], path: str | Path) -> None:
    Path(path).write_text(json.dumps([p.to_dict() for p in predictions], indent=2) + "\n", encoding="utf-8")
