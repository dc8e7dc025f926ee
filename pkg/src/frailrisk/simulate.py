"""Synthetic recurrent-event cohorts drawn from the frailty model itself.

Every subject gets its own PCG64 stream seeded by ``SeedSequence(seed,
spawn_key=(index,))``, so a cohort is reproducible from (seed, scenario) and
does not depend on generation order.  Within a subject the draws are taken in
a fixed order: the frailty, then covariates, then the uniforms used for the
event times.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .cohort import (
    WINDOW,
    Cohort,
    Covariate,
    CovariateSchema,
    ModelSpec,
    Spell,
    design_columns,
    write_csv,
)

RNG_ALGORITHM = "numpy PCG64, SeedSequence(seed, spawn_key=(subject_index,))"
DISTRIBUTIONS = ("bernoulli", "categorical", "uniform", "normal", "lognormal")


class ScenarioError(ValueError):
    pass


def sample_event_time(omega: float, lin, u):
    """Inverse-transform draw from ``S(t) = exp(-t^(omega+1) e^lin)``."""
    u = np.asarray(u, dtype=float)
    if np.any((u <= 0) | (u >= 1)):
        raise ValueError("u must lie strictly inside (0, 1)")
    if not omega > -1:
        raise ValueError(f"omega must exceed -1, got {omega}")
    t = (-np.log(u) * np.exp(-np.asarray(lin, dtype=float))) ** (1.0 / (omega + 1.0))
    return float(t) if t.ndim == 0 else t


@dataclass(frozen=True)
class CovariateGenerator:
    """Distribution of one covariate; ``per`` is ``"spell"`` or ``"subject"``."""

    name: str
    distribution: str
    params: Mapping[str, object] = field(default_factory=dict)
    per: str = "spell"

    def __post_init__(self):
        if self.distribution not in DISTRIBUTIONS:
            raise ScenarioError(f"covariate {self.name!r}: unknown distribution {self.distribution!r}")
        if self.per not in ("spell", "subject"):
            raise ScenarioError(f"covariate {self.name!r}: per must be 'spell' or 'subject'")
        p = self.params
        if self.distribution == "bernoulli" and not 0 <= float(p.get("p", 0.5)) <= 1:
            raise ScenarioError(f"covariate {self.name!r}: p outside [0, 1]")
        if self.distribution == "categorical":
            levels, probs = list(p.get("levels", [])), list(p.get("probs", []))
            if not levels or len(levels) != len(probs) or not math.isclose(sum(probs), 1.0, abs_tol=1e-9):
                raise ScenarioError(f"covariate {self.name!r}: levels/probs invalid")
        if self.distribution == "uniform" and not float(p.get("low", 0.0)) < float(p.get("high", 1.0)):
            raise ScenarioError(f"covariate {self.name!r}: need low < high")
        if self.distribution in ("normal", "lognormal") and not float(p.get("sd", 1.0)) > 0:
            raise ScenarioError(f"covariate {self.name!r}: sd must be positive")

    @property
    def covariate(self) -> Covariate:
        if self.distribution == "categorical":
            levels = tuple(str(v) for v in self.params["levels"])
            return Covariate(self.name, "categorical", levels, str(self.params.get("reference", levels[0])))
        return Covariate(self.name, "numeric")

    def draw(self, rng: np.random.Generator, size: int) -> np.ndarray:
        p = self.params
        d = self.distribution
        if d == "bernoulli":
            return (rng.random(size) < float(p.get("p", 0.5))).astype(float)
        if d == "categorical":
            levels = np.array([str(v) for v in p["levels"]], dtype=object)
            return levels[rng.choice(len(levels), size=size, p=np.asarray(p["probs"], dtype=float))]
        if d == "uniform":
            return rng.uniform(float(p.get("low", 0.0)), float(p.get("high", 1.0)), size)
        if d == "normal":
            return rng.normal(float(p.get("mean", 0.0)), float(p.get("sd", 1.0)), size)
        return rng.lognormal(float(p.get("mean", 0.0)), float(p.get("sd", 1.0)), size)

    def to_dict(self) -> dict:
        return {"name": self.name, "distribution": self.distribution, "params": dict(self.params), "per": self.per}

    @classmethod
    def from_dict(cls, doc: Mapping) -> "CovariateGenerator":
        params = {k: v for k, v in doc.items() if k not in ("name", "distribution", "per", "params")}
        params.update(doc.get("params", {}))
        return cls(doc["name"], doc["distribution"], params, doc.get("per", "spell"))


@dataclass(frozen=True)
class SimScenario:
    """Simulation settings.  ``beta`` maps design column names to true values."""

    beta: Mapping[str, float]
    omega: float = 0.0
    sigma_u: float = 1.0
    n_subjects: int = 2000
    covariates: tuple[CovariateGenerator, ...] = ()
    terms: tuple[str, ...] = ()
    family: str = "weibull"
    max_spells: int = 3
    window: float = WINDOW
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(self, "terms", tuple(self.terms))
        if not isinstance(self.n_subjects, int) or self.n_subjects < 1:
            raise ScenarioError(f"n_subjects must be a positive integer, got {self.n_subjects!r}")
        if self.max_spells < 1:
            raise ScenarioError("max_spells must be at least 1")
        if not self.window > 0:
            raise ScenarioError("window must be positive")
        if not self.omega > -1:
            raise ScenarioError("omega must exceed -1")
        if self.sigma_u < 0:
            raise ScenarioError("sigma_u must be non-negative")
        if self.family == "exponential" and self.omega != 0:
            raise ScenarioError("the exponential family fixes omega = 0")
        if self.seed < 0:
            raise ScenarioError("seed must be non-negative")
        columns = self.columns
        missing = [c for c in columns if c not in self.beta]
        extra = [c for c in self.beta if c not in columns]
        if missing or extra:
            raise ScenarioError(f"beta keys must match design columns {list(columns)}; missing {missing}, extra {extra}")

    @property
    def schema(self) -> CovariateSchema:
        return CovariateSchema(tuple(g.covariate for g in self.covariates))

    @property
    def spec(self) -> ModelSpec:
        return ModelSpec.from_terms(self.terms, self.family)

    @property
    def columns(self) -> tuple[str, ...]:
        probe = {"seq": np.ones(1)}
        for g in self.covariates:
            cov = g.covariate
            probe[g.name] = np.array([cov.levels[0]], dtype=object) if cov.is_categorical else np.ones(1)
        return design_columns(probe, self.schema, self.spec)[1]

    @property
    def beta_vector(self) -> np.ndarray:
        return np.array([float(self.beta[c]) for c in self.columns])

    @property
    def truth(self) -> dict[str, float]:
        """True values keyed by reporting name (columns, ``sd``, ``omega``)."""
        out = {c: float(self.beta[c]) for c in self.columns}
        out["sd"] = self.sigma_u
        if self.family == "weibull":
            out["omega"] = self.omega
        return out

    def with_seed(self, seed: int) -> "SimScenario":
        return SimScenario(**{**self.__dict__, "seed": seed})

    def to_dict(self) -> dict:
        return {
            "beta": dict(self.beta),
            "omega": self.omega,
            "sigma_u": self.sigma_u,
            "n_subjects": self.n_subjects,
            "covariates": [g.to_dict() for g in self.covariates],
            "terms": list(self.terms),
            "family": self.family,
            "max_spells": self.max_spells,
            "window": self.window,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "SimScenario":
        try:
            return cls(
                beta={str(k): float(v) for k, v in doc["beta"].items()},
                omega=float(doc.get("omega", 0.0)),
                sigma_u=float(doc.get("sigma_u", 1.0)),
                n_subjects=doc.get("n_subjects", 2000),
                covariates=tuple(CovariateGenerator.from_dict(g) for g in doc.get("covariates", [])),
                terms=tuple(doc.get("terms", [])),
                family=doc.get("family", "weibull"),
                max_spells=int(doc.get("max_spells", 3)),
                window=float(doc.get("window", WINDOW)),
                seed=int(doc.get("seed", 0)),
            )
        except KeyError as exc:
            raise ScenarioError(f"scenario missing field {exc}") from None

    @classmethod
    def load(cls, path: str | Path) -> "SimScenario":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    @classmethod
    def reference(cls, n_subjects: int = 2000, seed: int = 0) -> "SimScenario":
        """Two-covariate Weibull scenario: binary ``adm``, uniform ``slope``."""
        return cls(
            beta={"(Intercept)": -3.0, "adm": 1.0, "slope": -0.5},
            omega=0.3,
            sigma_u=1.5,
            n_subjects=n_subjects,
            covariates=(
                CovariateGenerator("adm", "bernoulli", {"p": 0.5}),
                CovariateGenerator("slope", "uniform", {"low": 0.0, "high": 2.0}),
            ),
            terms=("adm", "slope"),
            max_spells=3,
            seed=seed,
        )


@dataclass
class GroundTruth:
    scenario: SimScenario
    gammas: dict[str, float]
    rng: str = RNG_ALGORITHM

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario.to_dict(),
            "truth": self.scenario.truth,
            "rng": self.rng,
            "seed": self.scenario.seed,
            "gammas": self.gammas,
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def subject_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(index,))))


def subject_ids(n: int) -> list[str]:
    width = max(5, len(str(n)))
    return [f"S{i + 1:0{width}d}" for i in range(n)]


def generate_cohort(scenario: SimScenario) -> tuple[Cohort, GroundTruth]:
    """Draw a cohort and the true frailties.

    A spell whose event time falls inside the window is recorded as an event
    and the subject moves on to the next spell (up to ``max_spells``);
    otherwise it is recorded as censored at ``window + 1`` and the subject's
    history ends.
    """
    sc = scenario
    n, m = sc.n_subjects, sc.max_spells
    ids = subject_ids(n)
    gammas = np.empty(n)
    raw: dict[str, list] = {g.name: [] for g in sc.covariates}
    uniforms = np.empty((n, m))
    for i in range(n):
        rng = subject_rng(sc.seed, i)
        gammas[i] = rng.normal(0.0, sc.sigma_u) if sc.sigma_u > 0 else 0.0
        for g in sc.covariates:
            vals = g.draw(rng, 1 if g.per == "subject" else m)
            raw[g.name].append(np.repeat(vals, m) if g.per == "subject" else vals)
        # 1 - U is in (0, 1]; reject the (measure-zero) endpoint
        u = 1.0 - rng.random(m)
        while np.any(u >= 1.0):
            u[u >= 1.0] = 1.0 - rng.random(int(np.sum(u >= 1.0)))
        uniforms[i] = u

    values = {"seq": np.tile(np.arange(1, m + 1, dtype=float), n)}
    for g in sc.covariates:
        arr = np.concatenate(raw[g.name])
        values[g.name] = arr.astype(object) if g.distribution == "categorical" else arr.astype(float)
    X, _, _ = design_columns(values, sc.schema, sc.spec)
    lin = (X @ sc.beta_vector).reshape(n, m) + gammas[:, None]
    times = sample_event_time(sc.omega, lin, uniforms)

    spells: list[Spell] = []
    for i in range(n):
        for j in range(m):
            k = i * m + j
            covs = {g.name: (str(values[g.name][k]) if g.distribution == "categorical" else float(values[g.name][k]))
                    for g in sc.covariates}
            if times[i, j] <= sc.window:
                spells.append(Spell(ids[i], j + 1, float(times[i, j]), 1, covs))
            else:
                spells.append(Spell(ids[i], j + 1, sc.window + 1.0, 0, covs))
                break
    cohort = Cohort.from_spells(spells, sc.schema, sc.window)
    return cohort, GroundTruth(sc, {ids[i]: float(gammas[i]) for i in range(n)})


def write_outputs(cohort: Cohort, truth: GroundTruth, csv_path: str | Path) -> Path:
    """Write the cohort CSV and its ``.truth.json`` sidecar; returns the sidecar path."""
    csv_path = Path(csv_path)
    write_csv(cohort, csv_path)
    sidecar = csv_path.with_suffix(".truth.json")
    sidecar.write_text(truth.to_json(indent=2, sort_keys=True) + "\n", encoding="utf-8")
    schema_path = csv_path.with_suffix(".schema.json")
    schema_path.write_text(json.dumps(cohort.schema.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return sidecar


@dataclass(frozen=True)
class RecoveryRow:
    name: str
    true: float
    estimate: float
    std_error: float
    z: float
    covered: bool | None
    near_boundary: bool = False


@dataclass(frozen=True)
class RecoveryReport:
    rows: tuple[RecoveryRow, ...]

    def __getitem__(self, name: str) -> RecoveryRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    @property
    def max_abs_z(self) -> float:
        return max(abs(r.z) for r in self.rows if not r.near_boundary)

    def to_dict(self) -> dict:
        return {"rows": [vars(r).copy() for r in self.rows]}


def recovery_report(scenario: SimScenario, fit, boundary_se: float = 2.0) -> RecoveryReport:
    """z-scores ``(estimate - true) / SE`` and 95% CI coverage per parameter.

    When the true frailty SD lies within ``boundary_se`` standard errors of
    zero, its row is flagged ``near_boundary`` and coverage is not asserted.
    """
    from .inference import Z95  # local import keeps the module graph acyclic

    truth = scenario.truth
    names = fit.reporting_names
    if list(truth) != names:
        raise ScenarioError(f"fit parameters {names} do not match scenario parameters {list(truth)}")
    est = fit.reporting_estimates()
    se = np.sqrt(np.diag(fit.reporting_covariance()))
    rows = []
    for name, e, s in zip(names, est, se):
        t = truth[name]
        z = (e - t) / s
        near = name == "sd" and t < boundary_se * s
        covered = None if near else bool(abs(e - t) <= Z95 * s)
        rows.append(RecoveryRow(name, t, float(e), float(s), float(z), covered, near))
    return RecoveryReport(tuple(rows))


def coverage(reports: Sequence[RecoveryReport]) -> dict[str, float]:
    """Fraction of reports whose CI covers the truth, per parameter."""
    out = {}
    for name in [r.name for r in reports[0].rows]:
        flags = [rep[name].covered for rep in reports if rep[name].covered is not None]
        out[name] = float(np.mean(flags)) if flags else math.nan
    return out
