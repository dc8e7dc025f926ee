"""Recurrent-event cohorts: CSV ingestion, validation and design-matrix coding.

A cohort is a set of subjects, each with one or more spells (discharge to
readmission or censoring).  On disk a censored spell carries ``event=0`` and
``time=31``; events must fall inside the 30-day window.
"""
from __future__ import annotations

import csv
import math
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import json

import numpy as np

REQUIRED_COLUMNS = ("subject_id", "seq", "time", "event")
WINDOW = 30.0
BUILTIN_VARIABLES = ("seq",)
TRANSFORMS = ("identity", "log")
FAMILIES = ("weibull", "exponential")


class CohortError(ValueError):
    """Malformed cohort input.  ``row`` is the 1-based CSV line when known."""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        super().__init__(f"row {row}: {message}" if row is not None else message)


class DesignError(ValueError):
    """Invalid schema, model terms or design matrix."""


# ---------------------------------------------------------------------------
# covariate schema
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Covariate:
    name: str
    kind: str
    levels: tuple[str, ...] = ()
    reference: str | None = None

    def __post_init__(self):
        if self.kind not in ("numeric", "categorical"):
            raise DesignError(f"covariate {self.name!r}: unknown kind {self.kind!r}")
        if self.name in REQUIRED_COLUMNS:
            raise DesignError(f"covariate name {self.name!r} is reserved")
        if self.kind == "categorical":
            if len(self.levels) < 1 or len(set(self.levels)) != len(self.levels):
                raise DesignError(f"covariate {self.name!r}: levels must be non-empty and unique")
            if self.reference not in self.levels:
                raise DesignError(
                    f"covariate {self.name!r}: reference level {self.reference!r} "
                    "not in schema levels"
                )

    @property
    def is_categorical(self) -> bool:
        return self.kind == "categorical"

    @property
    def contrast_levels(self) -> tuple[str, ...]:
        """Levels that get a dummy column (all but the reference)."""
        return tuple(lv for lv in self.levels if lv != self.reference)

    def to_dict(self) -> dict:
        if self.is_categorical:
            return {"kind": self.kind, "levels": list(self.levels), "reference": self.reference}
        return {"kind": self.kind}


@dataclass(frozen=True)
class CovariateSchema:
    covariates: tuple[Covariate, ...] = ()

    def __post_init__(self):
        names = [c.name for c in self.covariates]
        if len(set(names)) != len(names):
            raise DesignError("duplicate covariate names in schema")
        for name in names:
            if name in BUILTIN_VARIABLES:
                raise DesignError(f"covariate name {name!r} is reserved")

    def __getitem__(self, name: str) -> Covariate:
        for c in self.covariates:
            if c.name == name:
                return c
        raise KeyError(name)

    def __contains__(self, name: object) -> bool:
        return any(c.name == name for c in self.covariates)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.covariates)

    @classmethod
    def from_dict(cls, doc: Mapping) -> "CovariateSchema":
        entries = doc.get("covariates", doc)
        covs = []
        for name, meta in entries.items():
            covs.append(
                Covariate(
                    name=name,
                    kind=meta.get("kind", "numeric"),
                    levels=tuple(str(v) for v in meta.get("levels", ())),
                    reference=None if meta.get("reference") is None else str(meta["reference"]),
                )
            )
        return cls(tuple(covs))

    def to_dict(self) -> dict:
        return {"covariates": {c.name: c.to_dict() for c in self.covariates}}

    @classmethod
    def load(cls, path: str | Path) -> "CovariateSchema":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# spells, subjects, cohorts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Spell:
    subject_id: str
    seq: int
    time: float
    event: int
    covariates: Mapping[str, float | str] = field(default_factory=dict)


@dataclass(frozen=True)
class Subject:
    subject_id: str
    spells: tuple[Spell, ...]

    @property
    def n_events(self) -> int:
        return sum(s.event for s in self.spells)


def _check_spell(spell: Spell, window: float, row: int | None = None) -> None:
    if not (spell.time > 0) or not math.isfinite(spell.time):
        raise CohortError(f"time must be positive and finite, got {spell.time!r}", row)
    if spell.event not in (0, 1):
        raise CohortError(f"event must be 0 or 1, got {spell.event!r}", row)
    if spell.event == 1 and spell.time > window:
        raise CohortError(f"event time exceeds {window:g}-day window ({spell.time:g})", row)
    if spell.event == 0 and spell.time != window + 1:
        raise CohortError(
            f"censored spell must carry time={window + 1:g}, got {spell.time:g}", row
        )
    if spell.seq < 1:
        raise CohortError(f"seq must be a positive integer, got {spell.seq}", row)


@dataclass(frozen=True)
class Cohort:
    """Validated recurrent-event data; subjects sorted by id, spells by seq.

    ``censor_at_window`` makes the likelihood treat censored spells as ending at
    ``window`` rather than at the on-disk code ``window + 1``.
    """

    subjects: tuple[Subject, ...]
    schema: CovariateSchema
    window: float = WINDOW
    censor_at_window: bool = False

    def __post_init__(self):
        if not self.subjects:
            raise CohortError("cohort has no subjects")
        ids = [s.subject_id for s in self.subjects]
        if ids != sorted(ids) or len(set(ids)) != len(ids):
            raise CohortError("subjects must be unique and sorted by id; use Cohort.from_spells")
        for subj in self.subjects:
            if not subj.spells:
                raise CohortError(f"subject {subj.subject_id!r} has no spells")
            for k, spell in enumerate(subj.spells, start=1):
                if spell.seq != k:
                    raise CohortError(
                        f"subject {subj.subject_id!r}: seq values must be consecutive "
                        f"from 1, found {[s.seq for s in subj.spells]}"
                    )
                _check_spell(spell, self.window)
                _check_covariates(spell.covariates, self.schema)

    @classmethod
    def from_spells(
        cls,
        spells: Iterable[Spell],
        schema: CovariateSchema,
        window: float = WINDOW,
        censor_at_window: bool = False,
    ) -> "Cohort":
        groups: dict[str, list[Spell]] = defaultdict(list)
        for s in spells:
            groups[s.subject_id].append(s)
        subjects = tuple(
            Subject(sid, tuple(sorted(groups[sid], key=lambda s: s.seq))) for sid in sorted(groups)
        )
        return cls(subjects, schema, window, censor_at_window)

    def __iter__(self) -> Iterator[Subject]:
        return iter(self.subjects)

    def __len__(self) -> int:
        return len(self.subjects)

    @property
    def spells(self) -> list[Spell]:
        return [sp for subj in self.subjects for sp in subj.spells]

    @property
    def n_spells(self) -> int:
        return sum(len(s.spells) for s in self.subjects)

    @property
    def n_events(self) -> int:
        return sum(s.n_events for s in self.subjects)

    def subject(self, subject_id: str) -> Subject:
        for s in self.subjects:
            if s.subject_id == subject_id:
                return s
        raise KeyError(subject_id)

    def analysis_times(self) -> np.ndarray:
        """Spell times as used by the likelihood (censoring recoded if requested)."""
        out = np.array([sp.time for sp in self.spells], dtype=float)
        if self.censor_at_window:
            events = np.array([sp.event for sp in self.spells])
            out[events == 0] = self.window
        return out

    def events(self) -> np.ndarray:
        return np.array([sp.event for sp in self.spells], dtype=float)

    def select(self, subject_ids: Iterable[str]) -> "Cohort":
        keep = set(subject_ids)
        subs = tuple(s for s in self.subjects if s.subject_id in keep)
        return Cohort(subs, self.schema, self.window, self.censor_at_window)


def _check_covariates(values: Mapping, schema: CovariateSchema, row: int | None = None) -> None:
    for cov in schema.covariates:
        if cov.name not in values:
            raise CohortError(f"missing covariate {cov.name!r}", row)
        v = values[cov.name]
        if cov.is_categorical:
            if v not in cov.levels:
                raise CohortError(f"unknown level {v!r} for categorical {cov.name!r}", row)
        elif not isinstance(v, float) or not math.isfinite(v):
            raise CohortError(f"covariate {cov.name!r} must be a finite number, got {v!r}", row)


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------


def _parse_number(text: str, column: str, row: int, integer: bool = False):
    text = text.strip()
    if text == "":
        raise CohortError(f"missing value in column {column!r}", row)
    try:
        value = float(text)
    except ValueError:
        raise CohortError(f"unparseable numeric value {text!r} in column {column!r}", row) from None
    if not math.isfinite(value):
        raise CohortError(f"non-finite value {text!r} in column {column!r}", row)
    if integer:
        if value != int(value):
            raise CohortError(f"column {column!r} must be an integer, got {text!r}", row)
        return int(value)
    return value


def ingest_csv(
    path: str | Path,
    schema: CovariateSchema,
    censor_at_30: bool = False,
    window: float = WINDOW,
) -> Cohort:
    """Read and validate a spell-per-row CSV file.

    Errors are raised as :class:`CohortError` carrying the file line number.
    """
    spells = []
    rows_of: dict[tuple[str, int], int] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in REQUIRED_COLUMNS + schema.names:
            if col not in header:
                raise CohortError(f"missing column {col!r}", 1)
        for line, rec in enumerate(reader, start=2):
            sid = (rec["subject_id"] or "").strip()
            if not sid:
                raise CohortError("missing subject_id", line)
            seq = _parse_number(rec["seq"], "seq", line, integer=True)
            time = _parse_number(rec["time"], "time", line)
            event = _parse_number(rec["event"], "event", line, integer=True)
            covs: dict[str, float | str] = {}
            for cov in schema.covariates:
                raw = rec[cov.name]
                if raw is None or raw.strip() == "":
                    raise CohortError(f"missing value in column {cov.name!r}", line)
                covs[cov.name] = raw.strip() if cov.is_categorical else _parse_number(raw, cov.name, line)
            spell = Spell(sid, seq, time, event, covs)
            _check_spell(spell, window, line)
            _check_covariates(covs, schema, line)
            if (sid, seq) in rows_of:
                raise CohortError(
                    f"duplicate seq {seq} for subject {sid!r} (first at row {rows_of[sid, seq]})", line
                )
            rows_of[sid, seq] = line
            spells.append(spell)
    if not spells:
        raise CohortError("no data rows")
    # consecutive seq check with row attribution
    by_subject: dict[str, list[int]] = defaultdict(list)
    for sp in spells:
        by_subject[sp.subject_id].append(sp.seq)
    for sid, seqs in by_subject.items():
        seqs.sort()
        if seqs != list(range(1, len(seqs) + 1)):
            missing = sorted(set(range(1, max(seqs) + 1)) - set(seqs))
            bad = max(seqs)
            raise CohortError(
                f"subject {sid!r}: seq values must be consecutive from 1 (missing {missing})",
                rows_of[sid, bad],
            )
    return Cohort.from_spells(spells, schema, window, censor_at_30)


def write_csv(cohort: Cohort, path: str | Path) -> None:
    """Write ``cohort`` in the on-disk format read by :func:`ingest_csv`."""
    names = cohort.schema.names
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REQUIRED_COLUMNS + names)
        for sp in cohort.spells:
            vals = [sp.covariates[n] for n in names]
            w.writerow(
                [sp.subject_id, sp.seq, repr(float(sp.time)), sp.event]
                + [v if isinstance(v, str) else repr(float(v)) for v in vals]
            )


# ---------------------------------------------------------------------------
# model spec
# ---------------------------------------------------------------------------

_FACTOR_RE = re.compile(r"^\s*(?:(log|identity)\s*\(\s*([A-Za-z_][\w.]*)\s*\)|([A-Za-z_][\w.]*))\s*$")


@dataclass(frozen=True)
class Factor:
    variable: str
    transform: str = "identity"

    @property
    def name(self) -> str:
        return self.variable if self.transform == "identity" else f"{self.transform}({self.variable})"


@dataclass(frozen=True)
class Term:
    """A main effect (one factor) or a two-way interaction (two factors)."""

    factors: tuple[Factor, ...]

    def __post_init__(self):
        if not 1 <= len(self.factors) <= 2:
            raise DesignError("terms are main effects or two-way interactions only")

    @property
    def name(self) -> str:
        return ":".join(f.name for f in self.factors)

    @property
    def variables(self) -> tuple[str, ...]:
        return tuple(f.variable for f in self.factors)

    @classmethod
    def parse(cls, text: str) -> "Term":
        parts = text.split(":")
        factors = []
        for part in parts:
            m = _FACTOR_RE.match(part)
            if not m:
                raise DesignError(f"cannot parse term {text!r}")
            if m.group(1):
                factors.append(Factor(m.group(2), m.group(1)))
            else:
                factors.append(Factor(m.group(3)))
        return cls(tuple(factors))

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class ModelSpec:
    terms: tuple[Term, ...] = ()
    family: str = "weibull"
    frailty: str = "normal"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise DesignError(f"unknown baseline family {self.family!r}")
        if self.frailty != "normal":
            raise DesignError(f"unsupported frailty distribution {self.frailty!r}")
        names = [t.name for t in self.terms]
        dup = [n for n, c in Counter(names).items() if c > 1]
        if dup:
            raise DesignError(f"duplicate term {dup[0]!r}")

    @classmethod
    def from_terms(cls, terms: Sequence[str | Term], family: str = "weibull") -> "ModelSpec":
        return cls(tuple(t if isinstance(t, Term) else Term.parse(t) for t in terms), family)

    def with_terms(self, terms: Sequence[Term]) -> "ModelSpec":
        return ModelSpec(tuple(terms), self.family, self.frailty)

    @property
    def term_names(self) -> tuple[str, ...]:
        return tuple(t.name for t in self.terms)

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ModelSpec":
        terms = []
        for t in doc.get("terms", []):
            terms.append(Term.parse(t) if isinstance(t, str) else Term.parse(":".join(t)))
        return cls(
            tuple(terms),
            family=doc.get("baseline", {}).get("family", "weibull"),
            frailty=doc.get("frailty", {}).get("distribution", "normal"),
        )

    def to_dict(self) -> dict:
        return {
            "terms": [t.name for t in self.terms],
            "baseline": {"family": self.family},
            "frailty": {"distribution": self.frailty},
        }

    @classmethod
    def load(cls, path: str | Path) -> "ModelSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# design matrix
# ---------------------------------------------------------------------------

INTERCEPT = "(Intercept)"


@dataclass(frozen=True)
class DesignMatrix:
    matrix: np.ndarray
    columns: tuple[str, ...]
    term_spans: Mapping[str, tuple[int, int]]
    subject_index: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    def term_columns(self, term: str) -> list[int]:
        start, stop = self.term_spans[term]
        return list(range(start, stop))


def _factor_block(
    factor: Factor, values: Mapping[str, np.ndarray], schema: CovariateSchema
) -> tuple[np.ndarray, list[str]]:
    var = factor.variable
    if var not in values:
        raise DesignError(f"term references unknown covariate {var!r}")
    col = values[var]
    if var in schema and schema[var].is_categorical:
        if factor.transform != "identity":
            raise DesignError(f"cannot apply {factor.transform} to categorical {var!r}")
        cov = schema[var]
        levels = cov.contrast_levels
        block = np.column_stack([(col == lv).astype(float) for lv in levels]) if levels else np.empty((len(col), 0))
        return block, [f"{var}[{lv}]" for lv in levels]
    x = np.asarray(col, dtype=float)
    if factor.transform == "log":
        if np.any(x <= 0):
            raise DesignError(f"log of non-positive value in covariate {var!r}")
        x = np.log(x)
    return x[:, None], [factor.name]


def design_columns(
    values: Mapping[str, np.ndarray], schema: CovariateSchema, spec: ModelSpec
) -> tuple[np.ndarray, tuple[str, ...], dict[str, tuple[int, int]]]:
    """Evaluate ``spec`` on column-oriented raw values (``seq`` included)."""
    n = len(values["seq"])
    blocks = [np.ones((n, 1))]
    names = [INTERCEPT]
    spans: dict[str, tuple[int, int]] = {}
    pos = 1
    for term in spec.terms:
        first, first_names = _factor_block(term.factors[0], values, schema)
        if len(term.factors) == 2:
            second, second_names = _factor_block(term.factors[1], values, schema)
            block = (first[:, :, None] * second[:, None, :]).reshape(n, -1)
            cols = [f"{a}:{b}" for a in first_names for b in second_names]
        else:
            block, cols = first, first_names
        blocks.append(block)
        names.extend(cols)
        spans[term.name] = (pos, pos + block.shape[1])
        pos += block.shape[1]
    mat = np.hstack(blocks)
    return mat, tuple(names), spans


def _raw_values(cohort: Cohort) -> dict[str, np.ndarray]:
    spells = cohort.spells
    vals: dict[str, np.ndarray] = {"seq": np.array([s.seq for s in spells], dtype=float)}
    for cov in cohort.schema.covariates:
        if cov.is_categorical:
            vals[cov.name] = np.array([s.covariates[cov.name] for s in spells], dtype=object)
        else:
            vals[cov.name] = np.array([s.covariates[cov.name] for s in spells], dtype=float)
    return vals


def build_design(cohort: Cohort, spec: ModelSpec) -> DesignMatrix:
    """Reference-cell coded design matrix, intercept first, terms in spec order."""
    mat, names, spans = design_columns(_raw_values(cohort), cohort.schema, spec)
    for term in spec.terms:
        a, b = spans[term.name]
        if a == b:
            raise DesignError(f"term {term.name!r} contributes no columns")
    p = mat.shape[1]
    for i in range(p):
        for j in range(i + 1, p):
            if np.array_equal(mat[:, i], mat[:, j]):
                raise DesignError(f"identical design columns {names[i]!r} and {names[j]!r}")
    subject_index = np.repeat(np.arange(len(cohort)), [len(s.spells) for s in cohort.subjects])
    mat.setflags(write=False)
    subject_index.setflags(write=False)
    return DesignMatrix(mat, names, spans, subject_index)


# ---------------------------------------------------------------------------
# association screening
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Association:
    first: str
    second: str
    measure: str
    value: float | None
    flagged: bool
    note: str = ""


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    xc, yc = x - x.mean(), y - y.mean()
    return float(np.dot(xc, yc) / math.sqrt(np.dot(xc, xc) * np.dot(yc, yc)))


def cramers_v(a: np.ndarray, b: np.ndarray) -> float:
    """Cramér's V from the contingency table of two nominal arrays (no bias correction)."""
    ua, ia = np.unique(a, return_inverse=True)
    ub, ib = np.unique(b, return_inverse=True)
    table = np.zeros((len(ua), len(ub)))
    np.add.at(table, (ia, ib), 1.0)
    n = table.sum()
    expected = np.outer(table.sum(1), table.sum(0)) / n
    chi2 = float(((table - expected) ** 2 / expected).sum())
    k = min(table.shape) - 1
    return math.sqrt(chi2 / (n * k))


def correlation_ratio(categories: np.ndarray, x: np.ndarray) -> float:
    """Correlation ratio (eta) of a numeric array on a nominal grouping."""
    _, idx = np.unique(categories, return_inverse=True)
    means = np.bincount(idx, weights=x) / np.bincount(idx)
    ss_between = float(np.sum(np.bincount(idx) * (means - x.mean()) ** 2))
    ss_total = float(np.sum((x - x.mean()) ** 2))
    return math.sqrt(ss_between / ss_total)


def correlation_screen(
    cohort: Cohort, pairs: Sequence[tuple[str, str]], threshold: float = 0.8
) -> list[Association]:
    """Pairwise association over spells.

    Pearson for numeric pairs, Cramér's V for categorical pairs and the
    correlation ratio for mixed pairs.  Constant covariates are reported as
    degenerate instead of producing a value.
    """
    values = _raw_values(cohort)
    schema = cohort.schema
    report = []
    for a, b in pairs:
        for v in (a, b):
            if v not in values:
                raise DesignError(f"unknown covariate {v!r} in screening pair")
        cat_a = a in schema and schema[a].is_categorical
        cat_b = b in schema and schema[b].is_categorical
        xa, xb = values[a], values[b]
        degenerate = [v for v, x in ((a, xa), (b, xb)) if len(np.unique(x)) < 2]
        if cat_a and cat_b:
            measure = "cramers_v"
        elif cat_a or cat_b:
            measure = "correlation_ratio"
        else:
            measure = "pearson"
        if degenerate:
            report.append(
                Association(a, b, measure, None, False, f"degenerate covariate: {', '.join(degenerate)}")
            )
            continue
        if measure == "cramers_v":
            value = cramers_v(xa, xb)
        elif measure == "correlation_ratio":
            value = correlation_ratio(xa, xb) if cat_a else correlation_ratio(xb, xa)
        else:
            value = pearson(xa, xb)
        report.append(Association(a, b, measure, value, abs(value) >= threshold))
    return report
