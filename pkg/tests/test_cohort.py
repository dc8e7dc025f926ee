from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from frailrisk.cohort import (
    INTERCEPT,
    Cohort,
    CohortError,
    Covariate,
    CovariateSchema,
    DesignError,
    ModelSpec,
    Spell,
    Term,
    build_design,
    correlation_screen,
    cramers_v,
    ingest_csv,
    write_csv,
)


def _csv(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


class TestIngest:
    def test_censored_row(self, tmp_path, small_schema):
        path = _csv(tmp_path, "subject_id,seq,time,event,admsrc,los\nA,1,31,0,NHCU,2\n")
        cohort = ingest_csv(path, small_schema)
        (subj,) = cohort.subjects
        assert subj.subject_id == "A"
        assert subj.spells[0].event == 0 and subj.spells[0].time == 31.0

    def test_event_beyond_window(self, tmp_path, small_schema):
        path = _csv(tmp_path, "subject_id,seq,time,event,admsrc,los\nA,1,35,1,NHCU,2\n")
        with pytest.raises(CohortError, match="exceeds 30-day window") as err:
            ingest_csv(path, small_schema)
        assert err.value.row == 2

    def test_grouping_and_order(self, tmp_path, small_schema):
        text = "subject_id,seq,time,event,admsrc,los\nB,2,31,0,HOME,1\nB,1,5,1,HOME,1\n"
        cohort = ingest_csv(_csv(tmp_path, text), small_schema)
        assert len(cohort) == 1
        assert [s.seq for s in cohort.subjects[0].spells] == [1, 2]

    @pytest.mark.parametrize(
        "body, match",
        [
            ("A,1,31,0,NHCU\n", "missing value"),
            ("A,1,abc,0,NHCU,2\n", "time"),
            ("A,1,31,0,MARS,2\n", "level"),
            ("A,1,31,0,NHCU,\n", "missing"),
            ("A,1,20,0,NHCU,2\n", "censored"),
            ("A,1,5,1,NHCU,2\nA,3,31,0,NHCU,2\n", "consecutive"),
        ],
    )
    def test_row_errors(self, tmp_path, small_schema, body, match):
        path = _csv(tmp_path, "subject_id,seq,time,event,admsrc,los\n" + body)
        with pytest.raises(CohortError, match=match):
            ingest_csv(path, small_schema)

    def test_missing_required_column(self, tmp_path, small_schema):
        path = _csv(tmp_path, "subject_id,seq,time,admsrc,los\nA,1,31,NHCU,2\n")
        with pytest.raises(CohortError, match="event"):
            ingest_csv(path, small_schema)

    def test_round_trip(self, tmp_path, small_cohort):
        path = tmp_path / "out.csv"
        write_csv(small_cohort, path)
        assert ingest_csv(path, small_cohort.schema) == small_cohort

    def test_row_permutation(self, tmp_path, small_cohort, rng):
        path = tmp_path / "out.csv"
        write_csv(small_cohort, path)
        lines = path.read_text().splitlines()
        body = lines[1:]
        rng.shuffle(body)
        shuffled = _csv(tmp_path, "\n".join([lines[0]] + body) + "\n", "shuffled.csv")
        assert ingest_csv(shuffled, small_cohort.schema) == small_cohort

    def test_censor_at_30(self, tmp_path, small_cohort):
        path = tmp_path / "out.csv"
        write_csv(small_cohort, path)
        c30 = ingest_csv(path, small_cohort.schema, censor_at_30=True)
        times = c30.analysis_times()
        assert np.all(times[c30.events() == 0] == 30.0)
        assert np.all(small_cohort.analysis_times()[small_cohort.events() == 0] == 31.0)


class TestSchema:
    def test_reference_must_be_a_level(self):
        with pytest.raises(DesignError, match="reference"):
            Covariate("marriage", "categorical", ("married", "divorced"), "never")

    def test_json_round_trip(self, small_schema):
        assert CovariateSchema.from_dict(small_schema.to_dict()) == small_schema

    def test_empty_cohort_rejected(self, small_schema):
        with pytest.raises(CohortError):
            Cohort((), small_schema)


class TestDesign:
    def test_three_level_categorical(self):
        schema = CovariateSchema(
            (Covariate("marriage", "categorical", ("never married", "married", "divorced"), "never married"),)
        )
        spells = [Spell(str(i), 1, 31.0, 0, {"marriage": lv}) for i, lv in enumerate(["married", "divorced", "never married"])]
        d = build_design(Cohort.from_spells(spells, schema), ModelSpec.from_terms(["marriage"]))
        assert d.columns == (INTERCEPT, "marriage[married]", "marriage[divorced]")
        assert d.term_columns("marriage") == [1, 2]
        assert np.all(d.matrix[:, 1:].sum(axis=1) <= 1)

    def test_log_transform(self):
        schema = CovariateSchema((Covariate("los", "numeric"),))
        cohort = Cohort.from_spells([Spell("a", 1, 31.0, 0, {"los": 1.0})], schema)
        d = build_design(cohort, ModelSpec.from_terms(["log(los)"]))
        assert d.matrix[0, 1] == 0.0

    def test_interaction(self):
        schema = CovariateSchema((Covariate("los", "numeric"),))
        spells = [Spell("a", 1, 3.0, 1, {"los": 2.0}), Spell("a", 2, 31.0, 0, {"los": math.e})]
        d = build_design(Cohort.from_spells(spells, schema), ModelSpec.from_terms(["seq:log(los)"]))
        assert d.matrix[1, 1] == pytest.approx(2.0, abs=1e-15)

    def test_log_of_non_positive(self):
        schema = CovariateSchema((Covariate("x", "numeric"),))
        cohort = Cohort.from_spells([Spell("a", 1, 31.0, 0, {"x": 0.0})], schema)
        with pytest.raises(DesignError, match="non-positive"):
            build_design(cohort, ModelSpec.from_terms(["log(x)"]))

    def test_duplicate_term(self):
        with pytest.raises(DesignError, match="duplicate"):
            ModelSpec.from_terms(["los", "los"])

    def test_identical_columns(self):
        schema = CovariateSchema((Covariate("a", "numeric"), Covariate("b", "numeric")))
        spells = [Spell("s", 1, 31.0, 0, {"a": 1.0, "b": 1.0}), Spell("t", 1, 2.0, 1, {"a": 2.0, "b": 2.0})]
        with pytest.raises(DesignError, match="identical"):
            build_design(Cohort.from_spells(spells, schema), ModelSpec.from_terms(["a", "b"]))

    def test_column_count(self, small_cohort):
        spec = ModelSpec.from_terms(["admsrc", "log(los)", "seq:admsrc"])
        d = build_design(small_cohort, spec)
        assert d.shape[1] == 1 + 2 + 1 + 2
        assert np.all(d.matrix[:, 0] == 1.0)

    def test_spec_json(self):
        spec = ModelSpec.from_dict({"terms": ["seq:log(los)", "admsrc"], "baseline": {"family": "exponential"}})
        assert ModelSpec.from_dict(spec.to_dict()) == spec
        assert spec.terms[0] == Term.parse("seq:log(los)")


class TestScreening:
    def test_exact_copy(self):
        schema = CovariateSchema((Covariate("x", "numeric"), Covariate("y", "numeric")))
        vals = np.linspace(0.1, 3, 20)
        spells = [Spell(f"{i:02d}", 1, 31.0, 0, {"x": v, "y": v}) for i, v in enumerate(vals)]
        (assoc,) = correlation_screen(Cohort.from_spells(spells, schema), [("x", "y")])
        assert assoc.value == pytest.approx(1.0)
        assert assoc.flagged

    def test_independent_binaries(self):
        gen = np.random.default_rng(7)
        a = gen.integers(0, 2, 10_000)
        b = gen.integers(0, 2, 10_000)
        v = cramers_v(a, b)
        table = np.histogram2d(a, b, bins=2)[0]
        expected = table.sum(1, keepdims=True) * table.sum(0, keepdims=True) / table.sum()
        chi2 = ((table - expected) ** 2 / expected).sum()
        assert v == pytest.approx(math.sqrt(chi2 / 10_000), rel=1e-12)
        assert v < 0.05

    def test_constant_column(self):
        schema = CovariateSchema((Covariate("x", "numeric"), Covariate("k", "numeric")))
        spells = [Spell(f"{i}", 1, 31.0, 0, {"x": float(i), "k": 1.0}) for i in range(5)]
        (assoc,) = correlation_screen(Cohort.from_spells(spells, schema), [("x", "k")])
        assert assoc.value is None
        assert "degenerate" in assoc.note


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 3), st.floats(0.01, 30.0)), min_size=1, max_size=12))
def test_round_trip_property(tmp_path_factory, rows):
    schema = CovariateSchema((Covariate("x", "numeric"),))
    spells = []
    for i, (n, t) in enumerate(rows):
        for j in range(1, n + 1):
            last = j == n
            spells.append(Spell(f"S{i:03d}", j, 31.0 if last else t, 0 if last else 1, {"x": t * j}))
    cohort = Cohort.from_spells(spells, schema)
    path = tmp_path_factory.mktemp("rt") / "c.csv"
    write_csv(cohort, path)
    assert ingest_csv(path, schema) == cohort
