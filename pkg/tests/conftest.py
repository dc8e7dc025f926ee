from __future__ import annotations

import numpy as np
import pytest

from frailrisk.cohort import Cohort, Covariate, CovariateSchema, ModelSpec, Spell
from frailrisk.inference import FitConfig, fit_model
from frailrisk.simulate import SimScenario, generate_cohort

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def small_schema():
    return CovariateSchema(
        (
            Covariate("admsrc", "categorical", ("NHCU", "HOME", "OTHER"), "HOME"),
            Covariate("los", "numeric"),
        )
    )


@pytest.fixture(scope="session")
def small_cohort(small_schema):
    spells = [
        Spell("A", 1, 31.0, 0, {"admsrc": "NHCU", "los": 3.0}),
        Spell("B", 1, 12.0, 1, {"admsrc": "HOME", "los": 1.0}),
        Spell("B", 2, 31.0, 0, {"admsrc": "OTHER", "los": 7.5}),
        Spell("C", 1, 4.0, 1, {"admsrc": "HOME", "los": 2.0}),
        Spell("C", 2, 9.0, 1, {"admsrc": "NHCU", "los": 1.5}),
        Spell("C", 3, 31.0, 0, {"admsrc": "HOME", "los": 4.0}),
    ]
    return Cohort.from_spells(spells, small_schema)


@pytest.fixture(scope="session")
def reference_scenario():
    return SimScenario.reference(n_subjects=2000, seed=11)


@pytest.fixture(scope="session")
def reference_data(reference_scenario):
    return generate_cohort(reference_scenario)


@pytest.fixture(scope="session")
def reference_fit(reference_data, reference_scenario):
    cohort, _ = reference_data
    return fit_model(cohort, reference_scenario.spec, FitConfig())


@pytest.fixture(scope="session")
def modest_data():
    sc = SimScenario.reference(n_subjects=400, seed=5)
    cohort, truth = generate_cohort(sc)
    return sc, cohort, truth


@pytest.fixture(scope="session")
def modest_fit(modest_data):
    sc, cohort, _ = modest_data
    return fit_model(cohort, sc.spec, FitConfig())


@pytest.fixture(scope="session")
def exponential_spec():
    return ModelSpec.from_terms(["los"], family="exponential")
