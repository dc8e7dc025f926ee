"""Simulation scenarios shared by the stepwise tests and the acceptance suite."""
from __future__ import annotations

from frailrisk.simulate import CovariateGenerator, SimScenario


def stepwise_scenario(seed: int, n_subjects: int = 500) -> SimScenario:
    """One true effect ``x`` (beta 1) plus three independent noise covariates."""
    return SimScenario(
        beta={"(Intercept)": -3.0, "x": 1.0},
        omega=0.0,
        sigma_u=1.0,
        n_subjects=n_subjects,
        covariates=(
            CovariateGenerator("x", "normal"),
            CovariateGenerator("noise1", "normal"),
            CovariateGenerator("noise2", "normal"),
            CovariateGenerator("noise3", "normal"),
        ),
        terms=("x",),
        max_spells=3,
        seed=seed,
    )


CANDIDATES = ("x", "noise1", "noise2", "noise3")
