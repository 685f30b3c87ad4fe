"""Shared fixtures: simulated trials reused across test modules."""

import pytest

from recurrent_ipw.simulate import SimConfig, simulate_trial


@pytest.fixture(scope="session")
def small_trial():
    """A 120-subject scenario-1 trial with a handful of switchers."""
    return simulate_trial(SimConfig(n_subjects=120, scenario=1, seed=11))


@pytest.fixture(scope="session")
def big_trial():
    """A full-size scenario-1 trial for the statistical band checks."""
    return simulate_trial(SimConfig(n_subjects=2000, scenario=1, seed=3))
