"""Shared fixtures: converged reference controls are expensive to produce,
so the stationarity checks share one session-scoped copy per problem."""

import pytest

from qpmp.optimizer import polish_control, reference_control, refine_control
from qpmp.problems import make_preparation_problem, make_retention_problem


def _converged(spec, n_final):
    u = reference_control(spec)
    spec, u = refine_control(spec, u, n_final)
    u = polish_control(spec, u, block=150, max_blocks=12, spread_tol=3e-4)
    return spec, u


@pytest.fixture(scope="session")
def retention_converged():
    """Retention problem and its converged control on a refined grid."""
    return _converged(make_retention_problem(), 400)


@pytest.fixture(scope="session")
def preparation_converged():
    """Preparation problem and its converged control on a refined grid.

    The stationary preparation control switches between opposite bangs, and
    the c-Hamiltonian picks up a bin-width-sized deviation at each pinned
    switch, so this problem needs a finer grid than the retention one for
    the constancy check.
    """
    return _converged(make_preparation_problem(), 3200)
