"""Algebra helpers: identities, predicates, serialization."""

import numpy as np
import pytest

from qpmp.quantum_core import (
    IDENTITY_2,
    SIGMA_X,
    SIGMA_Y,
    SIGMA_Z,
    adjoint_dissipator,
    anticommutator,
    as_operator,
    as_state,
    commutator,
    complex_from_json,
    complex_to_json,
    dag,
    dissipator,
    expectation_form,
    format_real,
    has_unit_trace,
    is_hermitian,
    is_psd,
    outer,
    overlap,
    require_finite,
)


def random_operator(rng, d=2):
    return rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))


def random_hermitian(rng, d=2):
    a = random_operator(rng, d)
    return a + dag(a)


def test_pauli_algebra():
    assert np.allclose(SIGMA_X @ SIGMA_X, IDENTITY_2)
    assert np.allclose(SIGMA_Y @ SIGMA_Y, IDENTITY_2)
    assert np.allclose(SIGMA_Z @ SIGMA_Z, IDENTITY_2)
    assert np.allclose(commutator(SIGMA_X, SIGMA_Y), 2j * SIGMA_Z)
    assert np.allclose(anticommutator(SIGMA_X, SIGMA_Y), np.zeros((2, 2)))


def test_as_operator_rejects_non_square():
    with pytest.raises(ValueError):
        as_operator(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        as_operator(np.zeros(4))


def test_as_state_rejects_matrices():
    with pytest.raises(ValueError):
        as_state(np.zeros((2, 2)))


def test_outer_projector():
    v = np.array([1.0, 1j]) / np.sqrt(2)
    p = outer(v)
    assert np.allclose(p, dag(p))
    assert np.allclose(p @ p, p)
    assert abs(np.trace(p) - 1.0) < 1e-15


def test_predicates():
    rng = np.random.default_rng(7)
    h = random_hermitian(rng)
    assert is_hermitian(h)
    assert not is_hermitian(h + 1e-6 * 1j * np.eye(2))
    assert is_psd(h @ dag(h) + np.eye(2) * 1e-3)
    assert not is_psd(-np.eye(2))
    assert has_unit_trace(np.diag([0.25, 0.75]).astype(complex))
    assert not has_unit_trace(np.eye(2))


def test_dissipator_traceless():
    rng = np.random.default_rng(3)
    for _ in range(20):
        L = random_operator(rng)
        rho = random_hermitian(rng)
        assert abs(np.trace(dissipator(L, rho))) < 1e-12


def test_adjoint_dissipator_duality():
    # Tr[lam D(rho)] = Tr[D^+(lam) rho] for any lam, rho: the costate
    # generator is the exact adjoint of the state generator.
    rng = np.random.default_rng(4)
    for _ in range(20):
        L = random_operator(rng)
        rho = random_operator(rng)
        lam = random_operator(rng)
        lhs = np.trace(lam @ dissipator(L, rho))
        rhs = np.trace(adjoint_dissipator(L, lam) @ rho)
        assert abs(lhs - rhs) < 1e-10


def test_adjoint_dissipator_unital():
    rng = np.random.default_rng(5)
    for _ in range(20):
        L = random_operator(rng)
        assert np.abs(adjoint_dissipator(L, np.eye(2, dtype=complex))).max() < 1e-12


def test_overlap_and_expectation_form():
    a = np.array([1.0, 2j])
    b = np.array([3.0, -1j])
    assert overlap(a, b) == pytest.approx(np.vdot(a, b))
    A = np.array([[0, 1], [1j, 0]], dtype=complex)
    assert expectation_form(a, A, b) == pytest.approx(np.vdot(a, A @ b))


def test_require_finite():
    require_finite(np.array([1.0, 2.0]))
    with pytest.raises(FloatingPointError):
        require_finite(np.array([1.0, np.nan]))
    with pytest.raises(FloatingPointError):
        require_finite(np.inf)


def test_format_real_round_trips():
    rng = np.random.default_rng(11)
    for x in rng.normal(size=50) * 10.0 ** rng.integers(-12, 12, size=50):
        assert float(format_real(x)) == x
    assert float(format_real(0.1)) == 0.1


def test_complex_json_round_trip():
    rng = np.random.default_rng(12)
    a = random_operator(rng, 3)
    back = complex_from_json(complex_to_json(a))
    assert np.array_equal(back, a)
