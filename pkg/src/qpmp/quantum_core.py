"""Dense complex-matrix algebra for small Hilbert spaces.

Operators are plain ``numpy`` arrays of shape ``(d, d)`` and state vectors
arrays of shape ``(d,)``, both complex128, in natural units (hbar = 1).
Everything here is a pure function of its inputs; nothing is mutated.

State vectors are *not* assumed normalized: the linear quantum-jump
unraveling does not preserve the norm for general jump operators.
"""

from __future__ import annotations

import numpy as np

# Tolerance for algebraic identities (Hermiticity checks, trace identities).
# Double precision is ample for the dimensions (d <= 8) this package targets.
TOL_ALGEBRA = 1e-12

IDENTITY_2 = np.eye(2, dtype=complex)
SIGMA_X = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=complex)
SIGMA_Y = np.array([[0.0, -1.0j], [1.0j, 0.0]], dtype=complex)
SIGMA_Z = np.array([[1.0, 0.0], [0.0, -1.0]], dtype=complex)


def as_operator(a) -> np.ndarray:
    """Coerce to a square complex matrix (no copy when already one)."""
    a = np.asarray(a, dtype=complex)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
        raise ValueError(f"operator must be a square matrix, got shape {a.shape}")
    return a


def as_state(v) -> np.ndarray:
    """Coerce to a complex vector."""
    v = np.asarray(v, dtype=complex)
    if v.ndim != 1 or v.size < 1:
        raise ValueError(f"state must be a 1-d vector, got shape {v.shape}")
    return v


def _check_same_dim(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")


def dag(a: np.ndarray) -> np.ndarray:
    """Conjugate transpose."""
    return a.conj().T


def outer(ket: np.ndarray, bra: np.ndarray | None = None) -> np.ndarray:
    """|ket><bra| (defaults to |ket><ket|)."""
    if bra is None:
        bra = ket
    return np.outer(ket, bra.conj())


def is_hermitian(a: np.ndarray, tol: float = TOL_ALGEBRA) -> bool:
    a = as_operator(a)
    return bool(np.max(np.abs(a - dag(a))) <= tol)


def is_psd(a: np.ndarray, tol: float = TOL_ALGEBRA) -> bool:
    """Positive semidefinite up to -tol on the smallest eigenvalue."""
    a = as_operator(a)
    if not is_hermitian(a, max(tol, TOL_ALGEBRA)):
        return False
    return bool(np.linalg.eigvalsh(a).min() >= -tol)


def has_unit_trace(a: np.ndarray, tol: float = TOL_ALGEBRA) -> bool:
    a = as_operator(a)
    return bool(abs(np.trace(a) - 1.0) <= tol)


def commutator(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """ab - ba."""
    a, b = as_operator(a), as_operator(b)
    _check_same_dim(a, b)
    return a @ b - b @ a


def anticommutator(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """ab + ba."""
    a, b = as_operator(a), as_operator(b)
    _check_same_dim(a, b)
    return a @ b + b @ a


def dissipator(L: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """Lindblad dissipator L rho L^dag - (1/2){L^dag L, rho}.

    Traceless for Hermitian rho; the rate (gamma) is applied by callers.
    """
    L, rho = as_operator(L), as_operator(rho)
    _check_same_dim(L, rho)
    LdL = dag(L) @ L
    return L @ rho @ dag(L) - 0.5 * (LdL @ rho + rho @ LdL)


def adjoint_dissipator(L: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Adjoint (Heisenberg-picture) dissipator L^dag lam L - (1/2){L^dag L, lam}.

    This is the generator appearing in the costate equation; the minus sign
    and the rate are applied by the propagator.  It annihilates the identity
    for any L (unitality), which is the dual statement of trace preservation.
    """
    L, lam = as_operator(L), as_operator(lam)
    _check_same_dim(L, lam)
    LdL = dag(L) @ L
    return dag(L) @ lam @ L - 0.5 * (LdL @ lam + lam @ LdL)


def overlap(a: np.ndarray, b: np.ndarray) -> complex:
    """Inner product <a|b>, conjugate-linear in the first argument."""
    a, b = as_state(a), as_state(b)
    _check_same_dim(a, b)
    return complex(np.vdot(a, b))


def expectation_form(pi: np.ndarray, A: np.ndarray, psi: np.ndarray) -> complex:
    """Matrix element <pi|A|psi>; callers take Im or Re parts as needed."""
    pi, psi = as_state(pi), as_state(psi)
    A = as_operator(A)
    _check_same_dim(pi, A)
    _check_same_dim(A, psi)
    return complex(np.vdot(pi, A @ psi))


def require_finite(x, what: str = "value"):
    """Raise if x contains NaN or Inf; returns x unchanged."""
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite {what}")
    return x


def format_real(x) -> str:
    """17 significant digits, enough for float64 text round trips."""
    return f"{float(x):.17g}"


# ---------------------------------------------------------------------------
# JSON serialization: complex arrays as nested [re, im] pairs.
# ---------------------------------------------------------------------------

def complex_to_json(a: np.ndarray):
    """Nested lists with innermost [re, im] pairs; works for vectors and matrices."""
    a = np.asarray(a, dtype=complex)
    return np.stack([a.real, a.imag], axis=-1).tolist()


def complex_from_json(data) -> np.ndarray:
    """Inverse of :func:`complex_to_json`."""
    arr = np.asarray(data, dtype=float)
    if arr.shape[-1] != 2:
        raise ValueError("expected innermost [re, im] pairs")
    return arr[..., 0] + 1j * arr[..., 1]


def operator_to_json(a: np.ndarray):
    return complex_to_json(as_operator(a))


def operator_from_json(data) -> np.ndarray:
    return as_operator(complex_from_json(data))


def state_to_json(v: np.ndarray):
    return complex_to_json(as_state(v))


def state_from_json(data) -> np.ndarray:
    return as_state(complex_from_json(data))
