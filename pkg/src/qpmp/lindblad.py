"""Deterministic engine: density-matrix and costate propagation on a grid.

The master equation

    drho/dt = -i[H(t), rho] + gamma*(L rho L^+ - (1/2){L^+L, rho})

is integrated per control bin with the exact exponential of the vectorized
(row-major) Liouvillian, so the only discretization is the piecewise-constant
control itself.  The costate obeys the adjoint equation

    dlam/dt = -i[H(t), lam] - gamma*(L^+ lam L - (1/2){L^+L, lam})

backward from a terminal boundary.  One backward step equals the conjugate
transpose of the forward step, which makes Tr[lam(t) rho(t)] exactly
conserved and ties the switching function

    Phi(t) = Im Tr[lam [Hu, rho]]

to the gradient of the terminal cost with respect to the bin controls.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.linalg import expm

from .problems import ControlSchedule, ProblemSpec
from .quantum_core import (
    TOL_ALGEBRA,
    as_operator,
    dag,
    format_real,
    is_hermitian,
    require_finite,
)

CONVENTIONS = ("midpoint", "left")


@dataclass(frozen=True)
class OperatorPath:
    """Hermitian-operator-valued path on the grid nodes.

    ``ops[i]`` lives at ``times[i]``; ``mid_ops[i]``, when present, is the
    value at the center of bin i and feeds the midpoint sampling convention.
    """

    times: np.ndarray
    ops: np.ndarray
    mid_ops: np.ndarray | None = None
    kind: str = "generic"

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        ops = np.asarray(self.ops, dtype=complex)
        if times.ndim != 1 or times.size < 2:
            raise ValueError("path needs at least two grid nodes")
        if ops.shape != (times.size, ops.shape[1], ops.shape[1]):
            raise ValueError("ops must be a stack of square matrices, one per node")
        require_finite(ops, "path operators")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "ops", ops)
        if self.mid_ops is not None:
            mids = np.asarray(self.mid_ops, dtype=complex)
            if mids.shape != (times.size - 1, ops.shape[1], ops.shape[1]):
                raise ValueError("mid_ops must hold one matrix per bin")
            require_finite(mids, "path midpoint operators")
            object.__setattr__(self, "mid_ops", mids)

    @property
    def n_bins(self) -> int:
        return self.times.size - 1

    @property
    def dim(self) -> int:
        return self.ops.shape[1]

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])


@dataclass(frozen=True)
class SwitchingCurve:
    """Per-bin real scalar curve (switching function or c-Hamiltonian).

    ``convention`` records where within each bin the value was sampled:
    "midpoint" (times at bin centers) or "left" (times at left edges).
    """

    times: np.ndarray
    values: np.ndarray
    convention: str = "midpoint"

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if times.ndim != 1 or values.shape != times.shape:
            raise ValueError("times and values must be matching 1-d arrays")
        if self.convention not in CONVENTIONS:
            raise ValueError(f"convention must be one of {CONVENTIONS}")
        require_finite(values, "curve values")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @property
    def n_bins(self) -> int:
        return self.times.size


def validate_state_path(path: OperatorPath, tol_trace: float = 1e-9,
                        tol_psd: float = 1e-9) -> None:
    """Raise if any node violates Hermiticity, unit trace, or positivity."""
    for i, op in enumerate(path.ops):
        if not is_hermitian(op, TOL_ALGEBRA):
            raise ValueError(f"state at node {i} is not Hermitian")
        if abs(np.trace(op).real - 1.0) > tol_trace:
            raise ValueError(f"state at node {i} trace drift exceeds {tol_trace}")
        if np.linalg.eigvalsh(op).min() < -tol_psd:
            raise ValueError(f"state at node {i} has eigenvalue below -{tol_psd}")


def validate_costate_path(path: OperatorPath, tol_psd: float = 1e-9) -> None:
    """For a costate started from minus a projector, -lam(t) stays PSD."""
    for i, op in enumerate(path.ops):
        if not is_hermitian(op, TOL_ALGEBRA):
            raise ValueError(f"costate at node {i} is not Hermitian")
        if np.linalg.eigvalsh(-op).min() < -tol_psd:
            raise ValueError(f"-costate at node {i} has eigenvalue below -{tol_psd}")


def liouvillian(H: np.ndarray, L: np.ndarray, gamma: float) -> np.ndarray:
    """Vectorized generator M with vec(drho/dt) = M vec(rho), row-major vec."""
    H = as_operator(H)
    L = as_operator(L)
    d = H.shape[0]
    eye = np.eye(d)
    M = -1j * (np.kron(H, eye) - np.kron(eye, H.T))
    if gamma != 0.0:
        LdL = dag(L) @ L
        M = M + gamma * (np.kron(L, L.conj())
                         - 0.5 * (np.kron(LdL, eye) + np.kron(eye, LdL.T)))
    return M


def _check_grid(spec: ProblemSpec, u: ControlSchedule) -> None:
    if u.n_bins != spec.n_bins:
        raise ValueError(f"control has {u.n_bins} bins, problem expects "
                         f"{spec.n_bins}")
    if abs(u.t_f - spec.t_f) > 1e-9 * max(1.0, spec.t_f):
        raise ValueError("control horizon does not match the problem")


# Cross-call memo for per-bin propagators; one optimizer iteration asks for
# the same control three times (state, costate, cost), this makes the second
# and third lookups free.  Keyed by value bytes, capped to bound memory.
_HALF_MEMO: "OrderedDict[tuple, np.ndarray]" = OrderedDict()
_HALF_MEMO_SLOTS = 4


def _spec_key(spec: ProblemSpec) -> tuple:
    return (spec.H0.tobytes(), spec.Hu.tobytes(), spec.L.tobytes(),
            float(spec.gamma), float(spec.t_f), spec.n_bins)


def _half_propagators(spec: ProblemSpec, u: ControlSchedule,
                      substeps: int = 1) -> np.ndarray:
    """Per-bin expm(M(u_i)*dt/2); a full bin step is the square.

    ``substeps`` assembles the same half step as expm(M*dt/(2*s))^s; the
    exponential is exact either way, the knob exists for convergence checks.
    """
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    key = (_spec_key(spec), u.values.tobytes(), float(u.dt), substeps)
    hit = _HALF_MEMO.get(key)
    if hit is not None:
        _HALF_MEMO.move_to_end(key)
        return hit
    vals, inverse = np.unique(u.values, return_inverse=True)
    d2 = spec.dim * spec.dim
    mats = np.empty((vals.size, d2, d2), dtype=complex)
    for j, vj in enumerate(vals):
        H = spec.H0 + vj * spec.Hu
        mats[j] = liouvillian(H, spec.L, spec.gamma)
    base = expm(mats * (u.dt / (2.0 * substeps)))
    if substeps > 1:
        base = np.linalg.matrix_power(base, substeps)
    halves = base[inverse]
    _HALF_MEMO[key] = halves
    while len(_HALF_MEMO) > _HALF_MEMO_SLOTS:
        _HALF_MEMO.popitem(last=False)
    return halves


def propagate_rho(spec: ProblemSpec, u: ControlSchedule,
                  substeps: int = 1) -> OperatorPath:
    """Forward path of the density matrix from |psi_ini><psi_ini|."""
    _check_grid(spec, u)
    halves = _half_propagators(spec, u, substeps)
    d = spec.dim
    m = u.n_bins
    ops = np.empty((m + 1, d, d), dtype=complex)
    mids = np.empty((m, d, d), dtype=complex)
    ops[0] = spec.rho_ini
    v = spec.rho_ini.reshape(-1)
    for i in range(m):
        w = halves[i] @ v
        mids[i] = w.reshape(d, d)
        v = halves[i] @ w
        ops[i + 1] = v.reshape(d, d)
        drift = abs(np.trace(ops[i + 1]).real - 1.0)
        if drift > 1e-10:
            raise RuntimeError(f"trace drift {drift:.3e} at step {i}")
    times = np.arange(m + 1) * u.dt
    return OperatorPath(times=times, ops=ops, mid_ops=mids, kind="state")


def propagate_costate(spec: ProblemSpec, u: ControlSchedule,
                      boundary: np.ndarray | None = None,
                      substeps: int = 1) -> OperatorPath:
    """Backward costate path; ``boundary`` is lam(t_f).

    Defaults to -|psi_tar><psi_tar|, the terminal-cost derivative.  Each
    backward step applies the conjugate transpose of the forward bin step,
    the exact adjoint of the forward flow.
    """
    _check_grid(spec, u)
    if boundary is None:
        boundary = -spec.rho_tar
    boundary = as_operator(boundary)
    if boundary.shape[0] != spec.dim:
        raise ValueError("boundary dimension does not match the problem")
    if not is_hermitian(boundary, TOL_ALGEBRA):
        raise ValueError("costate boundary must be Hermitian")
    halves = _half_propagators(spec, u, substeps)
    d = spec.dim
    m = u.n_bins
    ops = np.empty((m + 1, d, d), dtype=complex)
    mids = np.empty((m, d, d), dtype=complex)
    ops[m] = boundary
    v = boundary.reshape(-1)
    for i in reversed(range(m)):
        back_half = halves[i].conj().T
        w = back_half @ v
        mids[i] = w.reshape(d, d)
        v = back_half @ w
        ops[i] = v.reshape(d, d)
    times = np.arange(m + 1) * u.dt
    return OperatorPath(times=times, ops=ops, mid_ops=mids, kind="costate")


def _bin_samples(rho_path: OperatorPath, lam_path: OperatorPath,
                 convention: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if not np.allclose(rho_path.times, lam_path.times, atol=1e-12):
        raise ValueError("state and costate paths use different grids")
    if convention == "midpoint":
        if rho_path.mid_ops is None or lam_path.mid_ops is None:
            raise ValueError("midpoint convention needs mid-bin operators")
        times = rho_path.times[:-1] + 0.5 * rho_path.dt
        return rho_path.mid_ops, lam_path.mid_ops, times
    if convention == "left":
        return rho_path.ops[:-1], lam_path.ops[:-1], rho_path.times[:-1]
    raise ValueError(f"convention must be one of {CONVENTIONS}")


def switching_function(rho_path: OperatorPath, lam_path: OperatorPath,
                       Hu: np.ndarray,
                       convention: str = "midpoint") -> SwitchingCurve:
    """Phi per bin: Im Tr[lam [Hu, rho]] at the sampled point of each bin.

    The midpoint convention matches the central-difference cost gradient to
    O(dt^2); the left convention matches the stochastic estimators, which
    sample states at the left node of each bin.
    """
    Hu = as_operator(Hu)
    rhos, lams, times = _bin_samples(rho_path, lam_path, convention)
    comm = np.einsum("ij,njk->nik", Hu, rhos) - np.einsum("nij,jk->nik", rhos, Hu)
    values = np.einsum("nij,nji->n", lams, comm).imag
    return SwitchingCurve(times=times, values=values, convention=convention)


def c_hamiltonian(rho_path: OperatorPath, lam_path: OperatorPath,
                  spec: ProblemSpec, u: ControlSchedule,
                  convention: str = "midpoint",
                  form: str = "rho") -> SwitchingCurve:
    """Pontryagin scalar Tr[lam drho/dt] per bin; constant on an optimum.

    ``form`` picks the trace arrangement: "rho" evaluates
    Im Tr[lam [H, rho]] + gamma Re Tr[lam (L rho L^+ - (1/2){L^+L, rho})],
    "lambda" the cyclically equivalent form with the operators moved onto
    the costate.  Both agree to rounding; having the pair is a cheap check.
    """
    _check_grid(spec, u)
    rhos, lams, times = _bin_samples(rho_path, lam_path, convention)
    H = spec.H0[None, :, :] + u.values[:, None, None] * spec.Hu[None, :, :]
    L = spec.L
    LdL = dag(L) @ L
    if form == "rho":
        comm = H @ rhos - rhos @ H
        unitary = np.einsum("nij,nji->n", lams, comm).imag
        diss = (np.einsum("ij,njk,kl->nil", L, rhos, dag(L))
                - 0.5 * (np.einsum("ij,njk->nik", LdL, rhos)
                         + np.einsum("nij,jk->nik", rhos, LdL)))
        dissipative = np.einsum("nij,nji->n", lams, diss).real
    elif form == "lambda":
        comm = H @ lams - lams @ H
        unitary = -np.einsum("nij,nji->n", rhos, comm).imag
        diss = (np.einsum("ij,njk,kl->nil", dag(L), lams, L)
                - 0.5 * (np.einsum("ij,njk->nik", LdL, lams)
                         + np.einsum("nij,jk->nik", lams, LdL)))
        dissipative = np.einsum("nij,nji->n", rhos, diss).real
    else:
        raise ValueError("form must be 'rho' or 'lambda'")
    values = unitary + spec.gamma * dissipative
    return SwitchingCurve(times=times, values=values, convention=convention)


def terminal_cost(rho_final: np.ndarray, psi_tar: np.ndarray) -> float:
    """-<psi_tar| rho(t_f) |psi_tar>, in [-1, 0] for density matrices."""
    rho_final = as_operator(rho_final)
    if not is_hermitian(rho_final, TOL_ALGEBRA):
        raise ValueError("terminal state must be Hermitian")
    psi_tar = np.asarray(psi_tar, dtype=complex).reshape(-1)
    return float(-np.vdot(psi_tar, rho_final @ psi_tar).real)


def cost_of_control(spec: ProblemSpec, u: ControlSchedule,
                    substeps: int = 1) -> float:
    """Terminal cost of one forward propagation."""
    path = propagate_rho(spec, u, substeps)
    return terminal_cost(path.ops[-1], spec.psi_tar)


def conserved_pairing(rho_path: OperatorPath, lam_path: OperatorPath) -> np.ndarray:
    """Tr[lam(t) rho(t)] per node; constant under the dual propagations."""
    if not np.allclose(rho_path.times, lam_path.times, atol=1e-12):
        raise ValueError("state and costate paths use different grids")
    return np.einsum("nij,nji->n", lam_path.ops, rho_path.ops).real


def finite_difference_gradient(spec: ProblemSpec, u: ControlSchedule,
                               bin_index: int, delta: float) -> float:
    """Central difference [C(u + d e_i) - C(u - d e_i)] / (2 d dt).

    Normalizing by dt turns the per-bin cost sensitivity into the density
    that the switching function approximates.
    """
    if not 0 <= bin_index < u.n_bins:
        raise ValueError(f"bin_index {bin_index} out of range")
    if not delta > 0:
        raise ValueError("delta must be positive")
    up = u.values.copy()
    up[bin_index] += delta
    um = u.values.copy()
    um[bin_index] -= delta
    cp = cost_of_control(spec, u.with_values(up))
    cm = cost_of_control(spec, u.with_values(um))
    return (cp - cm) / (2.0 * delta * u.dt)


def finite_difference_curve(spec: ProblemSpec, u: ControlSchedule,
                            delta: float) -> np.ndarray:
    """Central-difference gradient for every bin at once.

    Only the perturbed bin's propagator changes, so the cost difference
    factorizes through the unperturbed state and costate at the bin's
    endpoints; this reuses one base propagation instead of 2*n_bins.
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    _check_grid(spec, u)
    halves = _half_propagators(spec, u)
    d = spec.dim
    m = u.n_bins
    fwd = np.empty((m + 1, d * d), dtype=complex)
    fwd[0] = spec.rho_ini.reshape(-1)
    for i in range(m):
        fwd[i + 1] = halves[i] @ (halves[i] @ fwd[i])
    bwd = np.empty((m + 1, d * d), dtype=complex)
    bwd[m] = (-spec.rho_tar).reshape(-1)
    for i in reversed(range(m)):
        back_half = halves[i].conj().T
        bwd[i] = back_half @ (back_half @ bwd[i + 1])
    cache: dict[float, np.ndarray] = {}

    def full_step(ui: float) -> np.ndarray:
        key = float(ui)
        if key not in cache:
            M = liouvillian(spec.H0 + ui * spec.Hu, spec.L, spec.gamma)
            cache[key] = expm(M * u.dt)
        return cache[key]

    grad = np.empty(m)
    for i in range(m):
        cp = np.vdot(bwd[i + 1], full_step(u.values[i] + delta) @ fwd[i]).real
        cm = np.vdot(bwd[i + 1], full_step(u.values[i] - delta) @ fwd[i]).real
        grad[i] = (cp - cm) / (2.0 * delta * u.dt)
    return grad


class BangResult(NamedTuple):
    control: ControlSchedule
    singular: np.ndarray


def bang_from_phi(phi: SwitchingCurve, threshold: float | None = None,
                  previous: np.ndarray | float | None = None,
                  u_max: float = 1.0, dt: float | None = None) -> BangResult:
    """-u_max*sign(Phi) where |Phi| clears the threshold; rest flagged singular.

    ``threshold`` is absolute; None means 1e-3 of max|Phi|.  Singular bins
    keep ``previous`` (scalar or per-bin array, default 0).  Diagnostic
    only; the optimizer never calls this.
    """
    if threshold is not None and threshold < 0:
        raise ValueError("threshold must be >= 0")
    values = phi.values
    if threshold is None:
        threshold = 1e-3 * float(np.max(np.abs(values), initial=0.0))
    singular = np.abs(values) <= threshold
    if previous is None:
        base = np.zeros(values.size)
    else:
        base = np.broadcast_to(np.asarray(previous, dtype=float),
                               values.shape).copy()
    out = np.where(singular, base, -u_max * np.sign(values))
    if dt is None:
        dt = float(phi.times[1] - phi.times[0]) if phi.times.size > 1 else 1.0
    return BangResult(ControlSchedule(values=out, dt=dt), singular)


# ---------------------------------------------------------------------------
# CSV round trip.  Paths: t, re_00, im_00, re_01, ... row per node.
# Curves: t, phi.  17 significant digits so reads reproduce the floats.
# ---------------------------------------------------------------------------

def path_to_csv(path: OperatorPath) -> str:
    d = path.dim
    cols = ["t"]
    for i in range(d):
        for j in range(d):
            cols += [f"re_{i}{j}", f"im_{i}{j}"]
    lines = [",".join(cols)]
    for t, op in zip(path.times, path.ops):
        row = [format_real(t)]
        for i in range(d):
            for j in range(d):
                row += [format_real(op[i, j].real), format_real(op[i, j].imag)]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def read_path_csv(text: str) -> OperatorPath:
    lines = [ln for ln in text.strip().split("\n") if ln]
    header = lines[0].split(",")
    d2 = (len(header) - 1) // 2
    d = int(round(np.sqrt(d2)))
    if 1 + 2 * d * d != len(header):
        raise ValueError("path CSV header does not describe a square matrix")
    times = []
    ops = []
    for ln in lines[1:]:
        parts = [float(x) for x in ln.split(",")]
        times.append(parts[0])
        flat = np.array(parts[1::2]) + 1j * np.array(parts[2::2])
        ops.append(flat.reshape(d, d))
    return OperatorPath(times=np.array(times), ops=np.array(ops))


def curve_to_csv(curve: SwitchingCurve) -> str:
    lines = ["t,phi"]
    for t, v in zip(curve.times, curve.values):
        lines.append(f"{format_real(t)},{format_real(v)}")
    return "\n".join(lines) + "\n"


def read_curve_csv(text: str, convention: str = "midpoint") -> SwitchingCurve:
    lines = [ln for ln in text.strip().split("\n") if ln]
    if lines[0].split(",")[0] != "t":
        raise ValueError("curve CSV must start with a header row")
    data = np.array([[float(x) for x in ln.split(",")] for ln in lines[1:]])
    return SwitchingCurve(times=data[:, 0], values=data[:, 1],
                          convention=convention)
