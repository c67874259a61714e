"""Problem presets, control schedules, and their serialization."""

import json

import numpy as np
import pytest

from qpmp.problems import (
    PRESETS,
    ControlSchedule,
    ProblemSpec,
    bloch_vector,
    constant_control,
    control_to_csv,
    hamiltonian_at,
    load_problem,
    make_preparation_problem,
    make_retention_problem,
    problem_from_dict,
    problem_to_dict,
    read_control_csv,
    save_problem,
    step_control,
    zero_control,
)
from qpmp.quantum_core import SIGMA_X, SIGMA_Z, outer


def test_retention_preset_fields():
    spec = make_retention_problem()
    assert spec.gamma == pytest.approx(0.5)
    assert spec.t_f == pytest.approx(0.9 * np.pi)
    assert spec.u_max == 1.0
    assert spec.n_bins == 100
    assert np.allclose(spec.H0, SIGMA_X)
    assert np.allclose(spec.Hu, SIGMA_Z)
    assert np.allclose(spec.L, SIGMA_X)
    assert np.allclose(spec.psi_ini, [1.0, 0.0])
    assert np.allclose(spec.psi_tar, [1.0, 0.0])


def test_retention_x_basis_variant():
    spec = make_retention_problem(x_basis_states=True)
    assert np.allclose(spec.rho_ini,
                       0.5 * (np.eye(2) + SIGMA_X), atol=1e-12)
    assert np.allclose(spec.rho_ini, spec.rho_tar)


def test_preparation_preset_states():
    spec = make_preparation_problem()
    # Boundary states lie in the x-z plane: Bloch vectors
    # (-1, 0, -2)/sqrt(5) and (-1, 0, +2)/sqrt(5).
    r_ini = bloch_vector(outer(spec.psi_ini))
    r_tar = bloch_vector(outer(spec.psi_tar))
    s5 = np.sqrt(5.0)
    assert np.allclose(r_ini, [-1.0 / s5, 0.0, -2.0 / s5], atol=1e-12)
    assert np.allclose(r_tar, [-1.0 / s5, 0.0, 2.0 / s5], atol=1e-12)
    assert np.linalg.norm(spec.psi_ini) == pytest.approx(1.0, abs=1e-12)
    assert np.linalg.norm(spec.psi_tar) == pytest.approx(1.0, abs=1e-12)
    # distinct states: the preparation task is not trivial
    assert abs(np.vdot(spec.psi_ini, spec.psi_tar)) < 0.999


def test_presets_registry():
    assert set(PRESETS) == {"retention", "preparation"}
    assert PRESETS["retention"](n_bins=64).n_bins == 64


def test_spec_validation_errors():
    spec = make_retention_problem()
    bad_h = spec.H0 + 1j * np.eye(2)
    with pytest.raises(ValueError):
        ProblemSpec(H0=bad_h, Hu=spec.Hu, L=spec.L, gamma=spec.gamma,
                    psi_ini=spec.psi_ini, psi_tar=spec.psi_tar,
                    t_f=spec.t_f, n_bins=spec.n_bins, u_max=spec.u_max,
                    name="bad")
    with pytest.raises(ValueError):
        ProblemSpec(H0=spec.H0, Hu=spec.Hu, L=spec.L, gamma=-0.1,
                    psi_ini=spec.psi_ini, psi_tar=spec.psi_tar,
                    t_f=spec.t_f, n_bins=spec.n_bins, u_max=spec.u_max,
                    name="bad")
    with pytest.raises(ValueError):
        ProblemSpec(H0=spec.H0, Hu=spec.Hu, L=spec.L, gamma=spec.gamma,
                    psi_ini=np.array([1.0, 1.0]), psi_tar=spec.psi_tar,
                    t_f=spec.t_f, n_bins=spec.n_bins, u_max=spec.u_max,
                    name="bad")


def test_with_bins_and_dt():
    spec = make_retention_problem()
    fine = spec.with_bins(400)
    assert fine.n_bins == 400
    assert fine.dt == pytest.approx(spec.t_f / 400)
    assert np.allclose(fine.H0, spec.H0)


def test_step_control_shape():
    u = step_control(0.9 * np.pi, 100)
    assert u.values[0] == -1.0
    assert u.values[49] == -1.0
    assert u.values[50] == 1.0
    assert u.values[99] == 1.0
    assert u.t_f == pytest.approx(0.9 * np.pi)


def test_step_control_rejects_odd_bins():
    with pytest.raises(ValueError):
        step_control(1.0, 101)


def test_zero_and_constant_controls():
    z = zero_control(2.0, 10)
    assert np.all(z.values == 0.0)
    c = constant_control(2.0, 10, 0.3)
    assert np.all(c.values == 0.3)
    assert c.dt == pytest.approx(0.2)
    assert np.allclose(c.times, np.arange(10) * 0.2)


def test_control_with_values_keeps_grid():
    u = zero_control(1.0, 4)
    v = u.with_values([1.0, 2.0, 3.0, 4.0])
    assert v.dt == u.dt
    assert np.allclose(v.values, [1, 2, 3, 4])


def test_hamiltonian_at_warns_beyond_bound():
    spec = make_retention_problem()
    H = hamiltonian_at(spec, 0.5)
    assert np.allclose(H, SIGMA_X + 0.5 * SIGMA_Z)
    with pytest.warns(UserWarning):
        hamiltonian_at(spec, 1.5)


def test_bloch_vector_basics():
    assert np.allclose(bloch_vector(0.5 * (np.eye(2) + SIGMA_Z)), [0, 0, 1])
    assert np.allclose(bloch_vector(np.eye(2) / 2), [0, 0, 0])


def test_problem_dict_round_trip_preset():
    spec = make_preparation_problem(n_bins=50)
    d = problem_to_dict(spec)
    back = problem_from_dict(d)
    assert back.n_bins == 50
    assert np.allclose(back.psi_ini, spec.psi_ini)
    assert np.allclose(back.H0, spec.H0)
    assert back.name == spec.name


def test_problem_dict_round_trip_inline():
    spec = make_retention_problem()
    d = problem_to_dict(spec)
    d.pop("preset", None)
    back = problem_from_dict(json.loads(json.dumps(d)))
    assert np.allclose(back.L, spec.L)
    assert back.gamma == pytest.approx(spec.gamma)


def test_problem_file_round_trip(tmp_path):
    spec = make_retention_problem(n_bins=32)
    p = tmp_path / "problem.json"
    save_problem(spec, p)
    back = load_problem(p)
    assert back.n_bins == 32
    assert np.allclose(back.Hu, spec.Hu)


def test_control_csv_round_trip():
    rng = np.random.default_rng(0)
    u = ControlSchedule(values=rng.uniform(-1, 1, 25), dt=0.11)
    text = control_to_csv(u)
    back = read_control_csv(text)
    assert np.array_equal(back.values, u.values)
    assert back.dt == u.dt
    assert control_to_csv(back) == text
    assert text.endswith("\n") and "\r" not in text


def test_control_csv_rejects_bad_input():
    with pytest.raises(ValueError):
        read_control_csv("a,b\n1,2\n")
    with pytest.raises(ValueError):
        read_control_csv("t,u\n0,1\n")
    with pytest.raises(ValueError):
        read_control_csv("t,u\n0,1\n0.1,1\n0.3,1\n")
