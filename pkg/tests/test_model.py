import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

from conftest import nominal_params, random_params
from quartzion.model import (
    DriveVector,
    ModelParams,
    MomentVector,
    SingularModeError,
    build_evolution_matrix,
    driven_steady_state,
    moment_trajectory,
    noise_matrix,
    propagate_moments,
    propagator,
    wrap_phase,
)

TP = 2 * math.pi


def test_block_structure_and_entries(nominal):
    E = build_evolution_matrix(nominal)
    M = E.M
    assert np.all(M[:2, 2:] == 0) and np.all(M[2:, :2] == 0)
    assert M[0, 0] == pytest.approx(0.5 * nominal.gamma_ion + 1j * nominal.detuning_ion)
    assert M[1, 1] == pytest.approx(0.5 * nominal.gamma_q + 1j * nominal.detuning_q)
    assert M[0, 1] == pytest.approx(1j * nominal.g.conjugate())
    assert M[1, 0] == pytest.approx(1j * nominal.g)
    assert np.array_equal(M[2:, 2:], M[:2, :2].conj())


def test_decoupled_eigenvalues():
    p = nominal_params(g_hz=0.0, gamma_ion_hz=3.0)
    lam = sorted(build_evolution_matrix(p).eigenvalues, key=lambda z: z.real)
    assert lam[0] == pytest.approx(0.5 * p.gamma_ion + 1j * p.detuning_ion, abs=1e-12)
    assert lam[1] == pytest.approx(0.5 * p.gamma_q + 1j * p.detuning_q, abs=1e-12)


def test_normal_mode_splitting():
    p = nominal_params(nu_ion_offset=1.0, nu_q_offset=1.0, gamma_ion_hz=20.0, gamma_q_hz=20.0, g_hz=3.0)
    E = build_evolution_matrix(p)
    gam = p.gamma_q
    expected = sorted([gam / 2 + 1j * (p.detuning_q - abs(p.g)), gam / 2 + 1j * (p.detuning_q + abs(p.g))],
                      key=lambda z: z.imag)
    got = sorted(E.eigenvalues, key=lambda z: z.imag)
    numeric = sorted(np.linalg.eigvals(E.m), key=lambda z: z.imag)
    for e, g, n in zip(expected, got, numeric):
        assert g == pytest.approx(e, rel=1e-12)
        assert n == pytest.approx(e, rel=1e-10)


def test_propagator_identity_and_expm(rng):
    for _ in range(10):
        p = random_params(rng)
        E = build_evolution_matrix(p)
        assert np.allclose(propagator(E, 0.0), np.eye(4), atol=1e-15)
        for t in (1e-4, 3e-3, 0.05):
            ref = expm(-E.M * t)
            assert np.abs(propagator(E, t) - ref).max() <= 1e-12 * np.abs(ref).max()


def test_frozen_decoupled_ion():
    p = nominal_params(g_hz=0.0, gamma_ion_hz=0.0, nu_ion_offset=0.0)
    E = build_evolution_matrix(p)
    for t in (0.0, 0.1, 10.0):
        assert propagator(E, t)[0, 0] == pytest.approx(1.0, abs=1e-15)


def test_semigroup_representative(nominal):
    E = build_evolution_matrix(nominal)
    lhs = propagator(E, 0.7e-3) @ propagator(E, 0.3e-3)
    assert np.abs(lhs - propagator(E, 1.0e-3)).max() < 1e-10


def test_defective_block_uses_series_and_matches_expm():
    # equal diagonal entries and g chosen so the discriminant vanishes
    gam = 10.0
    p = ModelParams(omega_ion=1e3, omega_q=1e3, omega_rf=1e3, gamma_ion=gam + 4.0,
                    gamma_q=gam, g=1.0j, n_ion=0, n_q=0)
    E = build_evolution_matrix(p)
    assert E.method == "series"
    for t in (0.01, 0.3, 2.0):
        ref = expm(-E.M * t)
        assert np.abs(propagator(E, t) - ref).max() < 1e-10 * np.abs(ref).max()


def test_negative_time_rejected(nominal):
    with pytest.raises(ValueError):
        propagator(build_evolution_matrix(nominal), -1.0)


def test_driven_steady_state_fixed_point(rng):
    for _ in range(10):
        p = random_params(rng, driven=True)
        E = build_evolution_matrix(p)
        F = DriveVector.from_params(p)
        A = driven_steady_state(E, F).as_array()
        assert np.linalg.norm(E.M @ A - F.F) < 1e-12 * np.linalg.norm(F.F)
        # the fixed point does not move
        At = propagate_moments(E, MomentVector.from_array(A), F, 0.37).as_array()
        assert np.allclose(At, A, rtol=1e-12, atol=0)


def test_steady_state_decoupled_scalar():
    p = nominal_params(g_hz=0.0, gamma_ion_hz=5.0, nu_ion_offset=0.0, f_ion=7.0)
    E = build_evolution_matrix(p)
    A = driven_steady_state(E, DriveVector.from_params(p))
    assert A.a == pytest.approx(7.0 / (0.5 * p.gamma_ion), rel=1e-14)


def test_steady_state_zero_drive(nominal):
    A = driven_steady_state(build_evolution_matrix(nominal), DriveVector.zero())
    assert A == MomentVector.zero()


def test_singular_drift_matrix():
    p = nominal_params(g_hz=0.0, gamma_ion_hz=0.0, nu_ion_offset=0.0, f_ion=1.0)
    with pytest.raises(SingularModeError, match="ion"):
        driven_steady_state(build_evolution_matrix(p), DriveVector.from_params(p))


def test_steady_state_lorentzian_response():
    # |A_F| of a single driven mode follows 1 / |i detuning + gamma / 2|
    nu = np.linspace(-200, 200, 401)
    resp = []
    for off in nu:
        p = nominal_params(g_hz=0.0, gamma_ion_hz=5.0, nu_ion_offset=off, nu_q_offset=off + 1e3, f_ion=1.0)
        resp.append(abs(driven_steady_state(build_evolution_matrix(p), DriveVector.from_params(p)).a))
    resp = np.array(resp)
    expected = 1.0 / np.abs(1j * TP * nu + 0.5 * TP * 5.0)
    assert np.allclose(resp, expected, rtol=1e-12)
    assert abs(nu[np.argmax(resp)]) < 1.0


def test_free_decay_to_zero(nominal, ringing_state):
    p = nominal_params(gamma_ion_hz=20.0)
    E = build_evolution_matrix(p)
    A = propagate_moments(E, ringing_state, None, 5.0).as_array()
    assert np.abs(A).max() < 1e-20 * 1e7


def test_trajectory_matches_pointwise(nominal, ringing_state):
    E = build_evolution_matrix(nominal)
    ts = np.linspace(0, 0.1, 7)
    traj = moment_trajectory(E, ringing_state, None, ts)
    for t, row in zip(ts, traj):
        assert np.allclose(row, propagate_moments(E, ringing_state, None, t).as_array(), rtol=1e-14)


@settings(max_examples=50, deadline=None)
@given(a=st.complex_numbers(max_magnitude=1e6, allow_nan=False, allow_infinity=False),
       b=st.complex_numbers(max_magnitude=1e6, allow_nan=False, allow_infinity=False),
       t=st.floats(0, 1.0), seed=st.integers(0, 2**32 - 1))
def test_conjugate_pairing_preserved(a, b, t, seed):
    p = random_params(np.random.default_rng(seed), driven=True)
    E = build_evolution_matrix(p)
    A = propagate_moments(E, MomentVector.physical(a, b), DriveVector.from_params(p), t)
    x = A.as_array()
    scale = max(1.0, np.abs(x).max())
    assert abs(x[2] - x[0].conjugate()) <= 1e-12 * scale
    assert abs(x[3] - x[1].conjugate()) <= 1e-12 * scale


@given(seed=st.integers(0, 2**32 - 1))
def test_eigenvalue_stability(seed):
    p = random_params(np.random.default_rng(seed))
    lam = build_evolution_matrix(p).eigenvalues
    assert np.all(lam.real >= 0.5 * min(p.gamma_ion, p.gamma_q) * (1 - 1e-12))


def _fock_ops(dim=4):
    a1 = np.diag(np.sqrt(np.arange(1, dim)), 1)
    eye = np.eye(dim)
    a = np.kron(a1, eye)
    b = np.kron(eye, a1)
    return a, b


def test_noise_matrix_from_commutators(rng):
    # C_mn = sum over baths gamma (n [L, A_m][A_n, L+] + (n+1) [L+, A_m][A_n, L]),
    # evaluated with explicit Fock-space operators in the vacuum
    a, b = _fock_ops()
    ops = [a, b, a.conj().T, b.conj().T]

    def comm(x, y):
        return x @ y - y @ x

    vac = np.zeros(a.shape[0])
    vac[0] = 1.0
    for _ in range(5):
        p = random_params(rng)
        C = np.zeros((4, 4))
        for L, gam, n in ((b, p.gamma_q, p.n_q), (a, p.gamma_ion, p.n_ion)):
            Ld = L.conj().T
            for m in range(4):
                for k in range(4):
                    term = n * comm(L, ops[m]) @ comm(ops[k], Ld) + (n + 1) * comm(Ld, ops[m]) @ comm(ops[k], L)
                    C[m, k] += gam * (vac @ term @ vac).real
        assert np.allclose(noise_matrix(p), C, rtol=1e-14, atol=0)


def test_noise_matrix_limits():
    C = noise_matrix(nominal_params(gamma_ion_hz=0.0))
    assert C[0, 2] == 0 and C[2, 0] == 0 and C[1, 3] > 0
    C = noise_matrix(nominal_params(gamma_ion_hz=2.0, n_ion=0.0, n_q=0.0))
    assert C[2, 0] == 0 and C[3, 1] == 0 and C[0, 2] > 0 and C[1, 3] > 0
    assert np.all(C >= 0)


def test_params_validation():
    with pytest.raises(ValueError):
        nominal_params(gamma_q_hz=0.0)
    with pytest.raises(ValueError):
        nominal_params(gamma_ion_hz=-1.0)
    with pytest.raises(ValueError):
        nominal_params(n_q=-1.0)


def test_polar_accessors():
    A = MomentVector.from_polar(3.0, 0.4, 2.0, -0.5)
    assert A.a_abs == pytest.approx(3.0) and A.b_abs == pytest.approx(2.0)
    assert A.delta == pytest.approx(0.9)
    assert A.is_physical


@given(st.floats(-100, 100))
def test_wrap_phase_range(x):
    y = wrap_phase(x)
    assert -math.pi < y <= math.pi
    assert math.isclose(math.cos(y), math.cos(x), abs_tol=1e-9)
