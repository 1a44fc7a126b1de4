"""Coupled ion/quartz oscillators in the frame rotating at the drive frequency.

The moment vector is ordered (a, b, a^dagger, b^dagger) and obeys

    d<A>/dt = -M <A> + F,     M = diag(m, m*),

    m = [[gamma_ion/2 + i dw_ion, i g*],
         [i g,                    gamma_q/2 + i dw_q]]

with dw = omega - omega_rf.  Everything here is in rad/s and seconds.
"""

from __future__ import annotations

import cmath
import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import constants
from .trap import QuartzConfig, TrapConfig, coupling_constant, radial_frequencies


class SingularModeError(ArithmeticError):
    """The drift matrix has a zero eigenvalue (undriven, undamped mode)."""


@dataclass(frozen=True)
class ModelParams:
    """Physical parameters of the coupled system.

    Frequencies are absolute (lab frame) in rad/s; the detunings from
    ``omega_rf`` are derived.  ``f_ion``/``f_q`` are effective drive rates
    F/(hbar sqrt 2) in rad/s.
    """

    omega_ion: float
    omega_q: float
    omega_rf: float
    gamma_ion: float
    gamma_q: float
    g: complex
    n_ion: float
    n_q: float
    f_ion: float = 0.0
    f_q: float = 0.0
    phi_ion: float = 0.0
    phi_q: float = 0.0
    v0: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "g", complex(self.g))
        for name in ("omega_ion", "omega_q", "omega_rf", "gamma_ion", "gamma_q",
                     "n_ion", "n_q", "f_ion", "f_q", "phi_ion", "phi_q", "v0"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"ModelParams.{name} must be finite")
        if not (math.isfinite(self.g.real) and math.isfinite(self.g.imag)):
            raise ValueError("ModelParams.g must be finite")
        if not self.gamma_q > 0:
            raise ValueError(f"gamma_q must be > 0, got {self.gamma_q}")
        if self.gamma_ion < 0:
            raise ValueError(f"gamma_ion must be >= 0, got {self.gamma_ion}")
        if self.n_ion < 0 or self.n_q < 0:
            raise ValueError("bath occupations must be >= 0")

    @property
    def detuning_ion(self) -> float:
        return self.omega_ion - self.omega_rf

    @property
    def detuning_q(self) -> float:
        return self.omega_q - self.omega_rf

    def replace(self, **changes) -> "ModelParams":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_offsets(cls, *, nu_rf, nu_ion_offset, nu_q_offset, gamma_ion_hz,
                     gamma_q_hz, g_hz, g_arg=math.pi / 2, n_ion, n_q, v0=1.0,
                     f_ion=0.0, f_q=0.0, phi_ion=0.0, phi_q=0.0) -> "ModelParams":
        """Build from the quantities quoted in Hz: offsets from nu_rf and
        rates/couplings divided by 2 pi."""
        tp = constants.TWO_PI
        return cls(
            omega_ion=tp * (nu_rf + nu_ion_offset),
            omega_q=tp * (nu_rf + nu_q_offset),
            omega_rf=tp * nu_rf,
            gamma_ion=tp * gamma_ion_hz,
            gamma_q=tp * gamma_q_hz,
            g=cmath.rect(tp * g_hz, g_arg),
            n_ion=n_ion, n_q=n_q, v0=v0,
            f_ion=f_ion, f_q=f_q, phi_ion=phi_ion, phi_q=phi_q,
        )


def params_from_configs(trap: TrapConfig, quartz: QuartzConfig, omega_rf: float, *,
                        gamma_ion: float = 0.0, n_ion: float | None = None,
                        coupling_form: str = "exact", exact_occupation: bool = True,
                        **drive) -> ModelParams:
    """ModelParams grounded in a trap and a quartz description.

    omega_ion is the modified-cyclotron frequency, gamma_q = omega_q / Q and
    n_q is the Bose occupation at the quartz temperature (or k_B T / hbar
    omega_q if ``exact_occupation`` is False).  n_ion defaults to n_q.
    """
    from .thermal import occupation_from_temperature

    w_plus, w_minus = radial_frequencies(trap)
    g = coupling_constant(trap, quartz, w_plus, w_minus).select(coupling_form)
    occ = occupation_from_temperature(quartz.omega_q, quartz.temperature)
    n_q = occ.exact if exact_occupation else occ.high_temperature
    return ModelParams(
        omega_ion=w_plus, omega_q=quartz.omega_q, omega_rf=omega_rf,
        gamma_ion=gamma_ion, gamma_q=quartz.gamma_q, g=g,
        n_ion=n_q if n_ion is None else n_ion, n_q=n_q, v0=quartz.v0, **drive,
    )


@dataclass(frozen=True)
class MomentVector:
    """Expectation values <a>, <b>, <a^dagger>, <b^dagger>."""

    a: complex
    b: complex
    a_dag: complex
    b_dag: complex

    @classmethod
    def from_array(cls, arr) -> "MomentVector":
        arr = np.asarray(arr, dtype=complex).reshape(4)
        return cls(*(complex(x) for x in arr))

    @classmethod
    def physical(cls, a: complex, b: complex) -> "MomentVector":
        return cls(complex(a), complex(b), complex(a).conjugate(), complex(b).conjugate())

    @classmethod
    def from_polar(cls, a_abs: float, theta_a: float, b_abs: float,
                   theta_b: float = 0.0) -> "MomentVector":
        return cls.physical(cmath.rect(a_abs, theta_a), cmath.rect(b_abs, theta_b))

    @classmethod
    def zero(cls) -> "MomentVector":
        return cls(0j, 0j, 0j, 0j)

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.b, self.a_dag, self.b_dag], dtype=complex)

    @property
    def is_physical(self) -> bool:
        return self.a_dag == self.a.conjugate() and self.b_dag == self.b.conjugate()

    @property
    def a_abs(self) -> float:
        return abs(self.a)

    @property
    def b_abs(self) -> float:
        return abs(self.b)

    @property
    def theta_a(self) -> float:
        return cmath.phase(self.a)

    @property
    def theta_b(self) -> float:
        return cmath.phase(self.b)

    @property
    def delta(self) -> float:
        """Relative phase theta_a - theta_b wrapped to (-pi, pi]."""
        return wrap_phase(self.theta_a - self.theta_b)


def wrap_phase(x):
    """Wrap an angle (or array of angles) to (-pi, pi]."""
    y = np.pi - np.mod(np.pi - np.asarray(x, dtype=float), 2.0 * np.pi)
    return float(y) if np.ndim(y) == 0 else y


@dataclass(frozen=True)
class DriveVector:
    F: np.ndarray

    @classmethod
    def from_params(cls, p: ModelParams) -> "DriveVector":
        e_ion = cmath.exp(-1j * p.phi_ion)
        e_q = cmath.exp(-1j * p.phi_q)
        F = np.array([p.f_ion * e_ion, p.f_q * e_q,
                      p.f_ion * e_ion.conjugate(), p.f_q * e_q.conjugate()], dtype=complex)
        return cls(F)

    @classmethod
    def zero(cls) -> "DriveVector":
        return cls(np.zeros(4, dtype=complex))

    @property
    def is_zero(self) -> bool:
        return not np.any(self.F)


@dataclass(frozen=True, eq=False)
class EvolutionMatrix:
    """Drift matrix M = diag(m, m*) with the 2x2 block pre-diagonalized.

    ``method`` is ``"eigen"`` for the closed-form exponential or ``"series"``
    when the block is (numerically) defective.
    """

    m: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    method: str

    @property
    def M(self) -> np.ndarray:
        out = np.zeros((4, 4), dtype=complex)
        out[:2, :2] = self.m
        out[2:, 2:] = self.m.conj()
        return out

    # invariants of the 2x2 block, used by the closed-form exponential
    @property
    def _mu(self) -> complex:
        return 0.5 * (self.m[0, 0] + self.m[1, 1])

    @property
    def _s(self) -> complex:
        return 0.5 * (self.eigenvalues[1] - self.eigenvalues[0])


DEFECTIVE_RTOL = 1e-12


def build_evolution_matrix(p: ModelParams) -> EvolutionMatrix:
    m = np.array([
        [0.5 * p.gamma_ion + 1j * p.detuning_ion, 1j * p.g.conjugate()],
        [1j * p.g, 0.5 * p.gamma_q + 1j * p.detuning_q],
    ], dtype=complex)
    return _evolution_from_block(m)


def _evolution_from_block(m: np.ndarray) -> EvolutionMatrix:
    mu = 0.5 * (m[0, 0] + m[1, 1])
    half_diff = 0.5 * (m[0, 0] - m[1, 1])
    s = cmath.sqrt(half_diff * half_diff + m[0, 1] * m[1, 0])
    lam = np.array([mu - s, mu + s])
    scale = np.abs(m).max()
    if abs(s) < DEFECTIVE_RTOL * max(scale, np.finfo(float).tiny):
        # repeated eigenvalue; diagonal blocks are still diagonalizable
        defective = abs(m[0, 1]) + abs(m[1, 0]) > DEFECTIVE_RTOL * scale
        vecs = np.eye(2, dtype=complex)
        method = "series" if defective else "eigen"
    else:
        vecs = np.empty((2, 2), dtype=complex)
        for k, l in enumerate(lam):
            v = np.array([m[0, 1], l - m[0, 0]])
            if np.abs(v).max() < 1e-300 or abs(m[0, 1]) < abs(m[1, 0]):
                v = np.array([l - m[1, 1], m[1, 0]])
            if np.abs(v).max() == 0:
                v = np.eye(2)[k]
            vecs[:, k] = v / np.linalg.norm(v)
        method = "eigen"
    return EvolutionMatrix(m=m, eigenvalues=lam, eigenvectors=vecs, method=method)


def _expm_block(E: EvolutionMatrix, t) -> np.ndarray:
    """exp(-m t) for scalar or array t (any sign); shape (..., 2, 2)."""
    t = np.asarray(t, dtype=float)
    if E.method == "series":
        return _expm_series(-E.m, t)
    mu, s = E._mu, E._s
    l1, l2 = E.eigenvalues
    e1 = np.exp(-l1 * t)
    e2 = np.exp(-l2 * t)
    cosh_part = 0.5 * (e1 + e2)
    st = s * t
    small = np.abs(st) < 1e-3
    with np.errstate(divide="ignore", invalid="ignore"):
        sinh_over_s = np.where(small, 0.0, (e1 - e2) / (2.0 * s) if s != 0 else 0.0)
    if np.any(small):
        x2 = (st * st)[small]
        series = t[small] * (1.0 + x2 / 6.0 * (1.0 + x2 / 20.0 * (1.0 + x2 / 42.0)))
        sinh_over_s = np.asarray(sinh_over_s, dtype=complex)
        sinh_over_s[small] = np.exp(-mu * t[small]) * series
    centered = E.m - mu * np.eye(2)
    out = cosh_part[..., None, None] * np.eye(2) - sinh_over_s[..., None, None] * centered
    return out


def _expm_series(A: np.ndarray, t: np.ndarray) -> np.ndarray:
    """exp(A t) by scaling and squaring of a truncated Taylor series."""
    flat = np.atleast_1d(t).ravel()
    out = np.empty(flat.shape + (2, 2), dtype=complex)
    for i, ti in enumerate(flat):
        B = A * ti
        norm = np.abs(B).sum(axis=1).max()
        k = max(0, int(math.ceil(math.log2(norm / 0.25))) if norm > 0 else 0)
        B = B / 2.0**k
        term = np.eye(2, dtype=complex)
        acc = term.copy()
        for j in range(1, 20):
            term = term @ B / j
            acc = acc + term
        for _ in range(k):
            acc = acc @ acc
        out[i] = acc
    return out.reshape(np.shape(t) + (2, 2))


def propagator(E: EvolutionMatrix, t) -> np.ndarray:
    """U(t) = exp(-M t) as a (4, 4) array, or (..., 4, 4) for array t >= 0."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0):
        raise ValueError("propagator requires t >= 0")
    u = _expm_block(E, t_arr)
    out = np.zeros(t_arr.shape + (4, 4), dtype=complex)
    out[..., :2, :2] = u
    out[..., 2:, 2:] = u.conj()
    return out


def driven_steady_state(E: EvolutionMatrix, F: DriveVector) -> MomentVector:
    """Stationary moments A_F = M^{-1} F, the fixed point of d<A>/dt = -M<A> + F."""
    if F.is_zero:
        return MomentVector.zero()
    m = E.m
    det = m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]
    scale = np.abs(m).max() ** 2
    if abs(det) <= 1e-14 * scale or scale == 0:
        which = "ion" if abs(m[0, 0]) <= abs(m[1, 1]) else "quartz"
        raise SingularModeError(
            f"drift matrix is singular: the {which} mode is undriven-undamped "
            "(gamma = 0, zero detuning, no coupling); no stationary state exists"
        )
    upper = np.linalg.solve(m, F.F[:2])
    lower = np.linalg.solve(m.conj(), F.F[2:])
    return MomentVector.from_array(np.concatenate([upper, lower]))


def propagate_moments(E: EvolutionMatrix, A0: MomentVector, F: DriveVector | None,
                      t: float) -> MomentVector:
    """Exact solution of d<A>/dt = -M<A> + F after a time t >= 0."""
    return MomentVector.from_array(moment_trajectory(E, A0, F, float(t)))


def moment_trajectory(E: EvolutionMatrix, A0: MomentVector, F: DriveVector | None,
                      times) -> np.ndarray:
    """Vectorized propagate_moments; returns an array (..., 4)."""
    U = propagator(E, times)
    x0 = A0.as_array()
    if F is None or F.is_zero:
        return U @ x0
    af = driven_steady_state(E, F).as_array()
    return af + U @ (x0 - af)


def noise_matrix(p: ModelParams) -> np.ndarray:
    """Real 4x4 diffusion matrix C = [[0, gamma (n+1)], [gamma n, 0]]."""
    C = np.zeros((4, 4))
    C[0, 2] = p.gamma_ion * (p.n_ion + 1.0)
    C[1, 3] = p.gamma_q * (p.n_q + 1.0)
    C[2, 0] = p.gamma_ion * p.n_ion
    C[3, 1] = p.gamma_q * p.n_q
    return C
