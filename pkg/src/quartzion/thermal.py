"""Stationary second moments of the coupled oscillators.

T[n, m] = <A_n A_m>_th solves  M T + T M^T = C.  Two independent routes are
provided: the closed-form occupations/cross-correlator and a dense solve of the
16 linear equations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import constants
from .model import EvolutionMatrix, ModelParams, build_evolution_matrix, noise_matrix


class ThermalStateError(ArithmeticError):
    pass


@dataclass(frozen=True, eq=False)
class ThermalCorrelators:
    """Stationary correlation matrix T (4x4, complex).

    Only the off-diagonal 2x2 blocks are nonzero:
    ``t_minus_dag`` = [[<a a+>, <a b+>], [<b a+>, <b b+>]] (upper right) and
    ``t_dag_minus`` = [[<a+ a>, <a+ b>], [<b+ a>, <b+ b>]] (lower left).
    """

    T: np.ndarray

    @property
    def t_minus_dag(self) -> np.ndarray:
        return self.T[:2, 2:]

    @property
    def t_dag_minus(self) -> np.ndarray:
        return self.T[2:, :2]

    @property
    def a_dag_a(self) -> float:
        return float(self.T[2, 0].real)

    @property
    def b_dag_b(self) -> float:
        return float(self.T[3, 1].real)

    @property
    def a_dag_b(self) -> complex:
        return complex(self.T[2, 1])

    @property
    def b_dag_a(self) -> complex:
        return complex(self.T[3, 0])

    def lyapunov_residual(self, E: EvolutionMatrix, C: np.ndarray) -> float:
        """||M T + T M^T - C|| / ||C||."""
        M = E.M
        R = M @ self.T + self.T @ M.T - C
        return float(np.linalg.norm(R) / np.linalg.norm(C))


def _from_normal_block(t_dag_minus: np.ndarray) -> ThermalCorrelators:
    # <A_i A_j^+> = <A_j^+ A_i> + delta_ij, hence t_minus_dag = t_dag_minus^T + 1
    T = np.zeros((4, 4), dtype=complex)
    T[2:, :2] = t_dag_minus
    T[:2, 2:] = t_dag_minus.T + np.eye(2)
    return ThermalCorrelators(T)


def thermal_closed_form(p: ModelParams) -> ThermalCorrelators:
    """Closed-form stationary occupations and ion/quartz cross-correlator."""
    gi, gq = p.gamma_ion, p.gamma_q
    g2 = abs(p.g) ** 2
    gp = gi + gq
    dw = p.omega_ion - p.omega_q
    denom = 4.0 * g2 * gp * gp + gi * gq * (gp * gp + 4.0 * dw * dw)
    if not denom > 0:
        raise ThermalStateError(
            "closed-form denominator vanishes (gamma_ion = 0 with g = 0): the ion "
            "mode never thermalizes; take the decoupled limit explicitly"
        )
    dn = p.n_ion - p.n_q
    bb = p.n_q + 4.0 * g2 * dn * gi * gp / denom
    aa = p.n_ion - 4.0 * g2 * dn * gq * gp / denom
    ab = -2j * p.g * gi * gq * dn * (gp + 2j * dw) / denom
    t_dm = np.array([[aa, ab], [ab.conjugate(), bb]], dtype=complex)
    return _from_normal_block(t_dm)


def lyapunov_solve(E: EvolutionMatrix, C: np.ndarray) -> ThermalCorrelators:
    """Dense solve of M T + T M^T = C (16 unknowns)."""
    M = E.M
    eye = np.eye(4)
    # row-major vec: vec(M T) = (M kron I) vec T, vec(T M^T) = (I kron M) vec T
    K = np.kron(M, eye) + np.kron(eye, M)
    cond = np.linalg.cond(K)
    if not np.isfinite(cond) or cond > 1e14:
        raise ThermalStateError(
            f"Lyapunov system is singular (condition number {cond:.3g}); "
            "an undamped mode has no stationary state"
        )
    T = np.linalg.solve(K, np.asarray(C, dtype=complex).reshape(16)).reshape(4, 4)
    return ThermalCorrelators(T)


def decoupled_thermal(p: ModelParams) -> ThermalCorrelators:
    """g = 0 limit: each oscillator sits at its own bath occupation."""
    return _from_normal_block(np.diag([p.n_ion, p.n_q]).astype(complex))


def thermal_state(p: ModelParams, method: str = "auto") -> ThermalCorrelators:
    """``auto`` uses the closed form, or the decoupled limit when g = 0."""
    if method == "auto":
        return decoupled_thermal(p) if p.g == 0 else thermal_closed_form(p)
    if method == "closed":
        return thermal_closed_form(p)
    if method == "lyapunov":
        return lyapunov_solve(build_evolution_matrix(p), noise_matrix(p))
    raise ValueError(f"unknown method {method!r}")


class Occupation(NamedTuple):
    exact: float
    high_temperature: float

    @property
    def relative_difference(self) -> float:
        return abs(self.high_temperature - self.exact) / self.exact


def occupation_from_temperature(omega: float, temperature: float) -> Occupation:
    """Bose-Einstein occupation 1/(exp(hbar w / k T) - 1) and k T / (hbar w)."""
    if not omega > 0 or not temperature > 0:
        raise ValueError("omega and temperature must be positive")
    x = constants.HBAR * omega / (constants.BOLTZMANN * temperature)
    exact = 1.0 / math.expm1(x) if x < 700 else 0.0
    return Occupation(exact, 1.0 / x)
