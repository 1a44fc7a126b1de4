"""Closed-form power spectral density of the quartz voltage.

Grids are angular-frequency offsets from the drive, ``domega = omega -
omega_rf`` (rad/s), which is the axis on which the rotating-frame moments
live.  The PSD convention is that of a periodogram normalized by
1/sqrt(t_d): |(1/sqrt(t_d)) int e^{-i w t} V(t) dt|^2, in V^2 s (V^2/Hz).
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, field

import numpy as np

from .constants import TWO_PI
from .model import (
    EvolutionMatrix,
    ModelParams,
    MomentVector,
    build_evolution_matrix,
    propagator,
    wrap_phase,
)
from .thermal import ThermalCorrelators, thermal_state


@dataclass(frozen=True, eq=False)
class SpectrumWindow:
    """Acquisition window [t0, t0 + t_d] and the offset grid (rad/s).

    ``sample_rate`` (Hz) switches the coherent part to the exact discrete-time
    sum a DFT of sampled traces computes.  ``carrier`` (Hz) is the frequency at
    which omega_rf appears in a real heterodyned trace; when set, the image
    term from the negative-frequency component is kept.
    """

    t0: float
    t_d: float
    omega: np.ndarray
    sample_rate: float | None = None
    carrier: float | None = None

    def __post_init__(self):
        omega = np.atleast_1d(np.asarray(self.omega, dtype=float))
        object.__setattr__(self, "omega", omega)
        if self.t0 < 0:
            raise ValueError(f"t0 must be >= 0, got {self.t0}")
        if not self.t_d > 0:
            raise ValueError(f"t_d must be > 0, got {self.t_d}")
        if omega.ndim != 1 or omega.size == 0:
            raise ValueError("frequency grid must be a non-empty 1-D array")
        if np.any(np.diff(omega) <= 0):
            raise ValueError("frequency grid must be strictly increasing")
        if self.sample_rate is not None:
            n = self.t_d * self.sample_rate
            if abs(n - round(n)) > 1e-6 * max(n, 1.0):
                raise ValueError("t_d * sample_rate must be an integer sample count")

    @classmethod
    def from_hz(cls, t0: float, t_d: float, nu_offsets, **kw) -> "SpectrumWindow":
        return cls(t0, t_d, TWO_PI * np.asarray(nu_offsets, dtype=float), **kw)

    @property
    def t1(self) -> float:
        return self.t0 + self.t_d

    @property
    def nu_offset(self) -> np.ndarray:
        """Grid as nu - nu_rf in Hz."""
        return self.omega / TWO_PI

    @property
    def n_samples(self) -> int | None:
        if self.sample_rate is None:
            return None
        return int(round(self.t_d * self.sample_rate))

    def with_t0(self, t0: float) -> "SpectrumWindow":
        return SpectrumWindow(t0, self.t_d, self.omega, self.sample_rate, self.carrier)

    def same_grid(self, other: "SpectrumWindow") -> bool:
        return self.omega.shape == other.omega.shape and np.array_equal(self.omega, other.omega)


@dataclass(frozen=True, eq=False)
class Spectrum:
    window: SpectrumWindow
    values: np.ndarray
    sigma: np.ndarray | None = None
    components: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", values)
        if values.shape != self.window.omega.shape:
            raise ValueError("values do not match the frequency grid")
        if self.sigma is not None:
            sigma = np.asarray(self.sigma, dtype=float)
            if sigma.shape != values.shape:
                raise ValueError("sigma does not match the frequency grid")
            object.__setattr__(self, "sigma", sigma)

    @property
    def omega(self) -> np.ndarray:
        return self.window.omega

    @property
    def nu_offset(self) -> np.ndarray:
        return self.window.nu_offset


def envelope(p: ModelParams, omega):
    """Lorentzian envelope F(omega)* on the absolute frequency axis.

    1 / ([i(w - w_ion) + gamma_ion/2][i(w - w_q) + gamma_q/2] + |g|^2)
    """
    omega = np.asarray(omega, dtype=float)
    return _envelope_offset(p, omega - p.omega_rf)


def _envelope_offset(p: ModelParams, domega):
    pi = 0.5 * p.gamma_ion + 1j * (domega - p.detuning_ion)
    pq = 0.5 * p.gamma_q + 1j * (domega - p.detuning_q)
    return 1.0 / (pi * pq + abs(p.g) ** 2)


def _ion_over_envelope(p: ModelParams, domega):
    """(gamma_ion/2 + i(w - dw_ion)) F*, which is 1/(gamma_q/2 + i(w - dw_q)) at g = 0.

    Written out for g = 0 so the product stays finite on the ion resonance.
    """
    pq = 0.5 * p.gamma_q + 1j * (domega - p.detuning_q)
    if p.g == 0:
        return 1.0 / pq
    ion = 0.5 * p.gamma_ion + 1j * (domega - p.detuning_ion)
    return ion / (ion * pq + abs(p.g) ** 2)


def _solve_blocks(blocks: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve stacked 2x2 systems blocks[k] x = rhs[k]."""
    a, b = blocks[..., 0, 0], blocks[..., 0, 1]
    c, d = blocks[..., 1, 0], blocks[..., 1, 1]
    det = a * d - b * c
    x0 = (d * rhs[..., 0] - b * rhs[..., 1]) / det
    x1 = (a * rhs[..., 1] - c * rhs[..., 0]) / det
    return np.stack([x0, x1], axis=-1)


def fourier_moments(E: EvolutionMatrix, A_t0: MomentVector, domega, t_d: float,
                    sample_rate: float | None = None) -> np.ndarray:
    """W(w) = int_0^{t_d} e^{-i w s} <A(t0 + s)> ds for free decay, shape (n, 4).

    With ``sample_rate`` the integral becomes the rectangle sum
    dt * sum_n e^{-i w n dt} <A(t0 + n dt)>, which is what a DFT computes.
    """
    return fourier_states(E, A_t0.as_array()[None, :], domega, t_d, sample_rate)[0]


def fourier_states(E: EvolutionMatrix, X0: np.ndarray, domega, t_d: float,
                   sample_rate: float | None = None) -> np.ndarray:
    """fourier_moments for a stack of initial moment arrays X0 (k, 4) -> (k, n, 4)."""
    w = np.atleast_1d(np.asarray(domega, dtype=float))
    X0 = np.asarray(X0, dtype=complex)
    X1 = X0 @ propagator(E, t_d).T
    phase = np.exp(-1j * w * t_d)
    rhs = X0[:, None, :] - phase[None, :, None] * X1[:, None, :]
    out = np.empty(rhs.shape, dtype=complex)
    eye = np.eye(2)
    if sample_rate is None:
        mats = [1j * w[:, None, None] * eye + blk for blk in (E.m, E.m.conj())]
        scale = 1.0
    else:
        dt = 1.0 / sample_rate
        u = propagator(E, dt)
        mats = [eye - np.exp(-1j * w * dt)[:, None, None] * blk
                for blk in (u[:2, :2], u[2:, 2:])]
        scale = dt
    for sl, mat in zip((slice(0, 2), slice(2, 4)), mats):
        out[..., sl] = scale * _solve_blocks(mat[None], rhs[..., sl])
    return out


def coherent_amplitude(p: ModelParams, A_t0: MomentVector, A_t1: MomentVector,
                       domega, t_d: float) -> np.ndarray:
    """Unnormalized transform of <b^dagger> over the window, scalar form.

    -F* [ i g* (e^{-i w t_d} <a+(t1)> - <a+(t0)>)
          + (gamma_ion/2 + i(w - dw_ion)) (e^{-i w t_d} <b+(t1)> - <b+(t0)>) ]
    """
    w = np.asarray(domega, dtype=float)
    phase = np.exp(-1j * w * t_d)
    d_bdag = phase * A_t1.b_dag - A_t0.b_dag
    amp = -_ion_over_envelope(p, w) * d_bdag
    if p.g != 0:
        d_adag = phase * A_t1.a_dag - A_t0.a_dag
        amp = amp - _envelope_offset(p, w) * 1j * p.g.conjugate() * d_adag
    return amp


def coherent_psd(p: ModelParams, A_t0: MomentVector, win: SpectrumWindow,
                 E: EvolutionMatrix | None = None) -> np.ndarray:
    """Coherent PSD V0^2 / (2 t_d) |W_b+(w)|^2 from the decaying displacements."""
    E = build_evolution_matrix(p) if E is None else E
    if win.sample_rate is None and win.carrier is None:
        pref = p.v0**2 / (2.0 * win.t_d)
        A_t1 = MomentVector.from_array(propagator(E, win.t_d) @ A_t0.as_array())
        amp = coherent_amplitude(p, A_t0, A_t1, win.omega, win.t_d)
        return pref * np.abs(amp) ** 2
    return coherent_psd_states(p, A_t0.as_array()[None, :], np.array([win.t0]), win, E)[0]


def coherent_psd_states(p: ModelParams, X0: np.ndarray, t0s, win: SpectrumWindow,
                        E: EvolutionMatrix | None = None) -> np.ndarray:
    """Matrix-route coherent PSD for k windows starting at ``t0s`` with moments X0 (k, 4).

    All windows share the grid, length and sampling of ``win``; returns (k, n).
    """
    E = build_evolution_matrix(p) if E is None else E
    pref = p.v0**2 / (2.0 * win.t_d)
    amp = fourier_states(E, X0, win.omega, win.t_d, win.sample_rate)[..., 3]
    if win.carrier is not None:
        wc = TWO_PI * win.carrier
        image = fourier_states(E, X0, win.omega + 2.0 * wc, win.t_d, win.sample_rate)[..., 1]
        amp = amp + np.exp(-2j * wc * np.asarray(t0s, dtype=float))[:, None] * image
    return pref * np.abs(amp) ** 2


def effective_relative_phase(g: complex, delta: float) -> float:
    """ERP = pi/2 - arg(g) - delta, wrapped to (-pi, pi]."""
    if g == 0:
        raise ValueError("effective relative phase is undefined for g = 0")
    return wrap_phase(math.pi / 2 - cmath.phase(g) - delta)


def thermal_psd(p: ModelParams, th: ThermalCorrelators, domega, *,
                finite_window: bool = False, t_d: float | None = None,
                E: EvolutionMatrix | None = None) -> np.ndarray:
    """Stationary-fluctuation PSD  V0^2 Re[(Q(w) T)_{b+, b}].

    Q(w) = (i w + M)^{-1} in the long-window limit (default).  With
    ``finite_window`` the transient (1/t_d) (i w + M)^{-2} (e^{-(i w + M) t_d} - 1)
    correction is included, which is exact for a window of length t_d.
    """
    w = np.atleast_1d(np.asarray(domega, dtype=float))
    col = th.T[2:, 1]  # (<a+ b>, <b+ b>)
    if not finite_window:
        s_plus = _ion_over_envelope(p, w) * col[1]
        if p.g != 0:
            s_plus = s_plus + _envelope_offset(p, w) * 1j * p.g.conjugate() * col[0]
        return p.v0**2 * s_plus.real
    if t_d is None:
        raise ValueError("finite_window=True requires t_d")
    E = build_evolution_matrix(p) if E is None else E
    eye = np.eye(2)
    mstar = E.m.conj()
    mats = 1j * w[:, None, None] * eye + mstar
    R = np.linalg.inv(mats)
    decay = np.exp(-1j * w * t_d)[:, None, None] * propagator(E, t_d)[2:, 2:] - eye
    Q = R + (R @ R @ decay) / t_d
    s_plus = Q[:, 1, :] @ col
    return p.v0**2 * s_plus.real


def total_psd(p: ModelParams, A_t0: MomentVector, th: ThermalCorrelators | None,
              s_noise: float, win: SpectrumWindow, *, finite_window: bool = False,
              E: EvolutionMatrix | None = None) -> Spectrum:
    """S = S_coh + S_th + S_noise on the window grid, components retained."""
    E = build_evolution_matrix(p) if E is None else E
    th = thermal_state(p, "auto") if th is None else th
    coh = coherent_psd(p, A_t0, win, E=E)
    therm = thermal_psd(p, th, win.omega, finite_window=finite_window, t_d=win.t_d, E=E)
    noise = np.full_like(coh, float(s_noise))
    return Spectrum(
        window=win,
        values=coh + therm + noise,
        components={"coherent": coh, "thermal": therm, "noise": noise},
    )
