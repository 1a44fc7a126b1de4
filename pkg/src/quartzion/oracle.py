"""Brute-force reference computations and synthetic data.

Everything here avoids the closed forms of ``model``/``spectrum``: the drift
matrix is rebuilt from the parameters, propagation goes through a numerical
eigendecomposition (or an adaptive Runge-Kutta integrator), and spectra are
obtained by explicit time-domain quadrature or Monte-Carlo periodograms.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp
from scipy.linalg import expm

from .constants import TWO_PI
from .model import ModelParams, MomentVector
from .spectrum import Spectrum, SpectrumWindow, thermal_psd
from .thermal import ThermalCorrelators, thermal_state


class IntegrationError(ArithmeticError):
    pass


class QuadratureError(ArithmeticError):
    pass


class AliasingError(ValueError):
    pass


def drift_matrix(p: ModelParams) -> np.ndarray:
    """Full 4x4 M written out element by element."""
    M = np.zeros((4, 4), dtype=complex)
    M[0, 0] = 0.5 * p.gamma_ion + 1j * (p.omega_ion - p.omega_rf)
    M[1, 1] = 0.5 * p.gamma_q + 1j * (p.omega_q - p.omega_rf)
    M[0, 1] = 1j * np.conj(p.g)
    M[1, 0] = 1j * p.g
    M[2, 2] = np.conj(M[0, 0])
    M[3, 3] = np.conj(M[1, 1])
    M[2, 3] = -1j * p.g
    M[3, 2] = -1j * np.conj(p.g)
    return M


def drive_vector(p: ModelParams) -> np.ndarray:
    e_ion = np.exp(-1j * p.phi_ion)
    e_q = np.exp(-1j * p.phi_q)
    return np.array([p.f_ion * e_ion, p.f_q * e_q,
                     p.f_ion * np.conj(e_ion), p.f_q * np.conj(e_q)])


def diffusion_matrix(p: ModelParams) -> np.ndarray:
    C = np.zeros((4, 4))
    C[0, 2], C[2, 0] = p.gamma_ion * (p.n_ion + 1), p.gamma_ion * p.n_ion
    C[1, 3], C[3, 1] = p.gamma_q * (p.n_q + 1), p.gamma_q * p.n_q
    return C


class EigenPropagator:
    """exp(-M t) from a numerical eigendecomposition of the full 4x4 M.

    Falls back to scipy's Pade ``expm`` when the eigenvectors are badly
    conditioned (near-defective M).
    """

    def __init__(self, M: np.ndarray):
        self.M = np.asarray(M, dtype=complex)
        lam, V = np.linalg.eig(self.M)
        self.defective = np.linalg.cond(V) > 1e8
        self.lam, self.V = lam, V
        self.Vinv = None if self.defective else np.linalg.inv(V)

    @classmethod
    def from_params(cls, p: ModelParams) -> "EigenPropagator":
        return cls(drift_matrix(p))

    def U(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.defective:
            flat = [expm(-self.M * s) for s in t.ravel()]
            return np.array(flat).reshape(t.shape + (4, 4))
        e = np.exp(-np.multiply.outer(t, self.lam))
        return np.einsum("ij,...j,jk->...ik", self.V, e, self.Vinv)

    def component(self, t, row: int, x: np.ndarray) -> np.ndarray:
        """(U(t) x)[row] for an array of times, without forming U."""
        t = np.asarray(t, dtype=float)
        if self.defective:
            return self.U(t)[..., row, :] @ x
        c = self.V[row] * (self.Vinv @ x)
        return np.exp(-np.multiply.outer(t, self.lam)) @ c

    def apply(self, t, x: np.ndarray) -> np.ndarray:
        return self.U(t) @ np.asarray(x, dtype=complex)


# ---------------------------------------------------------------- ODE routes

@dataclass(frozen=True, eq=False)
class MomentTrajectory:
    times: np.ndarray
    values: np.ndarray  # (n, 4)

    def at(self, i: int) -> MomentVector:
        return MomentVector.from_array(self.values[i])


@dataclass(frozen=True, eq=False)
class CorrelatorTrajectory:
    times: np.ndarray
    means: np.ndarray   # (n, 4)
    second: np.ndarray  # (n, 4, 4), <A_m A_n>


def _drive_on(schedule, t: float) -> bool:
    return any(t_on <= t < t_off for t_on, t_off in schedule)


def _run_segments(rhs, y0, t_start, t_end, times, schedule, tol, scale, method):
    """Integrate piecewise between drive switching times."""
    if not tol > 0:
        raise ValueError("tol must be positive")
    if not t_end >= t_start:
        raise ValueError("t_end must be >= t_start")
    times = np.asarray(times, dtype=float)
    edges = {t_start, t_end}
    for t_on, t_off in schedule:
        edges.update(x for x in (t_on, t_off) if t_start < x < t_end)
    edges = sorted(edges)
    out = np.empty((times.size, y0.size), dtype=complex)
    filled = np.zeros(times.size, dtype=bool)
    y = np.asarray(y0, dtype=complex)
    atol = tol * scale
    for a, b in zip(edges[:-1], edges[1:]):
        on = _drive_on(schedule, 0.5 * (a + b))
        mask = (times >= a) & (times <= b) & ~filled
        t_eval = np.unique(np.append(times[mask], b))
        sol = solve_ivp(lambda t, x: rhs(x, on), (a, b), y, method=method,
                        t_eval=t_eval, rtol=tol, atol=atol)
        if sol.status < 0 or sol.t.size != t_eval.size:
            reached = sol.t[-1] if sol.t.size else a
            raise IntegrationError(
                f"integration failed at t={reached:.6g} s in segment "
                f"[{a:.6g}, {b:.6g}] (drive {'on' if on else 'off'}): {sol.message}"
            )
        out[mask] = sol.y[:, np.searchsorted(t_eval, times[mask])].T
        filled |= mask
        y = sol.y[:, -1]
    if not filled.all():
        raise ValueError("requested times must lie in [t_start, t_end]")
    return out


def integrate_moments(p: ModelParams, A0: MomentVector, schedule=(), t_end: float = 1.0,
                      tol: float = 1e-10, *, t_start: float = 0.0, times=None,
                      method: str = "DOP853") -> MomentTrajectory:
    """Adaptive Runge-Kutta solution of d<A>/dt = -M<A> + F(t).

    ``schedule`` lists (t_on, t_off) intervals during which the drive of ``p``
    acts; it is off otherwise.
    """
    M = drift_matrix(p)
    F = drive_vector(p)
    zero = np.zeros(4, dtype=complex)
    times = np.array([t_start, t_end]) if times is None else np.asarray(times, dtype=float)
    x0 = A0.as_array()
    scale = max(1.0, float(np.abs(x0).max()), float(np.abs(F).max() / max(p.gamma_q, 1e-300)))

    def rhs(x, on):
        return -M @ x + (F if on else zero)

    vals = _run_segments(rhs, x0, t_start, t_end, times, list(schedule), tol, scale, method)
    return MomentTrajectory(times, vals)


def correlator_dynamics(p: ModelParams, S0, t_end: float, *, A0: MomentVector | None = None,
                        schedule=(), tol: float = 1e-10, t_start: float = 0.0, times=None,
                        method: str = "DOP853") -> CorrelatorTrajectory:
    """Same-time second moments <A_m A_n>(t) together with the means.

    dS/dt = -(M S + S M^T) + F A^T + A F^T + C,   d<A>/dt = -M <A> + F.
    """
    S0 = np.asarray(S0, dtype=complex)
    if S0.shape != (4, 4):
        raise ValueError("initial second moments must be a 4x4 matrix")
    M = drift_matrix(p)
    F = drive_vector(p)
    C = diffusion_matrix(p)
    zero = np.zeros(4, dtype=complex)
    a0 = np.zeros(4, dtype=complex) if A0 is None else A0.as_array()
    times = np.array([t_start, t_end]) if times is None else np.asarray(times, dtype=float)
    y0 = np.concatenate([a0, S0.ravel()])
    scale = max(1.0, float(np.abs(y0).max()))

    def rhs(y, on):
        A = y[:4]
        S = y[4:].reshape(4, 4)
        f = F if on else zero
        dS = -(M @ S + S @ M.T) + np.outer(f, A) + np.outer(A, f) + C
        return np.concatenate([-M @ A + f, dS.ravel()])

    vals = _run_segments(rhs, y0, t_start, t_end, times, list(schedule), tol, scale, method)
    return CorrelatorTrajectory(times, vals[:, :4], vals[:, 4:].reshape(-1, 4, 4))


# ------------------------------------------------------ two-time correlators

def _stationary_drive(p: ModelParams, M: np.ndarray) -> np.ndarray:
    F = drive_vector(p)
    if not np.any(F):
        return np.zeros(4, dtype=complex)
    return np.linalg.solve(M, F)


def two_time_correlator(p: ModelParams, th: ThermalCorrelators, A_t: MomentVector,
                        tau: float, prop: EigenPropagator | None = None) -> np.ndarray:
    """G[m, n] = <A_m(t + tau) A_n(t)> by the quantum regression theorem.

    tau >= 0:  <A(t+tau)><A(t)>^T + U(tau) T
    tau <  0:  <A(t+tau)><A(t)>^T + T U(|tau|)^T
    """
    prop = EigenPropagator.from_params(p) if prop is None else prop
    af = _stationary_drive(p, prop.M)
    x = A_t.as_array()
    U = prop.U(abs(tau))
    if tau >= 0:
        later = af + U @ (x - af)
        fluct = U @ th.T
    else:
        later = af + np.linalg.solve(U, x - af)
        fluct = th.T @ U.T
    return np.outer(later, x) + fluct


def adjoint_permutation() -> np.ndarray:
    """P swapping a <-> a^dagger and b <-> b^dagger."""
    P = np.zeros((4, 4))
    P[0, 2] = P[2, 0] = P[1, 3] = P[3, 1] = 1.0
    return P


# -------------------------------------------------------- quadrature oracle

def _gl_panels(length: float, n_panels: int, order: int):
    """Composite Gauss-Legendre nodes/weights on [0, length] (vectorized over length)."""
    x, w = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(0.0, 1.0, n_panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[:-1] + edges[1:])
    nodes = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    length = np.asarray(length, dtype=float)
    return np.multiply.outer(length, nodes), np.multiply.outer(length, weights)


def _double_integral(prop, x0, T, domega, t_d, n_panels, order, chunk=256):
    """Coherent and thermal parts of (1/t_d) int int e^{i w (t1 - t2)} <b+(t2) b(t1)>.

    Outer variable s = |t2 - t1|, inner u = min(t1, t2) in [0, t_d - s].
    """
    s, ws = _gl_panels(t_d, n_panels, order)
    xs, wx = _gl_panels(1.0, n_panels, order)
    g_plus = np.empty(s.size, dtype=complex)
    g_minus = np.empty(s.size, dtype=complex)
    # thermal kernels: t2 > t1 -> (U(s) T)[3, 1];  t1 > t2 -> (T U(s)^T)[3, 1]
    U = prop.U(s)
    k_plus = U[:, 3, :] @ T[:, 1]
    k_minus = U[:, 1, :] @ T[3, :]
    for lo in range(0, s.size, chunk):
        sl = slice(lo, lo + chunk)
        length = t_d - s[sl]
        u = length[:, None] * xs[None, :]
        wu = length[:, None] * wx[None, :]
        b_dag_u = prop.component(u, 3, x0)
        b_u = prop.component(u, 1, x0)
        b_dag_us = prop.component(u + s[sl, None], 3, x0)
        b_us = prop.component(u + s[sl, None], 1, x0)
        g_plus[sl] = np.sum(wu * b_dag_us * b_u, axis=1)
        g_minus[sl] = np.sum(wu * b_dag_u * b_us, axis=1)
    length = t_d - s
    phase = np.exp(-1j * np.multiply.outer(domega, s))
    coh = (phase * (ws * g_plus)).sum(axis=1) + (phase.conj() * (ws * g_minus)).sum(axis=1)
    therm = ((phase * (ws * length * k_plus)).sum(axis=1)
             + (phase.conj() * (ws * length * k_minus)).sum(axis=1))
    return coh / t_d, therm / t_d


def psd_quadrature(p: ModelParams, th: ThermalCorrelators | None, A_t0: MomentVector,
                   win: SpectrumWindow, *, tol: float = 1e-8, order: int = 16,
                   max_level: int = 5) -> Spectrum:
    """S^coh + S^th by explicit double time integration over the window.

    The integrand is the resonant (b^dagger(t2) b(t1)) part of <V(t2) V(t1)>
    built from the two-time correlator.  Panel counts are doubled until
    successive estimates agree to ``tol`` relative to the spectrum maximum;
    the detection window is free evolution (drive off).
    """
    th = thermal_state(p, "auto") if th is None else th
    prop = EigenPropagator.from_params(p)
    x0 = A_t0.as_array()
    w = win.omega
    rate = np.abs(w).max() + np.abs(prop.lam).max()
    base = max(1, int(np.ceil(win.t_d * rate / np.pi)))
    pref = 0.5 * p.v0**2
    prev = None
    achieved = np.inf
    for level in range(max_level + 1):
        coh, therm = _double_integral(prop, x0, th.T, w, win.t_d, base * 2**level, order)
        total = pref * (coh + therm)
        if prev is not None:
            scale = np.abs(total).max()
            achieved = np.abs(total - prev).max() / scale if scale > 0 else 0.0
            if achieved <= tol:
                break
        prev = total
    else:
        raise QuadratureError(
            f"double quadrature did not reach tol={tol:g} after {max_level} refinements "
            f"(achieved {achieved:.3g} relative)"
        )
    imag = np.abs(total.imag).max()
    return Spectrum(
        window=win,
        values=total.real,
        components={"coherent": pref * coh.real, "thermal": pref * therm.real},
        meta={"quadrature_level": level, "achieved_tol": achieved, "max_imag": imag},
    )


# ------------------------------------------------------ Monte-Carlo traces

@dataclass(frozen=True, eq=False)
class TraceEnsemble:
    sample_rate: float
    duration: float
    traces: np.ndarray  # (n_traces, n_samples), volts
    rng_seed: int
    t0: float = 0.0
    carrier: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        traces = np.atleast_2d(np.asarray(self.traces, dtype=float))
        object.__setattr__(self, "traces", traces)
        n = int(round(self.duration * self.sample_rate))
        if traces.shape[1] != n:
            raise ValueError(f"traces have {traces.shape[1]} samples, expected {n}")

    @property
    def n_traces(self) -> int:
        return self.traces.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.t0 + np.arange(self.traces.shape[1]) / self.sample_rate


def bin_window(t0: float, t_d: float, sample_rate: float, carrier: float,
               span_hz: tuple[float, float]) -> SpectrumWindow:
    """Window whose grid is the DFT bins with nu - nu_rf inside ``span_hz``."""
    k = np.arange(int(round(t_d * sample_rate)) // 2 + 1)
    nu = k / t_d - carrier
    keep = (nu >= span_hz[0] - 1e-9) & (nu <= span_hz[1] + 1e-9)
    if not keep.any():
        raise ValueError(f"no DFT bin falls inside {span_hz} Hz")
    return SpectrumWindow.from_hz(t0, t_d, nu[keep], sample_rate=sample_rate, carrier=carrier)


def _bin_indices(win: SpectrumWindow) -> np.ndarray:
    f = (win.nu_offset + win.carrier) * win.t_d
    k = np.rint(f).astype(int)
    if np.any(np.abs(f - k) > 1e-6) or np.any(k < 0) or np.any(k > win.n_samples // 2):
        raise ValueError("frequency grid does not coincide with DFT bins of the window")
    return k


def check_sampling(p: ModelParams, win: SpectrumWindow) -> None:
    if win.sample_rate is None or win.carrier is None:
        raise ValueError("trace synthesis needs a window with sample_rate and carrier")
    detunings = np.array([p.omega_ion - p.omega_rf, p.omega_q - p.omega_rf]) / TWO_PI
    f_max = win.carrier + max(np.abs(win.nu_offset).max(), np.abs(detunings).max())
    if not win.sample_rate > 2.0 * f_max:
        raise AliasingError(
            f"sample rate {win.sample_rate:g} Hz does not exceed twice the highest "
            f"signal frequency {f_max:g} Hz"
        )


def periodogram(x, sample_rate: float) -> np.ndarray:
    """One-sided-bin periodogram |dt * DFT|^2 / t_d for rfft bins."""
    x = np.asarray(x, dtype=float)
    dt = 1.0 / sample_rate
    t_d = x.shape[-1] * dt
    return np.abs(dt * np.fft.rfft(x, axis=-1)) ** 2 / t_d


def parseval_residual(x, sample_rate: float) -> float:
    """|mean(P over all N two-sided bins) * N / t_d - mean(x^2)| / mean(x^2)."""
    x = np.asarray(x, dtype=float)
    n = x.size
    dt = 1.0 / sample_rate
    t_d = n * dt
    P = np.abs(dt * np.fft.fft(x)) ** 2 / t_d
    lhs = P.mean() * n / t_d
    rhs = np.mean(x * x)
    return abs(lhs - rhs) / rhs if rhs > 0 else abs(lhs)


def coherent_trace(p: ModelParams, A_t0: MomentVector, win: SpectrumWindow,
                   prop: EigenPropagator | None = None) -> np.ndarray:
    """V0 sqrt(2) Re(<b(t)> e^{-i w_c t}) sampled over the window."""
    prop = EigenPropagator.from_params(p) if prop is None else prop
    n = win.n_samples
    s = np.arange(n) / win.sample_rate
    b = prop.component(s, 1, A_t0.as_array())
    carrier = np.exp(-1j * TWO_PI * win.carrier * (win.t0 + s))
    return p.v0 * np.sqrt(2.0) * (b * carrier).real


def colored_noise(target_psd: np.ndarray, sample_rate: float, rng: np.random.Generator) -> np.ndarray:
    """Real Gaussian trace whose expected periodogram equals ``target_psd``.

    ``target_psd`` is given on all rfft bins of an even-length record.
    """
    S = np.asarray(target_psd, dtype=float)
    if np.any(S < 0):
        raise ValueError("target PSD must be non-negative")
    n = 2 * (S.size - 1)
    var = S * n * sample_rate
    Z = np.sqrt(var / 2.0) * (rng.standard_normal(S.size) + 1j * rng.standard_normal(S.size))
    Z[0] = np.sqrt(var[0]) * rng.standard_normal()
    Z[-1] = np.sqrt(var[-1]) * rng.standard_normal()
    return np.fft.irfft(Z, n=n)


def synthesize_traces(p: ModelParams, A_t0: MomentVector, win: SpectrumWindow, n_traces: int,
                      seed: int, *, s_noise: float = 0.0,
                      th: ThermalCorrelators | None = None) -> tuple[TraceEnsemble, Spectrum]:
    """Monte-Carlo voltage traces and their averaged periodogram on ``win``.

    Each trace is the deterministic coherent voltage plus stationary Gaussian
    noise coloured to S^th + S^noise.  Trace i draws from the i-th child of
    SeedSequence(seed), so the ensemble is reproducible.
    """
    if n_traces < 1:
        raise ValueError("n_traces must be >= 1")
    check_sampling(p, win)
    n = win.n_samples
    if n % 2:
        raise ValueError("use an even number of samples per trace")
    _bin_indices(win)
    th = thermal_state(p, "auto") if th is None else th
    k_all = np.arange(n // 2 + 1)
    domega_all = TWO_PI * (k_all / win.t_d - win.carrier)
    target = np.clip(thermal_psd(p, th, domega_all), 0.0, None) + float(s_noise)
    coh = coherent_trace(p, A_t0, win)
    children = np.random.SeedSequence(seed).spawn(n_traces)
    traces = np.empty((n_traces, n))
    for i, ss in enumerate(children):
        traces[i] = coh + colored_noise(target, win.sample_rate, np.random.default_rng(ss))
    ens = TraceEnsemble(win.sample_rate, win.t_d, traces, int(seed), t0=win.t0,
                        carrier=win.carrier)
    return ens, averaged_periodogram(ens, win)


def averaged_periodogram(ens: TraceEnsemble, win: SpectrumWindow) -> Spectrum:
    """Bin-wise mean periodogram with its standard error (sample std / sqrt n)."""
    if win.sample_rate != ens.sample_rate or abs(win.t_d - ens.duration) > 1e-12:
        raise ValueError("window does not match the ensemble sampling")
    idx = _bin_indices(win)
    P = periodogram(ens.traces, ens.sample_rate)[:, idx]
    mean = P.mean(axis=0)
    sigma = P.std(axis=0, ddof=1) / np.sqrt(P.shape[0]) if P.shape[0] > 1 else None
    return Spectrum(window=win, values=mean, sigma=sigma,
                    meta={"n_traces": ens.n_traces, "seed": ens.rng_seed})
