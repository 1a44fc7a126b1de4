"""Self-consistency report: analytic identities and oracle cross-checks."""

from __future__ import annotations

import math
import time
from typing import NamedTuple

import numpy as np

from .model import (
    MomentVector,
    ModelParams,
    build_evolution_matrix,
    noise_matrix,
    propagate_moments,
    propagator,
)
from .thermal import lyapunov_solve, thermal_closed_form


class CheckResult(NamedTuple):
    name: str
    passed: bool
    measured: float
    threshold: float
    seconds: float = 0.0
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  {self.detail}" if self.detail else ""
        return (f"[{status}] {self.name}: measured {self.measured:.3g} "
                f"(threshold {self.threshold:.3g}, {self.seconds:.2f} s){extra}")


def random_params(rng: np.random.Generator, driven: bool = False) -> ModelParams:
    """Stable parameter set around the nominal operating point."""
    return ModelParams.from_offsets(
        nu_rf=2.6897e6,
        nu_ion_offset=rng.uniform(-5, 5), nu_q_offset=rng.uniform(-5, 5),
        gamma_ion_hz=rng.uniform(0.5, 50), gamma_q_hz=rng.uniform(5, 80),
        g_hz=rng.uniform(0.1, 5), g_arg=rng.uniform(-math.pi, math.pi),
        n_ion=rng.uniform(1e5, 5e6), n_q=rng.uniform(1e5, 5e6), v0=4e-11,
        f_ion=rng.uniform(0, 100) if driven else 0.0, f_q=rng.uniform(0, 100) if driven else 0.0,
        phi_ion=rng.uniform(-math.pi, math.pi), phi_q=rng.uniform(-math.pi, math.pi),
    )


def _timed(name, threshold, fn, *, less=True, detail=""):
    t = time.perf_counter()
    measured = float(fn())
    ok = measured <= threshold if less else measured >= threshold
    return CheckResult(name, bool(ok), measured, threshold, time.perf_counter() - t, detail)


def thermal_agreement(params) -> float:
    worst = 0.0
    for p in params:
        a = thermal_closed_form(p).T
        b = lyapunov_solve(build_evolution_matrix(p), noise_matrix(p)).T
        worst = max(worst, np.abs(a - b).max() / np.abs(b).max())
    return worst


def lyapunov_residual(params) -> float:
    worst = 0.0
    for p in params:
        E = build_evolution_matrix(p)
        C = noise_matrix(p)
        worst = max(worst, thermal_closed_form(p).lyapunov_residual(E, C))
    return worst


def block_identity(params) -> float:
    worst = 0.0
    for p in params:
        th = thermal_closed_form(p)
        worst = max(worst, np.abs(th.t_minus_dag - (th.t_dag_minus.T + np.eye(2))).max())
    return worst


def semigroup(params, times=(1e-3, 7e-3, 0.02, 0.05)) -> float:
    worst = 0.0
    for p in params:
        E = build_evolution_matrix(p)
        for s in times:
            for t in times:
                lhs = propagator(E, s + t)
                rhs = propagator(E, s) @ propagator(E, t)
                worst = max(worst, np.abs(lhs - rhs).max() / max(np.abs(lhs).max(), 1e-300))
    return worst


def ode_agreement(params, n_times: int = 50) -> float:
    """max |A_expm - A_ode| / max |A| over [0, 5 / gamma_q]."""
    from .model import DriveVector
    from .oracle import integrate_moments

    worst = 0.0
    for i, p in enumerate(params):
        rng = np.random.default_rng(i)
        A0 = MomentVector.physical(complex(*rng.normal(size=2)), complex(*rng.normal(size=2)))
        E = build_evolution_matrix(p)
        ts = np.linspace(0.0, 5.0 / p.gamma_q, n_times)
        ref = np.array([propagate_moments(E, A0, DriveVector.from_params(p), t).as_array() for t in ts])
        traj = integrate_moments(p, A0, [(0.0, np.inf)], ts[-1], times=ts)
        worst = max(worst, np.abs(traj.values - ref).max() / np.abs(ref).max())
    return worst


def run_checks(cfg, *, seed: int | None = None, quick: bool = False) -> list:
    """Evaluate every check; a config whose parameters are invalid yields a
    single failed 'preconditions' entry."""
    seed = cfg.io["seed"] if seed is None else seed
    tol = cfg.check["tolerance"]
    rng = np.random.default_rng(seed)
    out = []
    t = time.perf_counter()
    try:
        p = cfg.params()
        cfg.trap_config()
    except ValueError as e:
        return [CheckResult("preconditions", False, math.nan, math.nan,
                            time.perf_counter() - t, str(e))]
    params = [p] + [random_params(rng) for _ in range(cfg.check["n_random"])]
    driven = [random_params(rng, driven=True) for _ in range(3 if quick else cfg.check["n_random"])]

    out.append(_timed("thermal closed form vs Lyapunov solve", tol, lambda: thermal_agreement(params)))
    out.append(_timed("Lyapunov residual / ||C||", 1e-2 * tol, lambda: lyapunov_residual(params)))
    out.append(_timed("block identity t_-+ = t_+-^T + 1", tol, lambda: block_identity(params)))
    out.append(_timed("propagator semigroup", tol, lambda: semigroup(params)))
    out.append(_timed("matrix exponential vs adaptive ODE", max(tol, 1e-8),
                      lambda: ode_agreement(driven)))

    from .trap import axial_frequency, cyclotron_frequency, radial_frequencies

    def trap_sum():
        tc = cfg.trap_config()
        wp, wm = radial_frequencies(tc)
        wc = cyclotron_frequency(tc)
        return abs(wp + wm - wc) / wc

    out.append(_timed("omega_+ + omega_- = omega_c", 1e-2 * tol, trap_sum))

    def trap_product():
        tc = cfg.trap_config()
        wp, wm = radial_frequencies(tc)
        wz = axial_frequency(tc)
        return abs(2 * wp * wm - wz * wz) / (wz * wz)

    out.append(_timed("2 omega_+ omega_- = omega_z^2", 1e-2 * tol, trap_product))
    out.extend(_spectral_checks(cfg, p, seed, quick))
    return out


def _spectral_checks(cfg, p, seed, quick) -> list:
    from .fitting import fit_background
    from .oracle import bin_window, parseval_residual, psd_quadrature, synthesize_traces
    from .pipeline import closed_form, state_at
    from .spectrum import SpectrumWindow, total_psd
    from .thermal import thermal_state

    out = []
    th = thermal_state(p)
    A = state_at(cfg, 0.014)
    win = SpectrumWindow.from_hz(0.0, cfg.window["td_s"], np.linspace(-20, 20, 21 if quick else 41))

    def quad():
        q = psd_quadrature(p, th, A, win)
        c = total_psd(p, A, th, 0.0, win, finite_window=True).values
        mask = c > 0.05 * c.max()
        return np.max(np.abs(q.values - c)[mask] / c[mask])

    out.append(_timed("closed-form PSD vs double quadrature", 0.01, quad))

    w = cfg.window
    bwin = bin_window(0.0, w["td_s"], w["sample_rate_hz"], w["carrier_hz"], cfg.span())
    s_noise = cfg.model["s_noise_v2rms"]
    n = 50 if quick else 200
    state = {}

    def mc():
        ens, spec = synthesize_traces(p, A, bwin, n, seed, s_noise=s_noise, th=th)
        state["ens"] = ens
        target = total_psd(p, A, th, s_noise, bwin).values
        return np.mean(np.abs(spec.values - target) <= 3.0 * spec.sigma)

    out.append(_timed(f"Monte-Carlo periodogram within 3 SE ({n} traces)", 0.95, mc, less=False))

    def parseval():
        ens = state["ens"]
        return max(parseval_residual(x, ens.sample_rate) for x in ens.traces[:20])

    out.append(_timed("discrete Parseval identity", 1e-10, parseval))

    def recovery():
        pb = p.replace(g=0j)
        spec = closed_form(pb, MomentVector.zero(), bwin, s_noise, 20)
        res = fit_background([spec], v0=p.v0, on_degenerate="warn")
        truth = cfg.background_values()
        return max(abs(res.values[k] - truth[k]) / abs(truth[k]) for k in ("n_q", "gamma_q_hz", "s_noise"))

    out.append(_timed("noiseless background recovery (relative)", 1e-6, recovery))
    return out
