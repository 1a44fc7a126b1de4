"""Simulation and fitting runs driven by a RunConfig."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .fitting import (
    FitProblem,
    _variance_model,
    check_same_grid,
    fit_background,
    fit_coupling_timeseries,
    fit_full_spectrum,
    model_spectrum,
    series_at_frequency,
)
from .io import ConfigError, RunConfig, atomic_write, read_result, read_spectra, write_result, write_spectrum
from .model import MomentVector, build_evolution_matrix, propagate_moments
from .oracle import bin_window, synthesize_traces
from .spectrum import Spectrum, total_psd
from .thermal import thermal_state


def state_at(cfg: RunConfig, t0: float, E=None) -> MomentVector:
    """Moments at the start of a window.

    ``free``: exact coupled propagation from t0 = 0.  ``ringdown``: |a| and
    delta held at their initial values while |b| decays at gamma_q / 2, the
    picture of an energized crystal ringing down under a fixed phase.
    """
    p = cfg.params()
    A0 = cfg.initial_state()
    if cfg.state["evolution"] == "free":
        E = build_evolution_matrix(p) if E is None else E
        return propagate_moments(E, A0, None, t0)
    s = cfg.state
    b = s["b0_abs"] * math.exp(-0.5 * p.gamma_q * t0)
    return MomentVector.from_polar(s["a0_abs"], math.radians(s["delta0_deg"]), b, 0.0)


def _seed(master: int, kind: int, index: int) -> int:
    return int(np.random.SeedSequence([master, kind, index]).generate_state(1)[0])


def closed_form(p, A, win, s_noise, n_traces, th=None, finite_window=False) -> Spectrum:
    """Closed-form spectrum with the model standard error of an n-trace average."""
    tot = total_psd(p, A, th, s_noise, win, finite_window=finite_window)
    c = tot.components["coherent"]
    st = tot.components["thermal"] + tot.components["noise"]
    sigma = np.sqrt(_variance_model(c, st, n_traces))
    return Spectrum(win, tot.values, sigma, tot.components, {"n_traces": n_traces})


def simulate(cfg: RunConfig, out, *, seed: int | None = None, t0s=None) -> list:
    """Write ion spectra for every t0 (and optional ion-free backgrounds).

    Returns the written paths.  Monte-Carlo files carry the averaged
    periodogram and its per-bin standard error; ``model_*`` files the
    closed form.
    """
    out = Path(out)
    seed = cfg.io["seed"] if seed is None else seed
    t0s = cfg.t0_list() if t0s is None else list(t0s)
    p = cfg.params()
    E = build_evolution_matrix(p)
    th = thermal_state(p)
    w, sim = cfg.window, cfg.simulate
    s_noise = cfg.model["s_noise_v2rms"]
    n = sim["n_traces"]
    head = {"nu_rf_hz": cfg.model["nu_rf_hz"], "n_traces": n}
    written = []

    def emit(kind, name, A, pp, thh, t0, index, code):
        win = bin_window(t0, w["td_s"], w["sample_rate_hz"], w["carrier_hz"], cfg.span())
        if sim["closed_form"]:
            path = out / f"model_{name}.txt"
            write_spectrum(path, closed_form(pp, A, win, s_noise, n, thh), {**head, "kind": f"model_{kind}"})
            written.append(path)
        if sim["monte_carlo"]:
            s = _seed(seed, code, index)
            ens, spec = synthesize_traces(pp, A, win, n, s, s_noise=s_noise, th=thh)
            path = out / f"{name}.txt"
            write_spectrum(path, spec, {**head, "kind": kind, "seed": s})
            written.append(path)
            if sim["save_traces"]:
                tpath = out / f"traces_{name}.npy"
                np.save(tpath, ens.traces)
                written.append(tpath)

    for i, t0 in enumerate(t0s):
        emit("ions", f"ions_t0_{t0 * 1e3:08.3f}ms", state_at(cfg, t0, E), p, th, t0, i, 1)
    pb = p.replace(g=0j)
    thb = thermal_state(pb)
    for i in range(sim["n_background"]):
        emit("background", f"background_{i:03d}", MomentVector.zero(), pb, thb, 0.0, i, 2)
    return written


def _plot_data(path, data: Spectrum, model: Spectrum):
    r = (data.values - model.values) / data.sigma
    cols = np.column_stack([data.nu_offset, data.values, data.sigma, model.values, r])
    lines = ["# frequency_offset_hz psd_v2rms sigma_v2rms model_v2rms residual_sigma"]
    lines += [" ".join(repr(float(x)) for x in row) for row in cols]
    atomic_write(path, "\n".join(lines) + "\n")


def fit(cfg: RunConfig, data_dir, out, *, stage: str | None = None) -> dict:
    """Run pipeline stage(s) on the spectra in ``data_dir``.

    Later stages read earlier results from ``out`` when run on their own.
    Returns {stage name: FitResult or list of FitResults}.
    """
    stage = cfg.fit["stage"] if stage is None else stage
    out = Path(out)
    f = cfg.fit
    v0 = cfg.model["v0"]
    stages = ("background", "coupling", "full") if stage == "all" else (stage,)
    bgs = read_spectra(data_dir, "background")
    ions = read_spectra(data_dir, "ions")
    if stage == "all" and bgs and ions:
        check_same_grid(bgs + ions)
    results = {}
    kw = dict(weighting=f["weighting"], finite_window=f["finite_window"])

    if "background" in stages:
        if not bgs:
            raise ConfigError(f"{data_dir}: no background spectra (kind=background)")
        init = {k: v for k, v in f["initial"].items() if k in ("n_q", "gamma_q_hz", "s_noise", "nu_q")}
        res = fit_background(bgs, v0=v0, initial=init or None, **kw)
        write_result(out / "result_background.txt", res)
        results["background"] = res
        bg = res.values
    else:
        bg = _load_values(out / "result_background.txt", ("n_q", "gamma_q_hz", "s_noise", "nu_q"))

    if "coupling" in stages:
        if not ions:
            raise ConfigError(f"{data_dir}: no ion spectra (kind=ions)")
        series = series_at_frequency(ions, f["coupling_nu_hz"])
        init = {k: v for k, v in f["initial"].items() if k in ("g_abs_hz", "a0_abs", "b0_abs", "delta0")}
        res = fit_coupling_timeseries(series, bg, v0=v0, g_arg=cfg.model["g_arg_rad"],
                                      gamma_ion_hz=cfg.model["gamma_ion_hz"],
                                      free_gamma_ion=f["free_gamma_ion"], initial=init or None, **kw)
        write_result(out / "result_coupling.txt", res, {"nu_hz": series.nu, "n_t0": len(series.t0)})
        results["coupling"] = res
        g = res.values["g_abs_hz"]
    elif "full" in stages:
        g = _load_values(out / "result_coupling.txt", ("g_abs_hz",))["g_abs_hz"]

    if "full" in stages:
        if not ions:
            raise ConfigError(f"{data_dir}: no ion spectra (kind=ions)")
        wanted = f["full_t0_s"]
        chosen = ions if wanted is None else [
            s for s in ions if any(abs(s.window.t0 - t) < 1e-9 for t in wanted)]
        if not chosen:
            raise ConfigError(f"no ion spectrum matches fit.full_t0_s={wanted}")
        fixed = {"gamma_q_hz": bg["gamma_q_hz"], "n_q": bg["n_q"], "s_noise": bg["s_noise"],
                 "gamma_ion_hz": cfg.model["gamma_ion_hz"], "g_abs_hz": g, "v0": v0,
                 "g_arg": cfg.model["g_arg_rad"]}
        fulls = []
        for s in chosen:
            res = fit_full_spectrum(s, fixed, **kw)
            tag = f"t0_{s.window.t0 * 1e3:08.3f}ms"
            write_result(out / f"result_full_{tag}.txt", res, {"t0_s": s.window.t0})
            curve = FitProblem((s,), "full", dict(res.values), {}, "model", 1,
                               finite_window=f["finite_window"])
            _plot_data(out / f"plotdata_full_{tag}.txt", s, model_spectrum(curve, res.values))
            fulls.append(res)
        results["full"] = fulls
    return results


def _load_values(path, keys) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path}: missing; run the earlier stage first")
    vals = read_result(path)["values"]
    missing = [k for k in keys if k not in vals]
    if missing:
        raise ConfigError(f"{path}: lacks values {missing}")
    return {k: vals[k] for k in keys}
