"""Three-step extraction of the coupled-oscillator parameters from spectra.

1. background (no ions): n_q, gamma_q, S_noise, nu_q
2. PSD at one frequency nu_1 as a function of t0: |g|, |a(0)|, |b(0)|, delta(0)
3. full spectrum at each t0: delta, nu_ion, nu_q, |a(t0)|, |b(t0)|

Parameter names use the units of the files: frequencies and rates in Hz
(offsets from nu_rf, or rate / 2 pi), phases in rad.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import nnls

from .constants import TWO_PI
from .lm import covariance_from_jacobian, levenberg_marquardt, numerical_jacobian
from .model import ModelParams, MomentVector, build_evolution_matrix, propagator, wrap_phase
from .spectrum import (
    Spectrum,
    SpectrumWindow,
    coherent_psd,
    coherent_psd_states,
    effective_relative_phase,
    thermal_psd,
)
from .thermal import thermal_state


class FitConvergenceError(RuntimeError):
    def __init__(self, message, last=None):
        super().__init__(message)
        self.last = last


class FitBoundsError(ValueError):
    pass


class DegenerateFitError(ArithmeticError):
    def __init__(self, message, names=()):
        super().__init__(message)
        self.names = tuple(names)


class GridMismatchError(ValueError):
    pass


class DegeneracyWarning(UserWarning):
    pass


class LongWindowWarning(UserWarning):
    pass


# gamma_ion stays linear: its natural value (0) sits on the boundary
LOG_PARAMS = {"n_q", "n_ion", "gamma_q_hz", "s_noise", "g_abs_hz",
              "a_abs", "b_abs", "a0_abs", "b0_abs"}
PHASE_PARAMS = {"delta", "delta0", "g_arg"}
NONNEGATIVE_LINEAR = {"gamma_ion_hz"}

_COMMON = ("n_q", "gamma_q_hz", "s_noise", "nu_q", "v0")
_ION = ("g_abs_hz", "g_arg", "gamma_ion_hz", "n_ion", "nu_ion")
MODEL_PARAMETERS = {
    "background": _COMMON,
    "timeseries": _COMMON + _ION + ("a0_abs", "b0_abs", "delta0"),
    "full": _COMMON + _ION + ("a_abs", "b_abs", "delta"),
    "joint": _COMMON + _ION + ("a0_abs", "b0_abs", "delta0"),
}
DEFAULT_FREE = {
    "background": ("n_q", "gamma_q_hz", "s_noise", "nu_q"),
    "timeseries": ("g_abs_hz", "a0_abs", "b0_abs", "delta0"),
    "full": ("delta", "nu_ion", "nu_q", "a_abs", "b_abs"),
    "joint": ("g_abs_hz", "a0_abs", "b0_abs", "delta0", "nu_ion", "nu_q"),
}


@dataclass(frozen=True)
class FreeParam:
    initial: float
    lower: float | None = None
    upper: float | None = None


@dataclass(frozen=True)
class PointSeries:
    """PSD at one grid frequency for a sequence of window starts t0."""

    t0: np.ndarray
    values: np.ndarray
    sigma: np.ndarray | None
    nu: float
    t_d: float
    sample_rate: float | None = None
    carrier: float | None = None
    n_traces: int | None = None

    def __post_init__(self):
        for name in ("t0", "values"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.sigma is not None:
            object.__setattr__(self, "sigma", np.asarray(self.sigma, dtype=float))
        if self.t0.shape != self.values.shape:
            raise ValueError("t0 and values differ in length")

    def window(self, t0: float) -> SpectrumWindow:
        return SpectrumWindow.from_hz(t0, self.t_d, [self.nu], sample_rate=self.sample_rate,
                                      carrier=self.carrier)


def check_same_grid(spectra) -> None:
    first = spectra[0].window
    for s in spectra[1:]:
        w = s.window
        if not (first.same_grid(w) and first.t_d == w.t_d
                and first.sample_rate == w.sample_rate and first.carrier == w.carrier):
            raise GridMismatchError(
                f"spectrum at t0={w.t0:g} s does not share the frequency grid/window "
                f"of the spectrum at t0={first.t0:g} s"
            )


def series_at_frequency(spectra, nu: float) -> PointSeries:
    """Pick the grid point nearest ``nu`` (Hz offset) out of each spectrum."""
    spectra = list(spectra)
    check_same_grid(spectra)
    w = spectra[0].window
    i = int(np.argmin(np.abs(w.nu_offset - nu)))
    spacing = np.min(np.diff(w.nu_offset)) if w.nu_offset.size > 1 else np.inf
    if abs(w.nu_offset[i] - nu) > 0.5 * spacing:
        raise GridMismatchError(f"{nu} Hz lies outside the frequency grid")
    order = np.argsort([s.window.t0 for s in spectra])
    spectra = [spectra[k] for k in order]
    sig = None
    if all(s.sigma is not None for s in spectra):
        sig = np.array([s.sigma[i] for s in spectra])
    return PointSeries(
        t0=np.array([s.window.t0 for s in spectra]),
        values=np.array([s.values[i] for s in spectra]),
        sigma=sig, nu=float(w.nu_offset[i]), t_d=w.t_d,
        sample_rate=w.sample_rate, carrier=w.carrier,
        n_traces=spectra[0].meta.get("n_traces"),
    )


@dataclass(frozen=True, eq=False)
class FitProblem:
    """Data plus the split of the model's parameters into fixed and free."""

    data: tuple
    model: str
    fixed: dict
    free: dict
    weighting: str = "model"
    n_traces: int | None = None
    tie_n_ion: bool = True
    finite_window: bool = False

    def __post_init__(self):
        if self.model not in MODEL_PARAMETERS:
            raise ValueError(f"unknown model {self.model!r}")
        object.__setattr__(self, "data", tuple(self.data))
        free = {k: v if isinstance(v, FreeParam) else FreeParam(float(v))
                for k, v in self.free.items()}
        object.__setattr__(self, "free", free)
        needed = set(MODEL_PARAMETERS[self.model])
        if self.tie_n_ion:
            needed.discard("n_ion")
        overlap = set(free) & set(self.fixed)
        if overlap:
            raise ValueError(f"parameters both fixed and free: {sorted(overlap)}")
        missing = needed - set(free) - set(self.fixed)
        if missing:
            raise ValueError(f"model {self.model!r} lacks values for {sorted(missing)}")
        extra = set(free) - needed
        if extra:
            raise ValueError(f"free parameters not in model {self.model!r}: {sorted(extra)}")
        if self.weighting not in ("model", "data"):
            raise ValueError("weighting must be 'model' or 'data'")
        if self.weighting == "model" and not (self.n_traces and self.n_traces >= 1):
            raise ValueError("model weighting needs the number of averaged traces")
        if self.weighting == "data":
            for d in self.data:
                if d.sigma is None or np.any(~(d.sigma > 0)):
                    raise ValueError("data weighting needs strictly positive uncertainties")

    @property
    def n_points(self) -> int:
        return int(sum(np.size(d.values) for d in self.data))


@dataclass
class FitResult:
    model: str
    values: dict
    errors: dict
    chi2: float
    chi2_nu: float
    n_points: int
    n_free: int
    iterations: int
    grad_norm: float
    converged: bool
    message: str
    residuals: np.ndarray
    covariance: np.ndarray
    free_names: tuple
    degenerate: tuple = ()
    derived: dict = field(default_factory=dict)
    provisional: tuple = ()
    chi2_history: list = field(default_factory=list)
    notes: tuple = ()

    def correlation(self, a: str, b: str) -> float:
        i, j = self.free_names.index(a), self.free_names.index(b)
        c = self.covariance
        return float(c[i, j] / math.sqrt(c[i, i] * c[j, j]))


# ------------------------------------------------------------ model curves

def model_params(v: dict, nu_rf: float = 0.0) -> ModelParams:
    return ModelParams.from_offsets(
        nu_rf=nu_rf, nu_ion_offset=v.get("nu_ion", 0.0), nu_q_offset=v["nu_q"],
        gamma_ion_hz=v.get("gamma_ion_hz", 0.0), gamma_q_hz=v["gamma_q_hz"],
        g_hz=v.get("g_abs_hz", 0.0), g_arg=v.get("g_arg", math.pi / 2),
        n_ion=v.get("n_ion", v["n_q"]), n_q=v["n_q"], v0=v["v0"],
    )


def _components(p: ModelParams, A: MomentVector | None, win: SpectrumWindow, s_noise: float,
                finite_window: bool, th=None, E=None):
    th = thermal_state(p, "auto") if th is None else th
    stat = thermal_psd(p, th, win.omega, finite_window=finite_window, t_d=win.t_d, E=E)
    stat = stat + s_noise
    coh = np.zeros_like(stat) if A is None else coherent_psd(p, A, win, E=E)
    return coh, stat


def predict(problem: FitProblem, v: dict):
    """(coherent, stationary) model arrays concatenated over the data."""
    p = model_params(v)
    coh, stat = [], []
    if problem.model == "background":
        p = p.replace(g=0j)
        for d in problem.data:
            c, s = _components(p, None, d.window, v["s_noise"], problem.finite_window)
            coh.append(c)
            stat.append(s)
        return np.concatenate(coh), np.concatenate(stat)
    E = build_evolution_matrix(p)
    th = thermal_state(p, "auto")
    if problem.model == "full":
        A = MomentVector.from_polar(v["a_abs"], v["delta"], v["b_abs"], 0.0)
        for d in problem.data:
            c, s = _components(p, A, d.window, v["s_noise"], problem.finite_window, th, E)
            coh.append(c)
            stat.append(s)
        return np.concatenate(coh), np.concatenate(stat)
    x0 = MomentVector.from_polar(v["a0_abs"], v["delta0"], v["b0_abs"], 0.0).as_array()
    if problem.model == "timeseries":
        series = problem.data[0]
        win = series.window(0.0)
        states = propagator(E, series.t0) @ x0
        c = coherent_psd_states(p, states, series.t0, win, E)[:, 0]
        _, s = _components(p, None, win, v["s_noise"], problem.finite_window, th, E)
        return c, np.full_like(c, s[0])
    for d in problem.data:  # joint
        A = MomentVector.from_array(propagator(E, d.window.t0) @ x0)
        c, s = _components(p, A, d.window, v["s_noise"], problem.finite_window, th, E)
        coh.append(c)
        stat.append(s)
    return np.concatenate(coh), np.concatenate(stat)


def model_spectrum(problem: FitProblem, result_values: dict, index: int = 0) -> Spectrum:
    """Best-fit curve on the grid of data item ``index`` (spectrum models only)."""
    single = FitProblem((problem.data[index],), problem.model, problem.fixed, problem.free,
                        problem.weighting, problem.n_traces, problem.tie_n_ion,
                        problem.finite_window)
    coh, stat = predict(single, result_values)
    d = problem.data[index]
    return Spectrum(d.window, coh + stat, components={"coherent": coh, "stationary": stat},
                    meta=dict(d.meta))


# ------------------------------------------------------------------ engine

def _encode(name, value):
    if name in LOG_PARAMS:
        if not value > 0:
            raise ValueError(f"initial value of {name} must be positive, got {value}")
        return math.log(value)
    return float(value)


def _decode(name, x):
    if name in LOG_PARAMS:
        return math.exp(x)
    if name in PHASE_PARAMS:
        return wrap_phase(x)
    return float(x)


def _variance_model(coh, stat, n):
    return (stat * stat + 2.0 * coh * stat) / n


def run_fit(problem: FitProblem, *, max_iter: int = 300, irls_iter: int = 8,
            on_degenerate: str = "warn", require_convergence: bool = True) -> FitResult:
    """Weighted least squares for a FitProblem.

    ``weighting="data"`` uses the uncertainties stored with the data;
    ``"model"`` iterates the exact variance of an n-trace averaged periodogram,
    (S_stat^2 + 2 S_coh S_stat) / n, evaluated at the current parameters.
    """
    names = tuple(problem.free)
    x = np.array([_encode(k, problem.free[k].initial) for k in names])
    scale = np.ones_like(x)
    lower = np.array([0.0 if k in NONNEGATIVE_LINEAR else -np.inf for k in names])
    y = np.concatenate([np.atleast_1d(d.values) for d in problem.data])

    def unpack(xv):
        v = dict(problem.fixed)
        v.update({k: _decode(k, xi) for k, xi in zip(names, xv)})
        if problem.tie_n_ion:
            v["n_ion"] = v["n_q"]
        return v

    if problem.weighting == "data":
        sigma = np.concatenate([np.atleast_1d(d.sigma) for d in problem.data])
        rounds = 1
    else:
        rounds = irls_iter
    history = []
    res = None
    for _ in range(rounds):
        if problem.weighting == "model":
            c, s = predict(problem, unpack(x))
            sigma = np.sqrt(_variance_model(c, s, problem.n_traces))
            if np.any(~(sigma > 0)):
                raise DegenerateFitError("model variance vanishes at some grid points")

        def resid(xv, sigma=sigma):
            c, s = predict(problem, unpack(xv))
            return (c + s - y) / sigma

        res = levenberg_marquardt(resid, x, scale, lower=lower, max_iter=max_iter)
        history.extend(res.chi2_history)
        moved = np.max(np.abs(res.x - x) / scale) if x.size else 0.0
        x = res.x
        if not res.converged:
            break
        if moved < 1e-9:
            break
    vals = unpack(x)
    if not res.converged and require_convergence:
        raise FitConvergenceError(
            f"{problem.model} fit did not converge after {res.iterations} iterations "
            f"({res.message}); last iterate {vals}", last=vals)

    cov_int, degenerate_idx = covariance_from_jacobian(res.jac)
    deriv = np.array([vals[k] if k in LOG_PARAMS else 1.0 for k in names])
    with np.errstate(invalid="ignore"):
        cov = cov_int * np.outer(deriv, deriv)
    errors = {k: float(math.sqrt(cov[i, i])) if np.isfinite(cov[i, i]) else math.inf
              for i, k in enumerate(names)}
    degenerate = tuple(names[i] for i in degenerate_idx)
    for k in names:
        fp = problem.free[k]
        if (fp.lower is not None and vals[k] < fp.lower) or (fp.upper is not None and vals[k] > fp.upper):
            raise FitBoundsError(f"fitted {k}={vals[k]:.6g} violates bounds [{fp.lower}, {fp.upper}]")
    n, k = problem.n_points, len(names)
    chi2 = res.chi2
    dof = n - k
    result = FitResult(
        model=problem.model, values=vals, errors=errors, chi2=chi2,
        chi2_nu=chi2 / dof if dof > 0 else math.nan, n_points=n, n_free=k,
        iterations=res.iterations, grad_norm=res.grad_norm, converged=res.converged,
        message=res.message, residuals=res.residuals, covariance=cov, free_names=names,
        degenerate=degenerate, chi2_history=history,
    )
    if degenerate:
        msg = f"{problem.model} fit: parameters not identifiable from the data: {list(degenerate)}"
        if on_degenerate == "raise":
            raise DegenerateFitError(msg, degenerate)
        warnings.warn(msg, DegeneracyWarning, stacklevel=2)
    return result


def linearized_covariance(problem: FitProblem):
    """Covariance of the free parameters linearized at their initial values.

    Answers "how well would these be determined" without running the fit,
    which matters when a direction is so flat that the optimizer crawls.
    Returns (cov, names, degenerate names) in natural units.
    """
    names = tuple(problem.free)
    x = np.array([_encode(k, problem.free[k].initial) for k in names])
    vals = {k: problem.free[k].initial for k in names}

    def unpack(xv):
        v = dict(problem.fixed)
        v.update({k: _decode(k, xi) for k, xi in zip(names, xv)})
        if problem.tie_n_ion:
            v["n_ion"] = v["n_q"]
        return v

    if problem.weighting == "data":
        sigma = np.concatenate([np.atleast_1d(d.sigma) for d in problem.data])
    else:
        c, s = predict(problem, unpack(x))
        sigma = np.sqrt(_variance_model(c, s, problem.n_traces))

    def resid(xv):
        c, s = predict(problem, unpack(xv))
        return (c + s) / sigma

    J = numerical_jacobian(resid, x, np.ones_like(x))
    cov_int, deg = covariance_from_jacobian(J)
    deriv = np.array([vals[k] if k in LOG_PARAMS else 1.0 for k in names])
    with np.errstate(invalid="ignore"):
        cov = cov_int * np.outer(deriv, deriv)
    return cov, names, tuple(names[i] for i in deg)


_TINY = 1e-300


def _best_of(problems, **kw) -> FitResult:
    """Screen several starting points with one weighting round, then refine
    the best one to convergence."""
    best, err = None, None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegeneracyWarning)
        for prob in problems:
            try:
                r = run_fit(prob, irls_iter=1, max_iter=100, require_convergence=False)
            except (FitConvergenceError, FloatingPointError, np.linalg.LinAlgError) as e:
                err = e
                continue
            if best is None or r.chi2 < best[0].chi2:
                best = (r, prob)
    if best is None:
        raise err
    r, prob = best
    # a log parameter run off towards zero can underflow on decoding
    start = {k: FreeParam(max(r.values[k], _TINY) if k in LOG_PARAMS else r.values[k],
                          fp.lower, fp.upper) for k, fp in prob.free.items()}
    refined = FitProblem(prob.data, prob.model, prob.fixed, start, prob.weighting,
                         prob.n_traces, prob.tie_n_ion, prob.finite_window)
    return run_fit(refined, **kw)


def chi_squared(model: Spectrum, data: Spectrum, n_free: int = 0) -> tuple[float, float]:
    """chi^2 = sum(((model - data) / sigma)^2) and chi^2 / (n - n_free)."""
    if not model.window.same_grid(data.window):
        raise GridMismatchError("model and data are on different frequency grids")
    if data.sigma is None or np.any(~(data.sigma > 0)):
        raise ValueError("data uncertainties must be positive")
    r = (model.values - data.values) / data.sigma
    chi2 = float(r @ r)
    dof = r.size - n_free
    return chi2, chi2 / dof if dof > 0 else math.nan


# ------------------------------------------------------------ step 1

def background_guess(spectra, v0: float) -> dict:
    s = spectra[0]
    nu, S = s.nu_offset, s.values
    floor = float(np.percentile(S, 10))
    i = int(np.argmax(S))
    height = max(S[i] - floor, 1e-3 * max(S[i], 1e-300))
    above = np.nonzero(S - floor >= 0.5 * height)[0]
    if above.size == 0:  # featureless spectrum
        above = np.array([i])
    fwhm = max(nu[above].max() - nu[above].min(), np.min(np.diff(nu)) if nu.size > 1 else 1.0)
    gamma = TWO_PI * fwhm
    return {
        "nu_q": float(nu[i]),
        "gamma_q_hz": float(fwhm),
        "s_noise": max(floor, 1e-3 * height),
        "n_q": height * gamma / (2.0 * v0 * v0),
    }


def fit_background(spectra, *, v0: float, fixed: dict | None = None, initial: dict | None = None,
                   weighting: str = "model", n_traces: int | None = None,
                   on_degenerate: str = "raise", finite_window: bool = False) -> FitResult:
    """Step 1: S^th + S^noise with |g| = 0 on spectra taken without ions.

    V0 and n_q only enter as V0^2 n_q, so V0 is held fixed.  nu_q is
    returned as provisional; it is refitted in step 3.
    """
    spectra = list(spectra)
    check_same_grid(spectra)
    n_traces = n_traces or spectra[0].meta.get("n_traces")
    guess = background_guess(spectra, v0)
    guess.update(initial or {})
    fixed = dict(fixed or {})
    fixed["v0"] = v0
    free = {k: guess[k] for k in DEFAULT_FREE["background"] if k not in fixed}
    prob = FitProblem(spectra, "background", fixed, free, weighting, n_traces,
                      finite_window=finite_window)
    res = run_fit(prob, on_degenerate=on_degenerate)
    res.provisional = ("nu_q",)
    return res


# ------------------------------------------------------------ step 2

def _amplitude_guess(problem: FitProblem, v: dict, a_key: str, b_key: str, phase_key: str):
    """Amplitudes from the peak heights: non-negative least squares of the
    excess over the stationary part on the unit-amplitude coherent shapes."""
    trial = dict(v)
    trial.update({a_key: 1.0, b_key: 1e-300, phase_key: 0.0})
    ka, stat = predict(problem, trial)
    trial.update({a_key: 1e-300, b_key: 1.0})
    kb, _ = predict(problem, trial)
    y = np.concatenate([np.atleast_1d(d.values) for d in problem.data])
    excess = np.clip(y - stat, 0.0, None)
    w = 1.0 / np.maximum(y, 1e-300)
    sol, _ = nnls(np.column_stack([ka * w, kb * w]), excess * w)
    peak = np.sqrt(max(excess.max(), 1e-300))
    fallback = [peak / math.sqrt(max(ka.max(), 1e-300)), peak / math.sqrt(max(kb.max(), 1e-300))]
    return [math.sqrt(s) if s > 0 else 1e-3 * f for s, f in zip(sol, fallback)]


def fit_coupling_timeseries(series: PointSeries, background: dict, *, nu_ion: float | None = None,
                            v0: float, g_arg: float = math.pi / 2, initial: dict | None = None,
                            free_gamma_ion: bool = False, gamma_ion_hz: float = 0.0,
                            weighting: str = "model", n_start_phases: int = 8,
                            finite_window: bool = False) -> FitResult:
    """Step 2: S(nu_1; t0) with moments propagated freely from t0 = 0.

    gamma_ion is pinned (0 by default), so the fitted |g| is an upper limit;
    with ``free_gamma_ion`` the |g|-gamma_ion correlation is checked and a
    DegeneracyWarning is raised when the two cannot be separated.
    """
    fixed = {k: background[k] for k in ("n_q", "gamma_q_hz", "s_noise", "nu_q")}
    fixed.update(v0=v0, g_arg=g_arg, nu_ion=series.nu if nu_ion is None else nu_ion)
    init = {"g_abs_hz": 1.0}
    init.update(initial or {})
    free_names = list(DEFAULT_FREE["timeseries"])
    fixed["gamma_ion_hz"] = gamma_ion_hz
    n_traces = series.n_traces
    if "a0_abs" not in init or "b0_abs" not in init:
        base = dict(fixed)
        base.update(init)
        probe = FitProblem((series,), "timeseries", fixed, {k: 1.0 for k in free_names}, "model", 1)
        a, b = _amplitude_guess(probe, base, "a0_abs", "b0_abs", "delta0")
        init.setdefault("a0_abs", a)
        init.setdefault("b0_abs", b)
    phases = ([init["delta0"]] if "delta0" in init else
              list(np.linspace(-math.pi, math.pi, n_start_phases, endpoint=False)))
    problems = []
    for ph in phases:
        start = dict(init, delta0=ph)
        problems.append(FitProblem((series,), "timeseries", fixed,
                                   {k: start[k] for k in free_names}, weighting, n_traces,
                                   finite_window=finite_window))
    res = _best_of(problems)
    notes = [f"|g| is an upper limit: gamma_ion pinned to {gamma_ion_hz:g} Hz"]
    if free_gamma_ion:
        # the |g|-gamma_ion valley is too flat for the optimizer to settle in,
        # so freeing gamma_ion is assessed on the linearized problem at the optimum
        free = {k: res.values[k] for k in free_names}
        free["gamma_ion_hz"] = gamma_ion_hz
        fixed_wo = {k: v for k, v in fixed.items() if k != "gamma_ion_hz"}
        probe = FitProblem((series,), "timeseries", fixed_wo, free, weighting, n_traces,
                           finite_window=finite_window)
        cov, names, deg = linearized_covariance(probe)
        i, j = names.index("g_abs_hz"), names.index("gamma_ion_hz")
        if deg and ("g_abs_hz" in deg or "gamma_ion_hz" in deg):
            rho = math.nan
        else:
            rho = float(cov[i, j] / math.sqrt(cov[i, i] * cov[j, j]))
        res.derived["corr_g_gamma_ion"] = rho
        res.derived["sigma_gamma_ion_hz"] = (float(math.sqrt(cov[j, j]))
                                             if np.isfinite(cov[j, j]) else math.inf)
        if math.isnan(rho) or abs(rho) > 0.9:
            warnings.warn(
                f"|g| and gamma_ion are degenerate (rho={rho:.5f}); freeing gamma_ion "
                "leaves |g| undetermined, keep it pinned", DegeneracyWarning, stacklevel=2)
            notes.append("|g| and gamma_ion degenerate")
    res.notes = tuple(notes)
    return res


# ------------------------------------------------------------ step 3

def fit_full_spectrum(spectrum: Spectrum, fixed: dict, *, initial: dict | None = None,
                      weighting: str = "model", n_traces: int | None = None,
                      n_start_phases: int = 8, on_degenerate: str = "warn",
                      free_gamma_q: bool = False, finite_window: bool = False) -> FitResult:
    """Step 3: delta, nu_ion, nu_q, |a(t0)|, |b(t0)| from one spectrum.

    ``fixed`` carries gamma_q_hz, gamma_ion_hz, n_q (= n_ion), g_abs_hz,
    s_noise, v0 and optionally g_arg.  The ERP is reported in ``derived``.
    """
    if spectrum.window.t_d > 2.0:
        warnings.warn("acquisition windows longer than ~2 s are known to make the spectral "
                      "fit function unreliable", LongWindowWarning, stacklevel=2)
    fixed = dict(fixed)
    fixed.setdefault("g_arg", math.pi / 2)
    n_traces = n_traces or spectrum.meta.get("n_traces")
    free_names = list(DEFAULT_FREE["full"])
    if free_gamma_q:
        free_names.append("gamma_q_hz")
    init = dict(initial or {})
    for k in ("nu_q", "nu_ion", "gamma_q_hz"):
        if k in free_names and k not in init:
            init[k] = fixed.pop(k) if k in fixed else None
    if init.get("nu_q") is None:
        init["nu_q"] = float(spectrum.nu_offset[np.argmax(spectrum.values)])
    if init.get("nu_ion") is None:
        init["nu_ion"] = init["nu_q"]
    if free_gamma_q and init.get("gamma_q_hz") is None:
        init["gamma_q_hz"] = background_guess([spectrum], fixed["v0"])["gamma_q_hz"]
    for k in free_names:
        fixed.pop(k, None)
    if "a_abs" not in init or "b_abs" not in init:
        base = dict(fixed)
        base.update(init)
        probe = FitProblem((spectrum,), "full", fixed, {k: 1.0 for k in free_names}, "model", 1)
        a, b = _amplitude_guess(probe, base, "a_abs", "b_abs", "delta")
        init.setdefault("a_abs", a)
        init.setdefault("b_abs", b)
    phases = ([init["delta"]] if "delta" in init else
              list(np.linspace(-math.pi, math.pi, n_start_phases, endpoint=False)))
    problems = [FitProblem((spectrum,), "full", fixed, {k: dict(init, delta=ph)[k] for k in free_names},
                           weighting, n_traces, finite_window=finite_window) for ph in phases]
    res = _best_of(problems, on_degenerate=on_degenerate)
    v = res.values
    if v["g_abs_hz"] > 0:
        res.derived["erp"] = effective_relative_phase(
            complex(math.cos(v["g_arg"]), math.sin(v["g_arg"])), v["delta"])
    return res


def fit_shortened(spectrum: Spectrum, fixed: dict, *, g_ref_hz: float, n_ions_ref: int,
                  n_ions: int, **kw) -> FitResult:
    """Shortened pipeline: skip step 2, scale a previously fitted |g| by
    sqrt(N'/N) and let gamma_q float in the full-spectrum fit."""
    fixed = dict(fixed)
    fixed["g_abs_hz"] = g_ref_hz * math.sqrt(n_ions / n_ions_ref)
    res = fit_full_spectrum(spectrum, fixed, free_gamma_q=True, **kw)
    res.notes = (f"|g| scaled from {g_ref_hz:g} Hz by sqrt({n_ions}/{n_ions_ref})",)
    return res


def fit_joint(spectra, fixed: dict, initial: dict, *, weighting: str = "model",
              n_traces: int | None = None, finite_window: bool = False) -> FitResult:
    """All spectra at once with a shared |g|: the moments at each t0 follow
    from free propagation of (|a(0)|, |b(0)|, delta(0))."""
    spectra = sorted(spectra, key=lambda s: s.window.t0)
    check_same_grid(spectra)
    n_traces = n_traces or spectra[0].meta.get("n_traces")
    fixed = {k: v for k, v in fixed.items() if k not in DEFAULT_FREE["joint"]}
    fixed.setdefault("g_arg", math.pi / 2)
    free = {k: initial[k] for k in DEFAULT_FREE["joint"]}
    prob = FitProblem(spectra, "joint", fixed, free, weighting, n_traces,
                      finite_window=finite_window)
    return run_fit(prob)


def propagate_state(values: dict, t0: float) -> MomentVector:
    """Moments at t0 implied by a step-2 result (free evolution from 0)."""
    v = dict(values)
    v.setdefault("n_ion", v["n_q"])
    p = model_params(v)
    x0 = MomentVector.from_polar(v["a0_abs"], v["delta0"], v["b0_abs"], 0.0).as_array()
    return MomentVector.from_array(propagator(build_evolution_matrix(p), t0) @ x0)
