"""Run configuration, spectrum files and fit-result files.

Files carry frequencies as Hz offsets from nu_rf; conversion to rad/s
happens here and nowhere else.
"""

from __future__ import annotations

import configparser
import copy
import io as _io
import math
import os
import tempfile
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .constants import TWO_PI
from .model import ModelParams, MomentVector
from .spectrum import Spectrum, SpectrumWindow


class ConfigError(ValueError):
    """Invalid configuration; the message carries file and line."""


# section -> key -> (type, default); None default means required
SCHEMA = {
    "model": {
        "nu_rf_hz": (float, 2.6897e6),
        "nu_ion_offset_hz": (float, 1.35),
        "nu_q_offset_hz": (float, 1.99),
        "gamma_ion_hz": (float, 0.0),
        "gamma_q_hz": (float, 39.81),
        "g_abs_hz": (float, 1.449),
        "g_arg_rad": (float, math.pi / 2),
        "n_ion": (float, 2.32e6),
        "n_q": (float, 2.32e6),
        "v0": (float, 4e-11),
        "s_noise_v2rms": (float, 3.101e-18),
    },
    "state": {
        "a0_abs": (float, 1e4),
        "b0_abs": (float, 1e7),
        "delta0_deg": (float, -150.0),
        "evolution": (str, "free"),
    },
    "window": {
        "t0_s": (list, [0.0, 0.014, 0.025, 0.05]),
        "td_s": (float, 1.0),
        "sample_rate_hz": (float, 4000.0),
        "carrier_hz": (float, 998.65),
        "span_hz": (list, [-50.0, 50.0]),
    },
    "simulate": {
        "closed_form": (bool, True),
        "monte_carlo": (bool, True),
        "n_traces": (int, 20),
        "n_background": (int, 0),
        "save_traces": (bool, False),
    },
    "fit": {
        "stage": (str, "all"),
        "weighting": (str, "model"),
        "coupling_nu_hz": (float, 1.35),
        "full_t0_s": (list, None),
        "finite_window": (bool, False),
        "free_gamma_ion": (bool, False),
        "initial": (dict, {}),
    },
    "check": {
        "tolerance": (float, 1e-10),
        "n_random": (int, 10),
    },
    "io": {
        "out": (str, "out"),
        "data": (str, None),
        "seed": (int, 1),
    },
    "trap": {
        "magnetic_field_t": (float, 7.0),
        "ring_voltage_v": (float, 10.0),
        "char_distance_m": (float, 5e-3),
        "ion_mass_kg": (float, 6.6359e-26),
        "ion_charge_c": (float, 1.602176634e-19),
        "ion_count": (int, 1),
    },
}

ENUMS = {
    ("state", "evolution"): ("free", "ringdown"),
    ("fit", "stage"): ("background", "coupling", "full", "all"),
    ("fit", "weighting"): ("model", "data"),
}


def _defaults() -> dict:
    return {sec: {k: copy.deepcopy(d) for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}


@dataclass
class RunConfig:
    model: dict = field(default_factory=lambda: _defaults()["model"])
    state: dict = field(default_factory=lambda: _defaults()["state"])
    window: dict = field(default_factory=lambda: _defaults()["window"])
    simulate: dict = field(default_factory=lambda: _defaults()["simulate"])
    fit: dict = field(default_factory=lambda: _defaults()["fit"])
    check: dict = field(default_factory=lambda: _defaults()["check"])
    io: dict = field(default_factory=lambda: _defaults()["io"])
    trap: dict = field(default_factory=lambda: _defaults()["trap"])
    source: str = "<defaults>"

    def to_dict(self) -> dict:
        return {sec: copy.deepcopy(getattr(self, sec)) for sec in SCHEMA}

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_dict(cls, data: dict, source: str = "<dict>") -> "RunConfig":
        return _build(data, {}, source)

    # -- derived objects

    def params(self) -> ModelParams:
        m = self.model
        return ModelParams.from_offsets(
            nu_rf=m["nu_rf_hz"], nu_ion_offset=m["nu_ion_offset_hz"],
            nu_q_offset=m["nu_q_offset_hz"], gamma_ion_hz=m["gamma_ion_hz"],
            gamma_q_hz=m["gamma_q_hz"], g_hz=m["g_abs_hz"], g_arg=m["g_arg_rad"],
            n_ion=m["n_ion"], n_q=m["n_q"], v0=m["v0"])

    def initial_state(self) -> MomentVector:
        s = self.state
        return MomentVector.from_polar(s["a0_abs"], math.radians(s["delta0_deg"]), s["b0_abs"], 0.0)

    def t0_list(self) -> list:
        return [float(t) for t in self.window["t0_s"]]

    def span(self) -> tuple:
        lo, hi = self.window["span_hz"]
        return float(lo), float(hi)

    def trap_config(self):
        from .trap import TrapConfig

        t = self.trap
        # electrode geometry only enters the coupling constant, not the frequencies
        return TrapConfig(magnetic_field=t["magnetic_field_t"], ring_voltage=t["ring_voltage_v"],
                          char_distance=t["char_distance_m"], ion_mass=t["ion_mass_kg"],
                          ion_charge=t["ion_charge_c"], geom_factor=1.0,
                          electrode_half_gap=1.0, ion_count=t["ion_count"])

    def background_values(self) -> dict:
        m = self.model
        return {"n_q": m["n_q"], "gamma_q_hz": m["gamma_q_hz"],
                "s_noise": m["s_noise_v2rms"], "nu_q": m["nu_q_offset_hz"]}


def _line(node) -> int:
    return node.start_mark.line + 1


def _convert(value, typ, where):
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            # yaml 1.1 reads "1e4" (no dot) as a string
            try:
                return float(value)
            except (TypeError, ValueError):
                raise ConfigError(f"{where}: expected a number, got {value!r}") from None
        return float(value)
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if typ is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if typ is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if typ is list:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        try:
            return [float(v) for v in value]
        except (TypeError, ValueError):
            raise ConfigError(f"{where}: list entries must be numbers") from None
    if typ is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping, got {value!r}")
        return {str(k): _convert(v, float, f"{where}.{k}") for k, v in value.items()}
    raise TypeError(typ)


def _build(data, lines: dict, source: str) -> RunConfig:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    cfg = _defaults()
    for sec, body in data.items():
        where = f"{source}:{lines.get((sec,), '?')}"
        if sec not in SCHEMA:
            raise ConfigError(f"{where}: unknown section {sec!r} "
                              f"(expected one of {', '.join(SCHEMA)})")
        if body is None:
            continue
        if not isinstance(body, dict):
            raise ConfigError(f"{where}: section {sec!r} must be a mapping")
        for key, value in body.items():
            kwhere = f"{source}:{lines.get((sec, key), '?')}"
            if key not in SCHEMA[sec]:
                raise ConfigError(f"{kwhere}: unknown key {key!r} in section {sec!r}")
            typ = SCHEMA[sec][key][0]
            if value is None and SCHEMA[sec][key][1] is None:
                cfg[sec][key] = None
                continue
            value = _convert(value, typ, f"{kwhere}: {sec}.{key}")
            allowed = ENUMS.get((sec, key))
            if allowed and value not in allowed:
                raise ConfigError(f"{kwhere}: {sec}.{key} must be one of {allowed}, got {value!r}")
            cfg[sec][key] = value
    _validate(cfg, source, lines)
    return RunConfig(**cfg, source=source)


def _validate(cfg, source, lines):
    def fail(sec, key, msg):
        raise ConfigError(f"{source}:{lines.get((sec, key), '?')}: {sec}.{key} {msg}")

    w = cfg["window"]
    if len(w["span_hz"]) != 2 or not w["span_hz"][0] <= w["span_hz"][1]:
        fail("window", "span_hz", "must be [low, high] with low <= high")
    if not w["td_s"] > 0:
        fail("window", "td_s", "must be > 0")
    if any(t < 0 for t in w["t0_s"]):
        fail("window", "t0_s", "entries must be >= 0")
    if cfg["simulate"]["n_traces"] < 1:
        fail("simulate", "n_traces", "must be >= 1")


def load_config(path: str | os.PathLike | None = None) -> RunConfig:
    """Read a YAML run configuration; unknown keys are rejected with their line."""
    if path is None:
        text = resources.files("quartzion").joinpath("data/default.yaml").read_text()
        source = "default.yaml"
    else:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"{path}: cannot read config ({e.strerror})") from None
        source = str(path)
    return parse_config(text, source)


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        line = mark.line + 1 if mark is not None else "?"
        raise ConfigError(f"{source}:{line}: YAML syntax error: {getattr(e, 'problem', e)}") from None
    lines = {}
    if isinstance(root, yaml.MappingNode):
        for knode, vnode in root.value:
            lines[(knode.value,)] = _line(knode)
            if isinstance(vnode, yaml.MappingNode):
                for k2, _ in vnode.value:
                    lines[(knode.value, k2.value)] = _line(k2)
    return _build(data, lines, source)


# ---------------------------------------------------------------- files

def atomic_write(path: str | os.PathLike, text: str) -> None:
    """Write to a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


SPECTRUM_COLUMNS = ("frequency_offset_hz", "psd_v2rms", "sigma_v2rms")


def _fmt(x) -> str:
    return repr(float(x))


def spectrum_to_text(spec: Spectrum, meta: dict | None = None) -> str:
    """'#'-prefixed key=value header, then three whitespace-separated columns."""
    win = spec.window
    head = {"t0_s": win.t0, "td_s": win.t_d}
    if win.sample_rate is not None:
        head["sample_rate_hz"] = win.sample_rate
    if win.carrier is not None:
        head["carrier_hz"] = win.carrier
    for k, v in {**spec.meta, **(meta or {})}.items():
        if isinstance(v, (int, float, str, np.integer, np.floating)):
            head[k] = v
    out = _io.StringIO()
    for k, v in head.items():
        if isinstance(v, (float, np.floating)):
            v = _fmt(v)
        out.write(f"# {k}={v}\n")
    out.write("# " + " ".join(SPECTRUM_COLUMNS) + "\n")
    sigma = spec.sigma if spec.sigma is not None else np.full_like(spec.values, np.nan)
    for nu, s, e in zip(win.nu_offset, spec.values, sigma):
        out.write(f"{_fmt(nu)} {_fmt(s)} {_fmt(e)}\n")
    return out.getvalue()


def write_spectrum(path, spec: Spectrum, meta: dict | None = None) -> None:
    atomic_write(path, spectrum_to_text(spec, meta))


def _parse_meta_value(v: str):
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v


def read_spectrum(path) -> Spectrum:
    path = Path(path)
    meta, rows = {}, []
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise ConfigError(f"{path}: cannot read spectrum ({e.strerror})") from None
    for n, line in enumerate(lines, 1):
        s = line.strip()
        if not s:
            continue
        if s.startswith("#"):
            body = s[1:].strip()
            if "=" in body:
                k, v = body.split("=", 1)
                meta[k.strip()] = _parse_meta_value(v.strip())
            continue
        parts = s.split()
        if len(parts) != 3:
            raise ConfigError(f"{path}:{n}: expected 3 columns, got {len(parts)}")
        try:
            rows.append([float(x) for x in parts])
        except ValueError:
            raise ConfigError(f"{path}:{n}: non-numeric value") from None
    if not rows:
        raise ConfigError(f"{path}: no data rows")
    for k in ("t0_s", "td_s"):
        if k not in meta:
            raise ConfigError(f"{path}: header lacks {k}")
    data = np.array(rows)
    win = SpectrumWindow(float(meta.pop("t0_s")), float(meta.pop("td_s")), TWO_PI * data[:, 0],
                         sample_rate=meta.pop("sample_rate_hz", None),
                         carrier=meta.pop("carrier_hz", None))
    sigma = data[:, 2]
    sigma = None if np.all(np.isnan(sigma)) else sigma
    meta["path"] = str(path)
    return Spectrum(win, data[:, 1], sigma, meta=meta)


def read_spectra(directory, kind: str | None = None) -> list:
    """All spectrum files in a directory (optionally of one ``kind``), by t0."""
    directory = Path(directory)
    if not directory.is_dir():
        raise ConfigError(f"{directory}: not a directory")
    out = []
    for f in sorted(directory.glob("*.txt")):
        if f.name.startswith(("result_", "plotdata_")):
            continue
        s = read_spectrum(f)
        if kind is None or s.meta.get("kind") == kind:
            out.append(s)
    return sorted(out, key=lambda s: s.window.t0)


def result_to_text(res, extra: dict | None = None) -> str:
    """INI-style sections: fit, values, errors, derived, diagnostics, notes."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp["fit"] = {"model": res.model, **{k: str(v) for k, v in (extra or {}).items()}}
    cp["values"] = {k: _fmt(v) for k, v in res.values.items()}
    cp["errors"] = {k: _fmt(v) for k, v in res.errors.items()}
    cp["derived"] = {k: _fmt(v) for k, v in res.derived.items()}
    cp["diagnostics"] = {
        "chi2": _fmt(res.chi2), "chi2_nu": _fmt(res.chi2_nu),
        "n_points": str(res.n_points), "n_free": str(res.n_free),
        "iterations": str(res.iterations), "grad_norm": _fmt(res.grad_norm),
        "converged": str(res.converged), "message": res.message,
        "free": ",".join(res.free_names), "degenerate": ",".join(res.degenerate),
        "provisional": ",".join(res.provisional),
    }
    cp["notes"] = {f"note{i}": n for i, n in enumerate(res.notes)}
    buf = _io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def write_result(path, res, extra: dict | None = None) -> None:
    atomic_write(path, result_to_text(res, extra))


def read_result(path) -> dict:
    """Parse a result file back into nested dicts; numbers become floats."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    if not cp.read(path):
        raise ConfigError(f"{path}: cannot read result file")
    out = {}
    for sec in cp.sections():
        out[sec] = {}
        for k, v in cp[sec].items():
            try:
                out[sec][k] = float(v)
            except ValueError:
                out[sec][k] = v
    return out
