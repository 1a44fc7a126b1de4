"""Command-line front end: simulate, fit, check, trap-freqs."""

from __future__ import annotations

import argparse
import math
import sys
import warnings
from pathlib import Path

from .fitting import DegenerateFitError, FitBoundsError, FitConvergenceError, GridMismatchError
from .io import ConfigError, load_config

EXIT_OK, EXIT_USAGE, EXIT_FIT, EXIT_CHECK = 0, 1, 2, 3


def _t0_list(text: str) -> list:
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--t0 expects comma-separated seconds, got {text!r}") from None
    if not vals or any(v < 0 for v in vals):
        raise argparse.ArgumentTypeError("--t0 needs at least one value, all >= 0")
    return vals


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="quartzion", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="YAML run configuration (default: bundled)")
        p.add_argument("--seed", type=int, help="master RNG seed (overrides io.seed)")
        p.add_argument("--out", type=Path, help="output directory (overrides io.out)")

    p = sub.add_parser("simulate", help="write closed-form and Monte-Carlo spectra")
    common(p)
    p.add_argument("--t0", type=_t0_list, help="window starts in seconds, e.g. 0,0.014,0.025")

    p = sub.add_parser("fit", help="run pipeline stages on spectrum files")
    common(p)
    p.add_argument("data", nargs="?", type=Path, help="directory of spectrum files (default: io.data)")
    p.add_argument("--stage", choices=("background", "coupling", "full", "all"))
    p.add_argument("--t0", type=_t0_list, help="restrict the full-spectrum stage to these t0")

    p = sub.add_parser("check", help="run the self-consistency checks")
    common(p)
    p.add_argument("--quick", action="store_true", help="smaller grids and ensembles")

    p = sub.add_parser("trap-freqs", help="print Penning-trap eigenfrequencies")
    common(p)
    return ap


def _out_dir(args, cfg) -> Path:
    return args.out if args.out is not None else Path(cfg.io["out"])


def cmd_simulate(args, cfg) -> int:
    from .pipeline import simulate

    paths = simulate(cfg, _out_dir(args, cfg), seed=args.seed, t0s=args.t0)
    for path in paths:
        print(path)
    return EXIT_OK


def cmd_fit(args, cfg) -> int:
    from .pipeline import fit

    data = args.data if args.data is not None else cfg.io["data"]
    if data is None:
        raise ConfigError("no data directory given (argument or io.data)")
    if args.t0 is not None:
        cfg.fit["full_t0_s"] = args.t0
    results = fit(cfg, data, _out_dir(args, cfg), stage=args.stage)
    for stage, res in results.items():
        for r in res if isinstance(res, list) else [res]:
            vals = ", ".join(f"{k}={r.values[k]:.6g}+-{r.errors[k]:.2g}" for k in r.free_names)
            print(f"{stage}: chi2_nu={r.chi2_nu:.4g} {vals}")
    return EXIT_OK


def cmd_check(args, cfg) -> int:
    from .checks import run_checks

    results = run_checks(cfg, seed=args.seed, quick=args.quick)
    for r in results:
        print(r.line())
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_CHECK


def cmd_trap_freqs(args, cfg) -> int:
    from .trap import axial_frequency, cyclotron_frequency, radial_frequencies

    tc = cfg.trap_config()
    wc = cyclotron_frequency(tc)
    wz = axial_frequency(tc)
    wp, wm = radial_frequencies(tc)
    tp = 2.0 * math.pi
    for name, w in (("nu_c", wc), ("nu_z", wz), ("nu_plus", wp), ("nu_minus", wm)):
        print(f"{name}_hz={w / tp!r}")
    print(f"sum_residual={abs(wp + wm - wc) / wc!r}")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "check": cmd_check,
            "trap-freqs": cmd_trap_freqs}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.io["seed"] = args.seed
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return COMMANDS[args.command](args, cfg)
    except (FitConvergenceError, DegenerateFitError, FitBoundsError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FIT
    except (ConfigError, GridMismatchError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
