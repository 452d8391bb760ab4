"""Command-line entry point: ``llspin <command> ...``.

Exit codes: 0 success, 1 usage error, 2 input error, 3 numerical failure.
Every command prints a human table by default and ``key=value`` lines with
``--format kv``.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from typing import Callable, Optional, Sequence, TextIO

import numpy as np

from .analysis import (
    FITTERS,
    DecayCurve,
    FitError,
    contrast,
    enhancement_factor,
    fit_buildup,
    thermal_polarization,
)
from .calibration import CalibrationError
from .experiments import (
    BUILTIN_SCENARIOS,
    BUILTIN_SEQUENCES,
    SWEEP_VARIABLES,
    TIMING_MODES,
    Experiment,
    builtin_sequence_text,
    calibrate_scenario,
    load_scenario,
    sweep_simulate,
)
from .relaxation import RelaxationModel, decoherence_free_subspace, dipolar_redfield_superoperator
from .seqlang import SourceError, format_basis, format_curve, read_curve, serialize_system
from .sequences import compute_m2s_timings, half_period_m2s_timings

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")

    def exit(self, status=0, message=None):
        if message:
            sys.stderr.write(message)
        raise SystemExit(status)


# ----------------------------------------------------------------- output


class _Out:
    def __init__(self, fmt: str, stream: TextIO):
        self.fmt = fmt
        self.stream = stream

    def table(self, rows: Sequence[tuple[str, str, str]]):
        """rows of (key, machine value, human value)."""
        if self.fmt == "kv":
            for k, v, _ in rows:
                self.stream.write(f"{k}={v}\n")
            return
        width = max(len(k) for k, _, _ in rows)
        for k, _, human in rows:
            self.stream.write(f"{k.ljust(width)}  {human}\n")


def _g(x: float) -> str:
    return format(float(x), ".17g")


# --------------------------------------------------------------- helpers


def _existing(path: str) -> str:
    if not os.path.isfile(path):
        raise InputError(f"no such file: {path}")
    return path


def _scenario(args):
    src = args.scenario
    if src in BUILTIN_SCENARIOS:
        return load_scenario(src)
    return load_scenario(_existing(src))


def _curve(path: str) -> DecayCurve:
    return read_curve(_existing(path))


def _writable(path: Optional[str]) -> None:
    if path and path != "-":
        parent = os.path.dirname(os.path.abspath(path))
        if not os.path.isdir(parent):
            raise InputError(f"output directory does not exist: {parent}")


def _emit(text: str, path: Optional[str], stdout: TextIO) -> None:
    if not path or path == "-":
        stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)


def _grid(spec: str) -> np.ndarray:
    """``start:stop:n`` (inclusive linspace) or a comma list."""
    try:
        if ":" in spec:
            parts = spec.split(":")
            if len(parts) != 3:
                raise ValueError
            start, stop, n = float(parts[0]), float(parts[1]), int(parts[2])
            if n < 1:
                raise ValueError
            if n == 1:
                return np.array([start])
            return np.linspace(start, stop, n)
        return np.array([float(x) for x in spec.split(",")])
    except ValueError:
        raise InputError(f"bad grid {spec!r}; use start:stop:n or a comma-separated list") from None


def _positive(name: str) -> Callable[[str], float]:
    def conv(s: str) -> float:
        try:
            v = float(s)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be a number, got {s!r}") from None
        if not (math.isfinite(v) and v > 0):
            raise argparse.ArgumentTypeError(f"{name} must be positive, got {s!r}")
        return v

    return conv


# --------------------------------------------------------------- commands


def cmd_simulate(args, out: _Out, stdout: TextIO) -> int:
    _writable(args.out)
    sc = _scenario(args)
    grid = _grid(args.grid)
    seq_text = None
    if args.sequence in BUILTIN_SEQUENCES:
        seq_text = builtin_sequence_text(args.sequence)
    elif args.sequence:
        with open(_existing(args.sequence), encoding="utf-8") as fh:
            seq_text = fh.read()
    exp = Experiment(sc)
    timings = exp.timings(args.timings) if args.variable == "lock_duration" or seq_text else None
    curve = sweep_simulate(sc, args.variable, grid, timings=timings, sequence_text=seq_text, t00_filter=not args.no_filter)
    if args.noise:
        rng = np.random.default_rng(args.seed)
        noisy = curve.amplitudes + rng.normal(0.0, args.noise, size=len(curve))
        meta = dict(curve.metadata) | {"noise_sigma": _g(args.noise), "seed": str(args.seed)}
        curve = DecayCurve(curve.times, noisy, metadata=meta)
    _emit(format_curve(curve), args.out, stdout)
    return EXIT_OK


def cmd_dfs(args, out: _Out, stdout: TextIO) -> int:
    _writable(args.out)
    sc = _scenario(args)
    if args.mechanism == "dipolar":
        gen = dipolar_redfield_superoperator(sc.system, sc.relaxation or RelaxationModel(1e-11, 0.0, sc.larmor_rad_s))
    else:
        gen = Experiment(sc).relaxation_generator
    dfs = decoherence_free_subspace(gen, args.tol)
    s = dfs.singular_values
    k = dfs.dimension
    n = s.size
    kept = float(s[n - k]) if k else float("nan")
    rejected = float(s[n - k - 1]) if k < n else float("nan")
    rows = [
        ("scenario", sc.name, sc.name),
        ("mechanism", args.mechanism, args.mechanism),
        ("dimension", str(k), str(k)),
        ("operator_space", str(n), str(n)),
        ("tolerance", _g(dfs.tol), f"{dfs.tol:.3e}"),
        ("largest_null_singular_value", _g(kept), f"{kept:.3e}"),
        ("smallest_nonnull_singular_value", _g(rejected), f"{rejected:.3e}"),
    ]
    out.table(rows)
    if args.out:
        _emit(format_basis(dfs.basis, {"scenario": sc.name, "mechanism": args.mechanism}), args.out, stdout)
    return EXIT_OK


def _fit_rows(res, label: str = "") -> list[tuple[str, str, str]]:
    p = f"{label}_" if label else ""
    rows = [
        (f"{p}model", res.model, res.model),
        (f"{p}lifetime_s", _g(res.lifetime), f"{res.lifetime:.4g} s"),
        (f"{p}lifetime_stderr_s", _g(res.lifetime_stderr), f"+/- {res.lifetime_stderr:.2g} s"),
        (f"{p}amplitude", _g(res.amplitude), f"{res.amplitude:.6g}"),
        (f"{p}offset", _g(res.offset), f"{res.offset:.6g}"),
        (f"{p}rms_residual", _g(res.rms_residual), f"{res.rms_residual:.3g}"),
    ]
    if res.kappa is not None:
        rows.append((f"{p}kappa", _g(res.kappa), f"{res.kappa:.4g}"))
    return rows


def cmd_fit(args, out: _Out, stdout: TextIO) -> int:
    res = FITTERS[args.model](_curve(args.curve))
    out.table(_fit_rows(res))
    return EXIT_OK


def cmd_buildup(args, out: _Out, stdout: TextIO) -> int:
    res = fit_buildup(_curve(args.curve))
    rows = _fit_rows(res)
    rows[1] = ("buildup_time_s", _g(res.lifetime), f"{res.lifetime:.4g} s")
    rows[3] = ("plateau", _g(res.amplitude), f"{res.amplitude:.6g}")
    out.table(rows)
    return EXIT_OK


def cmd_contrast(args, out: _Out, stdout: TextIO) -> int:
    if args.free is not None and args.free_curve is not None:
        raise UsageError("contrast: give --free or --free-curve, not both")
    if args.obs is not None and args.obs_curve is not None:
        raise UsageError("contrast: give --obs or --obs-curve, not both")
    rows = []
    free, obs = args.free, args.obs
    if free is None:
        if args.free_curve is None:
            raise UsageError("contrast: --free or --free-curve is required")
        r = FITTERS[args.model](_curve(args.free_curve))
        free = r.lifetime
        rows.append(("free_fit_lifetime_s", _g(free), f"{free:.4g} s"))
    if obs is None:
        if args.obs_curve is None:
            raise UsageError("contrast: --obs or --obs-curve is required")
        r = FITTERS[args.model](_curve(args.obs_curve))
        obs = r.lifetime
        rows.append(("obs_fit_lifetime_s", _g(obs), f"{obs:.4g} s"))
    c = contrast(free, obs)
    rows += [
        ("t_free_s", _g(free), f"{free:g} s"),
        ("t_obs_s", _g(obs), f"{obs:g} s"),
        ("contrast", _g(c), f"{c:.3f} ({100 * c:.0f}%)"),
    ]
    out.table(rows)
    return EXIT_OK


def cmd_timings(args, out: _Out, stdout: TextIO) -> int:
    f = compute_m2s_timings(args.j, args.dnu)
    h = half_period_m2s_timings(args.j, args.dnu)
    rows = []
    for tag, t in (("", f), ("half_period_", h)):
        for k, v in t.as_dict().items():
            rows.append((f"{tag}{k}_s", _g(v), f"{1e3 * v:.2f} ms"))
    out.table(rows)
    return EXIT_OK


def cmd_polarization(args, out: _Out, stdout: TextIO) -> int:
    p = thermal_polarization(args.field, args.temperature)
    rows = [
        ("field_t", _g(args.field), f"{args.field:g} T"),
        ("temperature_k", _g(args.temperature), f"{args.temperature:g} K"),
        ("thermal_polarization", _g(p), f"{p:.4g} ({100 * p:.3g}%)"),
    ]
    if args.measured is not None:
        e = enhancement_factor(args.measured, args.field, args.temperature)
        rows.append(("measured_polarization", _g(args.measured), f"{args.measured:.4g} ({100 * args.measured:.3g}%)"))
        rows.append(("enhancement", _g(e), f"{e:.4g}x"))
    out.table(rows)
    return EXIT_OK


def cmd_calibrate(args, out: _Out, stdout: TextIO) -> int:
    _writable(args.out)
    sc = _scenario(args)
    cal = calibrate_scenario(sc, args.t1, args.ts)
    from .calibration import LifetimeModel

    lm = LifetimeModel(cal.system, cal.larmor_rad_s, Experiment(cal).lock_settings, Experiment(cal).pairs)
    t1, ts = lm.lifetimes(cal.relaxation, cal.binding)
    rows = [
        ("scenario", cal.name, cal.name),
        ("tau_c_s", _g(cal.relaxation.tau_c), f"{cal.relaxation.tau_c:.4g} s"),
        ("random_field_rate_s", _g(cal.relaxation.random_field_rate), f"{cal.relaxation.random_field_rate:.4g} s^-1"),
    ]
    if cal.binding is not None:
        b = cal.binding
        rows += [
            ("bound_fraction", _g(b.bound_fraction), f"{b.bound_fraction:g}"),
            ("bound_tau_c_s", _g(b.bound_tau_c), f"{b.bound_tau_c:.4g} s"),
            ("bound_extra_rate_s", _g(b.bound_extra_random_field_rate), f"{b.bound_extra_random_field_rate:.4g} s^-1"),
        ]
    rows += [
        ("t1_s", _g(t1), f"{t1:.4g} s (target {cal.t1_target_s:g})"),
        ("ts_s", _g(ts), f"{ts:.4g} s (target {cal.ts_target_s:g})"),
        ("ts_over_t1", _g(ts / t1), f"{ts / t1:.3f}"),
    ]
    out.table(rows)
    if args.out:
        _emit(serialize_system(cal), args.out, stdout)
    return EXIT_OK


# ----------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="llspin", description="Singlet-pair spin dynamics and lifetime analysis.")
    p.add_argument("--format", choices=("table", "kv"), default="table", help="output style")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def scenario_arg(sp):
        sp.add_argument(
            "--scenario", required=True, help=f"built-in name ({', '.join(BUILTIN_SCENARIOS)}) or system file"
        )

    s = sub.add_parser("simulate", help="sweep a sequence and write a decay curve (CSV)")
    scenario_arg(s)
    s.add_argument("--variable", choices=SWEEP_VARIABLES, default="lock_duration")
    s.add_argument("--grid", default="0:60:31", help="start:stop:n or comma list (s)")
    s.add_argument("--sequence", help="DSL file or built-in name (singlet-locking, inversion-recovery); the sweep value is bound to 'tau'")
    s.add_argument("--timings", choices=TIMING_MODES, default="half-period")
    s.add_argument("--no-filter", action="store_true", help="omit the isotropic filter after the lock")
    s.add_argument("--noise", type=float, default=0.0, help="Gaussian noise sigma added to amplitudes")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="output CSV path (default stdout)")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("dfs", help="decoherence-free subspace of the relaxation generator")
    scenario_arg(s)
    s.add_argument("--mechanism", choices=("dipolar", "full"), default="dipolar",
                   help="intramolecular dipolar generator only, or everything in the scenario")
    s.add_argument("--tol", type=_positive("--tol"), default=None)
    s.add_argument("--out", help="write the basis as CSV")
    s.set_defaults(func=cmd_dfs)

    s = sub.add_parser("fit", help="fit a curve CSV")
    s.add_argument("curve")
    s.add_argument("--model", choices=tuple(FITTERS), default="exp")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("contrast", help="binding contrast of two lifetimes")
    s.add_argument("--free", type=_positive("--free"))
    s.add_argument("--obs", type=_positive("--obs"))
    s.add_argument("--free-curve")
    s.add_argument("--obs-curve")
    s.add_argument("--model", choices=tuple(FITTERS), default="exp", help="fit model for curve inputs")
    s.set_defaults(func=cmd_contrast)

    s = sub.add_parser("timings", help="preparation delays from J and the shift difference")
    s.add_argument("--j", type=_positive("--j"), required=True, help="Hz")
    s.add_argument("--dnu", type=_positive("--dnu"), required=True, help="Hz")
    s.set_defaults(func=cmd_timings)

    s = sub.add_parser("polarization", help="thermal polarization and enhancement")
    s.add_argument("--field", type=float, required=True, help="T")
    s.add_argument("--temperature", type=_positive("--temperature"), default=300.0, help="K")
    s.add_argument("--measured", type=_positive("--measured"), help="measured polarization fraction")
    s.set_defaults(func=cmd_polarization)

    s = sub.add_parser("calibrate", help="fit relaxation parameters to T1 and T_S")
    scenario_arg(s)
    s.add_argument("--t1", type=_positive("--t1"))
    s.add_argument("--ts", type=_positive("--ts"))
    s.add_argument("--out", help="write the calibrated system file")
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("buildup", help="fit a polarization buildup curve")
    s.add_argument("curve")
    s.set_defaults(func=cmd_buildup)
    return p


def run(argv: Optional[Sequence[str]] = None, stdout: Optional[TextIO] = None, stderr: Optional[TextIO] = None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    try:
        args = build_parser().parse_args(list(sys.argv[1:] if argv is None else argv))
    except UsageError as exc:
        stderr.write(f"{exc}\n")
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    out = _Out(args.format, stdout)
    try:
        return args.func(args, out, stdout)
    except UsageError as exc:
        stderr.write(f"usage error: {exc}\n")
        return EXIT_USAGE
    except (FitError, CalibrationError, np.linalg.LinAlgError, FloatingPointError) as exc:
        stderr.write(f"numerical failure in {args.command}: {exc}\n")
        return EXIT_NUMERIC
    except (InputError, SourceError, OSError, KeyError, ValueError) as exc:
        msg = str(exc).replace("\n", " ")
        stderr.write(f"input error in {args.command}: {msg}\n")
        return EXIT_INPUT


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
