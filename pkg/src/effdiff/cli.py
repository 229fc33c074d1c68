"""Command-line front end.

Usage::

    effdiff simulate  --config run.yaml [--M 100000 --h 0.01 ...]
    effdiff reference --problem benchmark-2d-variable --n 128 --out ref/
    effdiff converge  --config study.yaml
    effdiff compare   --problem benchmark-2d-constant --M 400000 --T 100

Settings come from an optional YAML file and are overridden by flags.
Unknown keys are rejected.  Every JSON output embeds the fully resolved
configuration (including the simulated horizon ``T = N h``); floats are
written with 17 significant digits so repeated runs compare byte for byte.

Exit codes: 0 success, 1 configuration error, 2 numerical failure.
"""

import argparse
import csv
import dataclasses
import json
import logging
import math
import os
import sys
from dataclasses import dataclass
from typing import Optional

import numpy as np
import yaml

from . import coeffs, eulerian, montecarlo
from .coeffs import CoefficientError
from .eulerian import EulerianSolverError
from .montecarlo import EnsembleConfig, EnsembleError
from .schemes import SCHEMES, SchemeConfig, StepError

log = logging.getLogger("effdiff")

COMMANDS = ("simulate", "reference", "converge", "compare")
EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2

CONVERGE_COLUMNS_HEAD = ["h", "scheme", "err_frobenius"]
CONVERGE_COLUMNS_TAIL = ["stderr", "wallclock"]


class ConfigError(ValueError):
    """Invalid run configuration."""


@dataclass
class RunConfig:
    command: str = "simulate"
    problem: object = "benchmark-2d-constant"
    shift: Optional[list] = None
    M: int = 100_000
    T: float = 10.0
    h: float = 0.01
    h_list: Optional[list] = None
    scheme: str = "modified-milstein"
    schemes: Optional[list] = None
    q: int = 2
    seed: int = 0
    x0: Optional[list] = None
    histogram_bins: int = 0
    burn_in_fraction: float = 0.1
    workers: int = 1
    n: int = 128
    tol_lin: float = eulerian.TOL_LIN
    rel_tol: float = 0.02
    gate: float = montecarlo.NOISE_GATE
    output: str = "effdiff-out"
    log_level: str = "INFO"

    @classmethod
    def keys(cls):
        return [f.name for f in dataclasses.fields(cls)]


# ---------------------------------------------------------------------------
# config loading


def _key_lines(text, path="<config>"):
    """Map top-level YAML keys to their 1-based line numbers."""
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{path}:{mark.line + 1}" if mark is not None else str(path)
        problem = getattr(exc, "problem", None) or str(exc)
        raise ConfigError(f"{where}: cannot parse config: {problem}") from None
    if node is None:
        return {}
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError("config file must contain a mapping of keys to values")
    return {k.value: k.start_mark.line + 1 for k, _ in node.value}


def load_config_file(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    lines = _key_lines(text, path)
    data = yaml.safe_load(text) or {}
    known = set(RunConfig.keys())
    for key in data:
        if key not in known:
            raise ConfigError(
                f"{path}:{lines.get(key, '?')}: unknown key {key!r}"
                f" (valid keys: {', '.join(sorted(known))})"
            )
    return data, lines


def _where(key, lines, path):
    if path and key in lines:
        return f"{path}:{lines[key]}: key {key!r}"
    return f"setting {key!r}"


def _coerce(cfg, lines, path):
    """Type-check and normalise the settings in place."""

    def fail(key, msg):
        raise ConfigError(f"{_where(key, lines, path)}: {msg}")

    def as_int(key, lo):
        v = getattr(cfg, key)
        if isinstance(v, bool) or not isinstance(v, (int, float)) or int(v) != v:
            fail(key, f"expected an integer, got {v!r}")
        if v < lo:
            fail(key, f"must be >= {lo}, got {v}")
        setattr(cfg, key, int(v))

    def as_float(key, positive=True):
        v = getattr(cfg, key)
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            fail(key, f"expected a finite number, got {v!r}")
        if positive and v <= 0:
            fail(key, f"must be positive, got {v}")
        setattr(cfg, key, float(v))

    if cfg.command not in COMMANDS:
        fail("command", f"must be one of {COMMANDS}")
    for key, lo in (("M", 2), ("q", 0), ("seed", 0), ("histogram_bins", 0),
                    ("workers", 1), ("n", eulerian.MIN_N)):
        as_int(key, lo)
    for key in ("T", "h", "tol_lin", "rel_tol", "gate"):
        as_float(key)
    as_float("burn_in_fraction", positive=False)
    if cfg.seed >= 2**64:
        fail("seed", "must be below 2**64")
    if cfg.histogram_bins == 1:
        fail("histogram_bins", "must be 0 (disabled) or at least 2")
    if not 0 <= cfg.burn_in_fraction < 1:
        fail("burn_in_fraction", "must lie in [0, 1)")
    for key in ("scheme",):
        if getattr(cfg, key) not in SCHEMES:
            fail(key, f"unknown scheme {getattr(cfg, key)!r}; choose from {sorted(SCHEMES)}")
    if cfg.schemes is not None:
        if not isinstance(cfg.schemes, list) or not cfg.schemes:
            fail("schemes", "expected a non-empty list of scheme names")
        for s in cfg.schemes:
            if s not in SCHEMES:
                fail("schemes", f"unknown scheme {s!r}; choose from {sorted(SCHEMES)}")
    if cfg.h_list is not None:
        hl = cfg.h_list
        if not isinstance(hl, list) or len(hl) < 3:
            fail("h_list", "expected a list of at least three step sizes")
        try:
            hl = [float(v) for v in hl]
        except (TypeError, ValueError):
            fail("h_list", f"entries must be numbers, got {cfg.h_list!r}")
        if any(not (math.isfinite(v) and v > 0) for v in hl):
            fail("h_list", "step sizes must be positive")
        if any(b >= a for a, b in zip(hl, hl[1:])):
            fail("h_list", f"must be strictly decreasing, got {hl}")
        cfg.h_list = hl
    for key in ("shift", "x0"):
        v = getattr(cfg, key)
        if v is not None:
            try:
                setattr(cfg, key, [float(c) for c in v])
            except (TypeError, ValueError):
                fail(key, f"expected a list of numbers, got {v!r}")
    if not isinstance(cfg.output, str) or not cfg.output:
        fail("output", "expected a directory path")
    if str(cfg.log_level).upper() not in ("DEBUG", "INFO", "WARNING", "ERROR"):
        fail("log_level", "must be DEBUG, INFO, WARNING or ERROR")
    return cfg


def build_problem(cfg, lines=None, path=None):
    lines = lines or {}
    entry = cfg.problem
    try:
        if isinstance(entry, str):
            prob = coeffs.get_problem(entry)
        elif isinstance(entry, dict):
            extra = set(entry) - {"name", "drift", "sigma", "fd_step"}
            if extra:
                raise ValueError(f"unknown inline problem keys {sorted(extra)}")
            if "drift" not in entry or "sigma" not in entry:
                raise ValueError("inline problems need 'drift' and 'sigma'")
            prob = coeffs.problem_from_expressions(
                list(entry["drift"]), [list(r) for r in entry["sigma"]],
                name=str(entry.get("name", "inline")),
                fd_step=float(entry.get("fd_step", coeffs.FD_STEP)),
            )
        else:
            raise ValueError("expected a benchmark name or an inline mapping")
        if cfg.shift is not None:
            if len(cfg.shift) != prob.dim:
                raise ValueError(f"shift needs {prob.dim} components")
            prob = coeffs.shifted(prob, cfg.shift) if any(cfg.shift) else prob
        if cfg.x0 is not None and len(cfg.x0) != prob.dim:
            raise ValueError(f"x0 needs {prob.dim} components")
    except (KeyError, ValueError, TypeError) as exc:
        msg = exc.args[0] if exc.args else str(exc)
        raise ConfigError(f"{_where('problem', lines, path)}: {msg}") from None
    return prob


def resolve_config(args):
    """Merge file settings and flag overrides into a checked :class:`RunConfig`."""
    data, lines, path = {}, {}, None
    if args.config:
        path = args.config
        data, lines = load_config_file(path)
    cfg = RunConfig(command=args.command)
    for key, value in data.items():
        if key == "command":
            continue
        setattr(cfg, key, value)
    for key in RunConfig.keys():
        v = getattr(args, key, None)
        if v is not None and key != "command":
            setattr(cfg, key, v)
            lines.pop(key, None)
    _coerce(cfg, lines, path)
    prob = build_problem(cfg, lines, path)
    return cfg, prob


# ---------------------------------------------------------------------------
# serialisation


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    return obj


def _encode(obj, indent=0):
    pad = "  " * (indent + 1)
    end = "  " * indent
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(k)}: {_encode(v, indent + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, list):
        if all(not isinstance(v, (dict, list)) for v in obj):
            return "[" + ", ".join(_encode(v) for v in obj) + "]"
        return "[\n" + ",\n".join(pad + _encode(v, indent + 1) for v in obj) + "\n" + end + "]"
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, float):
        return f"{obj:.16e}" if math.isfinite(obj) else "null"
    return json.dumps(obj)


def dumps(obj):
    """JSON text with every float in ``%.16e`` form (exact round trip)."""
    return _encode(_plain(obj)) + "\n"


def write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps(obj))


def _config_record(cfg, prob, extra=None):
    rec = {k: getattr(cfg, k) for k in RunConfig.keys() if k != "log_level"}
    rec["problem_name"] = prob.name
    rec["dim"] = prob.dim
    rec.update(extra or {})
    return rec


def _ensemble_config(cfg, h, scheme):
    return EnsembleConfig(
        M=cfg.M, T=cfg.T,
        scheme=SchemeConfig(scheme, h, cfg.q),
        seed=cfg.seed, x0=cfg.x0,
        histogram_bins=cfg.histogram_bins,
        burn_in_fraction=cfg.burn_in_fraction,
        workers=cfg.workers,
    )


def _estimate_record(est):
    return {"matrix": est.matrix, "stderr": est.stderr, "M": est.M, "T": est.T, "h": est.h}


# ---------------------------------------------------------------------------
# workflows


def run_simulate(cfg, prob):
    ec = _ensemble_config(cfg, cfg.h, cfg.scheme)
    res = montecarlo.simulate_ensemble(prob, ec)
    log.info("simulated %d particles x %d steps in %.1f s", ec.M, ec.n_steps, res.wallclock)
    out = {
        "config": _config_record(cfg, prob, {"T_effective": ec.horizon, "n_steps": ec.n_steps}),
        "diffusivity": _estimate_record(res.diffusivity),
        "mean_drift": res.mean_drift,
        "mean_drift_stderr": res.mean_drift_stderr,
        "failures": res.failures,
    }
    write_json(os.path.join(cfg.output, "simulate.json"), out)
    if res.histogram is not None:
        res.histogram.to_csv(os.path.join(cfg.output, "histogram.csv"))
    return out


def run_reference(cfg, prob):
    sol = eulerian.solve(prob, cfg.n, cfg.tol_lin)
    out = {
        "config": _config_record(cfg, prob),
        "A_eff": sol.A_eff,
        "b_bar": sol.b_bar,
        "density_residual": sol.density_residual,
        "cell_residuals": sol.cell_residuals,
        "asymmetry": sol.asymmetry,
        "method": sol.meta["method"],
    }
    write_json(os.path.join(cfg.output, "reference.json"), out)
    sol.r.to_csv(os.path.join(cfg.output, "density.csv"))
    sol.chi.to_csv(os.path.join(cfg.output, "corrector.csv"))
    return out


def converge_columns(d):
    entries = [f"err_entry_{i + 1}{j + 1}" for i in range(d) for j in range(d)]
    return CONVERGE_COLUMNS_HEAD + entries + CONVERGE_COLUMNS_TAIL


def run_converge(cfg, prob):
    if cfg.h_list is None:
        raise ConfigError("converge needs 'h_list' (at least three step sizes)")
    schemes = cfg.schemes or [cfg.scheme]
    ref = eulerian.solve(prob, cfg.n, cfg.tol_lin).A_eff
    d = prob.dim
    entries = [(i, j) for i in range(d) for j in range(i, d)]
    rows, fits = [], {}
    for scheme in schemes:
        base = _ensemble_config(cfg, cfg.h_list[0], scheme)
        table = montecarlo.convergence_study(prob, cfg.h_list, base, ref, entries, cfg.gate)
        for row in table.rows:
            rows.append([row.h, row.scheme, row.err_frobenius]
                        + list(row.error.ravel()) + [row.stderr_frobenius, row.wallclock])
        fits[scheme] = {
            "slope": table.slope,
            "intercept": table.intercept,
            "used_h": [r.h for r, u in zip(table.rows, table.used) if u],
            "excluded_h": table.excluded,
            "entry_slopes": {
                f"{i + 1}{j + 1}": {"slope": s, "excluded_h":
                                    [r.h for r, k in zip(table.rows, u) if not k]}
                for (i, j), (s, u) in table.entry_slopes.items()
            },
        }
        log.info("%s: fitted slope %.3f (excluded h: %s)", scheme, table.slope, table.excluded)
    csv_path = os.path.join(cfg.output, "converge.csv")
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(converge_columns(d))
        for row in rows:
            w.writerow([f"{v:.16e}" if isinstance(v, float) else v for v in row])
    out = {
        "config": _config_record(cfg, prob, {
            "T_effective": {str(h): max(1, round(cfg.T / h)) * h for h in cfg.h_list},
            "seed_shared_across_h": True,
        }),
        "reference": ref,
        "slopes": fits,
        "csv": os.path.basename(csv_path),
    }
    write_json(os.path.join(cfg.output, "converge.json"), out)
    return out


def run_compare(cfg, prob):
    ec = _ensemble_config(cfg, cfg.h, cfg.scheme)
    res = montecarlo.simulate_ensemble(prob, ec)
    sol = eulerian.solve(prob, cfg.n, cfg.tol_lin)
    lag = res.diffusivity
    diff = lag.matrix - sol.A_eff
    tol = 4.0 * lag.stderr + cfg.rel_tol * np.linalg.norm(sol.A_eff)
    ok = bool(np.all(np.abs(diff) <= tol))
    drift_diff = res.mean_drift - sol.b_bar
    drift_ok = bool(np.all(np.abs(drift_diff) <= 4.0 * res.mean_drift_stderr + 1e-12))
    out = {
        "config": _config_record(cfg, prob, {"T_effective": ec.horizon, "n_steps": ec.n_steps}),
        "lagrangian": _estimate_record(lag),
        "eulerian": sol.A_eff,
        "difference": diff,
        "tolerance": tol,
        "within_tolerance": ok,
        "mean_drift_lagrangian": res.mean_drift,
        "mean_drift_stderr": res.mean_drift_stderr,
        "mean_drift_eulerian": sol.b_bar,
        "mean_drift_within_tolerance": drift_ok,
        "failures": res.failures,
    }
    write_json(os.path.join(cfg.output, "compare.json"), out)
    log.info("Lagrangian vs Eulerian: %s", "within tolerance" if ok else "OUTSIDE tolerance")
    return out


WORKFLOWS = {
    "simulate": run_simulate,
    "reference": run_reference,
    "converge": run_converge,
    "compare": run_compare,
}


# ---------------------------------------------------------------------------
# argument parsing


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _str_list(text):
    return [v.strip() for v in text.split(",") if v.strip()]


def build_parser():
    p = argparse.ArgumentParser(
        prog="effdiff",
        description="Effective diffusivity of periodic SDEs: Monte Carlo and grid reference.",
    )
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="YAML file with run settings (flags override it)")
    p.add_argument("--problem", help="benchmark name (%s)" % ", ".join(sorted(coeffs.BENCHMARKS)))
    p.add_argument("--shift", type=_float_list, help="constant added to the drift, e.g. 0.3,0")
    p.add_argument("--M", type=int, help="number of particles")
    p.add_argument("--T", type=float, help="time horizon (rounded to a multiple of h)")
    p.add_argument("--h", type=float, help="time step")
    p.add_argument("--h-list", dest="h_list", type=_float_list,
                   help="decreasing step sizes for converge, e.g. 0.04,0.02,0.01")
    p.add_argument("--scheme", choices=sorted(SCHEMES))
    p.add_argument("--schemes", type=_str_list, help="comma-separated schemes for converge")
    p.add_argument("--q", type=int, help="Fourier-Legendre order for the double Ito integral")
    p.add_argument("--seed", type=int)
    p.add_argument("--x0", type=_float_list, help="initial point (default origin)")
    p.add_argument("--bins", dest="histogram_bins", type=int,
                   help="histogram bins per axis (0 disables)")
    p.add_argument("--burn-in", dest="burn_in_fraction", type=float)
    p.add_argument("--workers", type=int)
    p.add_argument("--n", type=int, help="grid points per axis for the reference solver")
    p.add_argument("--tol-lin", dest="tol_lin", type=float)
    p.add_argument("--rel-tol", dest="rel_tol", type=float,
                   help="relative Frobenius allowance used by compare")
    p.add_argument("--gate", type=float, help="noise gate for slope fits")
    p.add_argument("--out", dest="output", help="output directory")
    p.add_argument("--log-level", dest="log_level")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg, prob = resolve_config(args)
        os.makedirs(cfg.output, exist_ok=True)
        if not os.access(cfg.output, os.W_OK):
            raise ConfigError(f"output directory {cfg.output} is not writable")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"config error: cannot create output directory: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=str(cfg.log_level).upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        WORKFLOWS[cfg.command](cfg, prob)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EnsembleError, EulerianSolverError, StepError, CoefficientError,
            FloatingPointError, ValueError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
