"""Command line entry points.

Subcommands:

    simulate  run the factorial Monte Carlo described by a JSON config
    analyze   estimate effects and intervals from an observed-data CSV
    curves    tabulate the break-even R^2 curve over an alpha grid
    verify    run the internal verification checks

Exit codes: 0 success, 2 config or schema error, 3 numerical guard
failure, 4 verification failure.  Failures also emit a one-line JSON
object on stderr so callers can dispatch on the error kind.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__
from .design import (
    Assignment,
    EnumerationTooLargeError,
    SingularCovariatesError,
    build_hat_structure,
)
from .dgp import (
    COVARIATE_DISTS,
    RESIDUAL_KINDS,
    CellConfig,
    DegenerateResidualError,
    gen_base_tables,
)
from .estimators import (
    ArmSingularError,
    ObservedData,
    debias_correction,
    lin_fit,
    tau_adj,
    tau_lin,
    tau_lin_db,
    tau_unadj,
)
from .harness import (
    ESTIMATORS,
    exact_checks,
    results_to_csv,
    results_to_json,
    run_factorial,
    statistical_checks,
)
from .inference import (
    LeverageOneError,
    estimate_variance,
    hc3_variance,
    necessary_bound,
    neyman_variance_unadj,
    rl2_curve,
    wald_ci,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_VERIFY = 4

#: environment variable naming the default output directory
OUT_ENV = "RANDADJ_OUT"

_GUARD_ERRORS = (
    SingularCovariatesError,
    EnumerationTooLargeError,
    ArmSingularError,
    LeverageOneError,
    DegenerateResidualError,
)


class ConfigError(ValueError):
    """Bad configuration file, schema, or flag value."""


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

#: keys allowed in a simulate config; excludes anything that cannot change
#: the numbers (output paths, worker counts are separate)
CONFIG_KEYS = (
    "n", "r1", "seed", "reps", "level", "alphas", "deltas", "gammas",
    "residuals", "covariate_dist", "rank_transform",
)


def default_config(full: bool = False) -> dict:
    """Desk-scale defaults; `full` switches to the large factorial."""
    return {
        "n": 1000 if full else 400,
        "r1": 0.35,
        "seed": 20250816,
        "reps": 10000 if full else 2000,
        "level": 0.05,
        "alphas": [0.02, 0.1, 0.2, 0.3, 0.4, 0.7] if full else [0.05, 0.2, 0.5],
        "deltas": [0.25, 0.75],
        "gammas": [0.5, 3.0],
        "residuals": ["worst_case", "t3"],
        "covariate_dist": "t3",
        "rank_transform": False,
    }


def load_config(path: str | None, full: bool, overrides: dict) -> dict:
    cfg = default_config(full)
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                user = json.load(fh)
        except FileNotFoundError as err:
            raise ConfigError(f"config file not found: {path}") from err
        except json.JSONDecodeError as err:
            raise ConfigError(f"config file is not valid JSON: {err}") from err
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(user) - set(CONFIG_KEYS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg.update(user)
    for key, value in overrides.items():
        if value is not None:
            cfg[key] = value
    _validate_config(cfg)
    return cfg


def _validate_config(cfg: dict) -> None:
    try:
        cfg["n"] = int(cfg["n"])
        cfg["seed"] = int(cfg["seed"])
        cfg["reps"] = int(cfg["reps"])
        cfg["r1"] = float(cfg["r1"])
        cfg["level"] = float(cfg["level"])
        cfg["alphas"] = [float(a) for a in cfg["alphas"]]
        cfg["deltas"] = [float(d) for d in cfg["deltas"]]
        cfg["gammas"] = [float(g) for g in cfg["gammas"]]
        cfg["residuals"] = [str(r) for r in cfg["residuals"]]
        cfg["covariate_dist"] = str(cfg["covariate_dist"])
        cfg["rank_transform"] = bool(cfg["rank_transform"])
    except (KeyError, TypeError, ValueError) as err:
        raise ConfigError(f"malformed config value: {err}") from err
    if cfg["n"] < 8:
        raise ConfigError("n must be at least 8")
    if not 0.0 < cfg["r1"] < 1.0:
        raise ConfigError("r1 must lie in (0, 1)")
    if cfg["reps"] < 2:
        raise ConfigError("reps must be at least 2")
    if not 0.0 < cfg["level"] < 1.0:
        raise ConfigError("level must lie in (0, 1)")
    if not cfg["alphas"] or not cfg["deltas"] or not cfg["gammas"] or not cfg["residuals"]:
        raise ConfigError("factor lists must be nonempty")
    for r in cfg["residuals"]:
        if r not in RESIDUAL_KINDS:
            raise ConfigError(f"unknown residual kind {r!r}")
    if cfg["covariate_dist"] not in COVARIATE_DISTS:
        raise ConfigError(f"unknown covariate distribution {cfg['covariate_dist']!r}")


def config_cells(cfg: dict) -> list[CellConfig]:
    """Expand a config into the cell grid, in canonical order."""
    cells = []
    try:
        for delta in cfg["deltas"]:
            for gamma in cfg["gammas"]:
                for alpha in cfg["alphas"]:
                    for residual in cfg["residuals"]:
                        cells.append(CellConfig(
                            n=cfg["n"], r1=cfg["r1"], alpha=alpha,
                            delta=delta, gamma=gamma, residual=residual,
                            covariate_dist=cfg["covariate_dist"],
                            rank_transform=cfg["rank_transform"],
                        ))
    except ValueError as err:
        raise ConfigError(str(err)) from err
    return cells


def config_hash(cfg: dict) -> str:
    canon = json.dumps({k: cfg[k] for k in CONFIG_KEYS}, sort_keys=True,
                       separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def _resolve_out_dir(flag_value: str | None) -> str:
    return flag_value or os.environ.get(OUT_ENV) or "."


def cmd_simulate(args) -> int:
    cfg = load_config(args.config, args.full, {
        "reps": args.reps, "seed": args.seed,
    })
    out_dir = _resolve_out_dir(args.out)
    os.makedirs(out_dir, exist_ok=True)
    cells = config_cells(cfg)
    base = gen_base_tables(cfg["n"], cfg["covariate_dist"], cfg["seed"])
    results = run_factorial(base, cells, cfg["reps"], cfg["seed"],
                            level=cfg["level"], workers=args.threads)
    csv_path = os.path.join(out_dir, "results.csv")
    results_to_csv(results, csv_path)
    results_to_json(results, os.path.join(out_dir, "results.json"))
    manifest = {
        "config": {k: cfg[k] for k in CONFIG_KEYS},
        "config_sha256": config_hash(cfg),
        "cells": len(cells),
        "versions": {
            "randadj": __version__,
            "numpy": np.__version__,
            "python": sys.version.split()[0],
        },
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {len(cells)} cells x {len(ESTIMATORS)} estimators to {csv_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------

def _read_observed_csv(path: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            rows = list(reader)
    except FileNotFoundError as err:
        raise ConfigError(f"input file not found: {path}") from err
    if not header or len(header) < 3:
        raise ConfigError("input must have columns Y, Z, X_1..X_p")
    p = len(header) - 2
    expected = ["Y", "Z"] + [f"X_{j}" for j in range(1, p + 1)]
    if header != expected:
        raise ConfigError(
            f"bad header: expected {','.join(expected[:4])},... got {','.join(header[:4])},...")
    try:
        data = np.array([[float(v) for v in row] for row in rows], dtype=float)
    except ValueError as err:
        raise ConfigError(f"non-numeric cell in input: {err}") from err
    if data.ndim != 2 or data.shape[0] < 4 or data.shape[1] != p + 2:
        raise ConfigError("input needs at least 4 complete rows")
    y = data[:, 0]
    zcol = data[:, 1]
    if not np.all((zcol == 0.0) | (zcol == 1.0)):
        raise ConfigError("Z column must be 0/1")
    z = zcol.astype(bool)
    if z.sum() < 2 or (~z).sum() < 2:
        raise ConfigError("each arm needs at least 2 units")
    return y, z, data[:, 2:]


def cmd_analyze(args) -> int:
    y, z, x = _read_observed_csv(args.input)
    n = y.shape[0]
    hat = build_hat_structure(x)
    asg = Assignment(z=z, n=n, n1=int(z.sum()))
    data = ObservedData(y=y, assignment=asg, x=x, hat=hat)
    level = args.level

    report = []
    adj = tau_adj(data)
    points = {"unadj": tau_unadj(data), "hd_undb": adj,
              "hd": adj + debias_correction(data)}
    variances = {"unadj": neyman_variance_unadj(data)}
    variances["hd"] = variances["hd_undb"] = estimate_variance(data).combined
    na: dict[str, str] = {}
    try:
        fit = lin_fit(data)
        points["lin"] = tau_lin(data, fit)
        points["lin_db"] = tau_lin_db(data, fit)
        variances["lin"] = variances["lin_db"] = hc3_variance(data, fit)
    except (ArmSingularError, LeverageOneError) as err:
        na["lin"] = na["lin_db"] = str(err)

    for e in ESTIMATORS:
        if e in na:
            report.append({"estimator": e, "na": na[e]})
            continue
        lo, hi = wald_ci(points[e], variances[e], n, level)
        report.append({
            "estimator": e,
            "point": points[e],
            "variance": variances[e],
            "ci_low": lo,
            "ci_high": hi,
            "level": level,
        })

    for row in report:
        if "na" in row:
            print(f"{row['estimator']:>8}:  NA ({row['na']})")
        else:
            print(f"{row['estimator']:>8}: {row['point']: .6g}  "
                  f"[{row['ci_low']: .6g}, {row['ci_high']: .6g}]")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump({"n": n, "p": hat.p, "estimates": report}, fh,
                      indent=2, sort_keys=True)
            fh.write("\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# curves
# ---------------------------------------------------------------------------

def _parse_float_list(text: str, what: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip() != ""]
    except ValueError as err:
        raise ConfigError(f"bad {what} list: {err}") from err
    if not values:
        raise ConfigError(f"{what} list is empty")
    return values


def cmd_curves(args) -> int:
    alphas = _parse_float_list(args.alphas, "alpha")
    gammas = _parse_float_list(args.gammas, "gamma")
    if any(not 0.0 <= a <= 1.0 for a in alphas):
        raise ConfigError("alpha values must lie in [0, 1]")
    if any(g < 0 for g in gammas):
        raise ConfigError("gamma values must be nonnegative")
    lines = ["alpha,gamma,rl2,necessary_r2"]
    for g in gammas:
        vals = rl2_curve(alphas, g)
        for a, v in zip(alphas, vals):
            lines.append(f"{a:.17g},{g:.17g},{v:.17g},{necessary_bound(a):.17g}")
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------

def cmd_verify(args) -> int:
    if args.mode == "exact":
        outcomes = exact_checks(args.seed)
    else:
        outcomes = statistical_checks(args.seed)
    width = max(len(o.name) for o in outcomes)
    ok = True
    for o in outcomes:
        status = "PASS" if o.passed else "FAIL"
        print(f"{status}  {o.name:<{width}}  {o.detail}")
        ok = ok and o.passed
    print(f"{'all checks passed' if ok else 'CHECKS FAILED'} "
          f"({sum(o.passed for o in outcomes)}/{len(outcomes)})")
    return EXIT_OK if ok else EXIT_VERIFY


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="randadj",
        description="Randomization-based inference with many covariates",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run the factorial Monte Carlo")
    sim.add_argument("--config", help="JSON config file (defaults are desk scale)")
    sim.add_argument("--reps", type=int, help="override replicate count")
    sim.add_argument("--seed", type=int, help="override master seed")
    sim.add_argument("--out", help=f"output directory (default ${OUT_ENV} or .)")
    sim.add_argument("--threads", type=int, default=1,
                     help="worker processes over cells (default 1)")
    sim.add_argument("--full", action="store_true",
                     help="paper-scale defaults (n=1000, 10000 replicates)")
    sim.set_defaults(func=cmd_simulate)

    ana = sub.add_parser("analyze", help="estimate from an observed-data CSV")
    ana.add_argument("--input", required=True, help="CSV with columns Y,Z,X_1..X_p")
    ana.add_argument("--level", type=float, default=0.05)
    ana.add_argument("--out", help="optional JSON report path")
    ana.set_defaults(func=cmd_analyze)

    cur = sub.add_parser("curves", help="break-even R^2 curve values")
    cur.add_argument("--alphas", required=True, help="comma-separated alpha grid")
    cur.add_argument("--gammas", required=True, help="comma-separated gamma values")
    cur.add_argument("--out", help="CSV output path (default stdout)")
    cur.set_defaults(func=cmd_curves)

    ver = sub.add_parser("verify", help="run internal verification checks")
    ver.add_argument("--mode", choices=("exact", "statistical"), default="exact")
    ver.add_argument("--seed", type=int, default=0)
    ver.set_defaults(func=cmd_verify)

    return parser


def _error_json(kind: str, message: str) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        # argparse already printed a usage message
        code = err.code if isinstance(err.code, int) else EXIT_CONFIG
        return EXIT_CONFIG if code != 0 else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as err:
        _error_json("config", str(err))
        return EXIT_CONFIG
    except _GUARD_ERRORS as err:
        _error_json(type(err).__name__, str(err))
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
