"""Monte Carlo harness: factorial simulation, metrics, verification checks.

A cell is one configuration of the factorial design.  run_cell draws
assignments with replicate-keyed substreams, so results are reproducible
and independent of execution order; run_factorial distributes cells over
worker processes without changing a single bit of the output.

Metrics per estimator (tau_bar is the true effect of the cell's table):

    rel_rmse       RMSE(tau_hat) / (sigma_cre / sqrt(n))
    rel_bias       |mean(tau_hat) - tau_bar| / (sigma_hd / sqrt(n))
    coverage       fraction of nominal (1-level) intervals covering tau_bar
    rel_ci_length  mean ratio of CI length to the unadjusted CI length

Estimator failures (for instance, arm-specific OLS with p >= n_z) are
recorded as per-estimator NA with the reason; other estimators' metrics
are unaffected.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .design import complete_randomization, enumerate_assignments, substream
from .dgp import BaseTables, CellConfig, _PURPOSE_ASSIGN, build_cell, cell_key
from .estimators import (
    ArmSingularError,
    ObservedData,
    ScienceTable,
    debias_correction,
    lin_fit,
    observe,
    tau_adj,
    tau_lin,
    tau_lin_db,
    tau_unadj,
)
from .inference import (
    LeverageOneError,
    OracleVariances,
    estimate_variance,
    hc3_variance,
    neyman_variance_unadj,
    oracle_variances,
    variance_components,
    wald_ci,
)

#: canonical estimator order used everywhere (tables, CSV, JSON)
ESTIMATORS = ("unadj", "hd", "hd_undb", "lin", "lin_db")

#: which variance estimator backs each point estimator's interval
VARIANCE_PAIRING = {
    "unadj": "neyman",
    "hd": "cb",
    "hd_undb": "cb",
    "lin": "hc3",
    "lin_db": "hc3",
}


@dataclass
class EstimatorMetrics:
    rel_rmse: float | None = None
    rel_rmse_se: float | None = None
    rel_bias: float | None = None
    rel_bias_se: float | None = None
    coverage: float | None = None
    coverage_se: float | None = None
    rel_ci_length: float | None = None
    rel_ci_length_se: float | None = None
    point_na: str | None = None
    ci_na: str | None = None


@dataclass
class CellResult:
    cfg: CellConfig
    reps: int
    seed: int
    level: float
    tau_bar: float
    oracle: OracleVariances
    metrics: dict[str, EstimatorMetrics]
    clamped_count: int = 0

    @property
    def ratio_l(self) -> float:
        return self.oracle.sigma_hd_l2 / self.oracle.sigma_hd2

    @property
    def ratio_q(self) -> float:
        return self.oracle.sigma_hd_q2 / self.oracle.sigma_hd2

    @property
    def ratio_adj(self) -> float:
        return self.oracle.sigma_adj2 / self.oracle.sigma_hd2


def replicate_estimates(data: ObservedData) -> tuple[dict, dict, dict]:
    """Point estimates and paired variances for one realized assignment.

    Returns (points, variances, na_reasons); failed entries are absent
    from the first two dicts and explained in the third.
    """
    points: dict[str, float] = {}
    variances: dict[str, float] = {}
    na: dict[str, str] = {}

    points["unadj"] = tau_unadj(data)
    adj = tau_adj(data)
    points["hd_undb"] = adj
    points["hd"] = adj + debias_correction(data)

    variances["neyman"] = neyman_variance_unadj(data)
    est = estimate_variance(data)
    variances["cb"] = est.combined
    variances["cb_clamped"] = 1.0 if est.clamped else 0.0

    try:
        fit = lin_fit(data)
        points["lin"] = tau_lin(data, fit)
        points["lin_db"] = tau_lin_db(data, fit)
    except ArmSingularError as err:
        fit = None
        na["lin"] = na["lin_db"] = str(err)
    if fit is not None:
        try:
            variances["hc3"] = hc3_variance(data, fit)
        except (ArmSingularError, LeverageOneError) as err:
            na["hc3"] = str(err)
    else:
        na["hc3"] = na["lin"]
    return points, variances, na


def run_cell(
    table: ScienceTable,
    cfg: CellConfig,
    reps: int,
    seed: int,
    level: float = 0.05,
) -> CellResult:
    """Monte Carlo over `reps` assignments of one cell's table."""
    if reps < 2:
        raise ValueError("need at least 2 replicates")
    n, n1 = cfg.n, cfg.n1
    r1 = n1 / n
    key = cell_key(cfg)
    ov = oracle_variances(table, r1)
    tau_bar = table.tau_bar

    pts = {e: np.full(reps, np.nan) for e in ESTIMATORS}
    var = {v: np.full(reps, np.nan) for v in ("neyman", "cb", "hc3")}
    point_na: dict[str, str] = {}
    var_na: dict[str, str] = {}
    clamped = 0

    for rep in range(reps):
        rng = substream(seed, key, _PURPOSE_ASSIGN, rep)
        data = observe(table, complete_randomization(n, n1, rng))
        points, variances, na = replicate_estimates(data)
        for e in ESTIMATORS:
            if e in points:
                pts[e][rep] = points[e]
            elif e not in point_na and e in na:
                point_na[e] = na[e]
        for v in ("neyman", "cb", "hc3"):
            if v in variances:
                var[v][rep] = variances[v]
            elif v not in var_na and v in na:
                var_na[v] = na[v]
        clamped += int(variances.get("cb_clamped", 0.0))

    scale_rmse = math.sqrt(ov.sigma_cre2 / n)
    scale_bias = math.sqrt(ov.sigma_hd2 / n)
    metrics: dict[str, EstimatorMetrics] = {}
    for e in ESTIMATORS:
        m = EstimatorMetrics()
        p = pts[e]
        if e in point_na or np.isnan(p).any():
            m.point_na = point_na.get(e, "point estimate undefined in some replicate")
        else:
            err = p - tau_bar
            sq = err**2
            mse = float(sq.mean())
            rmse = math.sqrt(mse)
            m.rel_rmse = rmse / scale_rmse
            se_mse = float(sq.std(ddof=1)) / math.sqrt(reps)
            m.rel_rmse_se = (se_mse / (2.0 * rmse) / scale_rmse) if rmse > 0 else 0.0
            m.rel_bias = abs(float(err.mean())) / scale_bias
            m.rel_bias_se = float(err.std(ddof=1)) / math.sqrt(reps) / scale_bias

        vname = VARIANCE_PAIRING[e]
        v = var[vname]
        if m.point_na is not None or vname in var_na or np.isnan(v).any():
            m.ci_na = m.point_na or var_na.get(vname, "variance undefined in some replicate")
        else:
            half = np.sqrt(v / n) * _z_value(level)
            cover = np.abs(pts[e] - tau_bar) <= half
            cov = float(cover.mean())
            m.coverage = cov
            m.coverage_se = math.sqrt(cov * (1.0 - cov) / reps)
            # the critical value cancels in the length ratio
            ratio = np.sqrt(v) / np.sqrt(var["neyman"])
            m.rel_ci_length = float(ratio.mean())
            m.rel_ci_length_se = float(ratio.std(ddof=1)) / math.sqrt(reps)
        metrics[e] = m

    return CellResult(
        cfg=cfg, reps=reps, seed=seed, level=level, tau_bar=tau_bar,
        oracle=ov, metrics=metrics, clamped_count=clamped,
    )


def _z_value(level: float) -> float:
    from scipy.special import ndtri

    return float(ndtri(1.0 - level / 2.0))


def _cell_task(args) -> CellResult:
    base, cfg, reps, seed, level = args
    table = build_cell(base, cfg)
    return run_cell(table, cfg, reps, seed, level)


def run_factorial(
    base: BaseTables,
    cells: list[CellConfig],
    reps: int,
    seed: int,
    level: float = 0.05,
    workers: int | None = None,
) -> list[CellResult]:
    """Run every cell; workers > 1 parallelizes over cells.

    Per-cell results depend only on (base, cfg, reps, seed, level), never
    on worker count or position in the grid, so output is byte-stable.
    """
    tasks = [(base, cfg, reps, seed, level) for cfg in cells]
    if workers is not None and workers < 1:
        raise ValueError("workers must be positive")
    if workers == 1 or len(tasks) == 1:
        return [_cell_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_cell_task, tasks, chunksize=1))


# ---------------------------------------------------------------------------
# exhaustive enumeration
# ---------------------------------------------------------------------------

@dataclass
class EnumerationReport:
    """Exact moments of the estimators over every possible assignment."""

    n_assignments: int
    mean: dict[str, float]
    variance: dict[str, float]  # population variance over the assignment set
    mean_ybar1: float
    mean_ybar0: float
    mean_cb_variance: float


def enumeration_check(table: ScienceTable, n1: int) -> EnumerationReport:
    """Average the estimators over the complete assignment set.

    Exact (no Monte Carlo); refuses designs with more than 10^6
    assignments via enumerate_assignments' guard.
    """
    n = table.hat.n
    draws = {e: [] for e in ESTIMATORS}
    feasible = {e: True for e in ESTIMATORS}
    ybar1, ybar0, cb = [], [], []
    for asg in enumerate_assignments(n, n1):
        data = observe(table, asg)
        points, variances, _ = replicate_estimates(data)
        for e in ESTIMATORS:
            if e in points:
                draws[e].append(points[e])
            else:
                feasible[e] = False
        ybar1.append(float(data.y[asg.z].mean()))
        ybar0.append(float(data.y[~asg.z].mean()))
        cb.append(variances["cb"])
    count = len(ybar1)
    mean = {}
    variance = {}
    for e in ESTIMATORS:
        if feasible[e]:
            vals = np.asarray(draws[e])
            mean[e] = float(vals.mean())
            variance[e] = float(vals.var(ddof=0))
    return EnumerationReport(
        n_assignments=count,
        mean=mean,
        variance=variance,
        mean_ybar1=float(np.mean(ybar1)),
        mean_ybar0=float(np.mean(ybar0)),
        mean_cb_variance=float(np.mean(cb)),
    )


# ---------------------------------------------------------------------------
# result serialization (frozen schema)
# ---------------------------------------------------------------------------

CSV_COLUMNS = (
    "n", "r1", "alpha", "p", "delta", "gamma", "residual", "covariate_dist",
    "rank_transform", "reps", "seed", "level", "estimator",
    "rel_rmse", "rel_rmse_se", "rel_bias", "rel_bias_se",
    "coverage", "coverage_se", "rel_ci_length", "rel_ci_length_se",
    "point_na", "ci_na",
    "tau_bar", "sigma_cre2", "sigma_adj2", "sigma_hd_l2", "sigma_hd_q2",
    "sigma_hd2", "r_squared", "ratio_l", "ratio_q", "ratio_adj",
    "clamped_count",
)


def _fmt(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


def _result_rows(res: CellResult):
    cfg, ov = res.cfg, res.oracle
    for e in ESTIMATORS:
        m = res.metrics[e]
        yield {
            "n": cfg.n, "r1": cfg.r1, "alpha": cfg.alpha, "p": cfg.p,
            "delta": cfg.delta, "gamma": cfg.gamma, "residual": cfg.residual,
            "covariate_dist": cfg.covariate_dist,
            "rank_transform": cfg.rank_transform,
            "reps": res.reps, "seed": res.seed, "level": res.level,
            "estimator": e,
            "rel_rmse": m.rel_rmse, "rel_rmse_se": m.rel_rmse_se,
            "rel_bias": m.rel_bias, "rel_bias_se": m.rel_bias_se,
            "coverage": m.coverage, "coverage_se": m.coverage_se,
            "rel_ci_length": m.rel_ci_length,
            "rel_ci_length_se": m.rel_ci_length_se,
            "point_na": m.point_na, "ci_na": m.ci_na,
            "tau_bar": res.tau_bar,
            "sigma_cre2": ov.sigma_cre2, "sigma_adj2": ov.sigma_adj2,
            "sigma_hd_l2": ov.sigma_hd_l2, "sigma_hd_q2": ov.sigma_hd_q2,
            "sigma_hd2": ov.sigma_hd2, "r_squared": ov.r_squared,
            "ratio_l": res.ratio_l, "ratio_q": res.ratio_q,
            "ratio_adj": res.ratio_adj,
            "clamped_count": res.clamped_count,
        }


def results_to_csv(results: list[CellResult], path) -> None:
    """Write one row per cell x estimator, 17 significant digits."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for res in results:
            for row in _result_rows(res):
                fh.write(",".join(_fmt(row[c]) for c in CSV_COLUMNS) + "\n")


def results_to_json(results: list[CellResult], path) -> None:
    """JSON mirror of the CSV rows, grouped by cell."""
    import json

    payload = []
    for res in results:
        payload.append({
            "cell": {c: _json_safe(getattr(res.cfg, c)) for c in (
                "n", "r1", "alpha", "delta", "gamma", "residual",
                "covariate_dist", "rank_transform")},
            "p": res.cfg.p,
            "reps": res.reps,
            "seed": res.seed,
            "level": res.level,
            "tau_bar": res.tau_bar,
            "oracle": {k: _json_safe(getattr(res.oracle, k)) for k in (
                "sigma_cre2", "sigma_adj2", "sigma_hd_l2", "sigma_hd_q2",
                "sigma_hd2", "r_squared", "s_tau2")},
            "clamped_count": res.clamped_count,
            "estimators": {
                e: {k: _json_safe(v) for k, v in vars(res.metrics[e]).items()}
                for e in ESTIMATORS
            },
        })
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _json_safe(v):
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


# ---------------------------------------------------------------------------
# verification check registry (used by the CLI's verify command and tests)
# ---------------------------------------------------------------------------

@dataclass
class CheckOutcome:
    name: str
    passed: bool
    detail: str = ""


def hat_invariant_checks(hat, atol: float = 1e-10) -> list[CheckOutcome]:
    """Named structural invariants of a hat-matrix bundle."""
    n = hat.n
    lev = hat.leverages
    out = []

    def add(name, err, bound=atol, extra=""):
        out.append(CheckOutcome(name, bool(err <= bound),
                                f"max abs error {err:.3e}{extra}"))

    add("hat-symmetric", float(np.abs(hat.h - hat.h.T).max()))
    add("hat-idempotent", float(np.abs(hat.h @ hat.h - hat.h).max()))
    add("hat-rowsum-zero", float(np.abs(hat.h.sum(axis=1)).max()))
    add("hat-trace-p", abs(float(np.trace(hat.h)) - hat.p))
    lev_ok = bool((lev >= -atol).all() and (lev <= 1 + atol).all())
    out.append(CheckOutcome("leverage-range", lev_ok,
                            f"min {lev.min():.6f}, max {lev.max():.6f}"))
    q_expect = hat.h * hat.h
    np.fill_diagonal(q_expect, lev - lev**2)
    add("q-definition", float(np.abs(hat.q - q_expect).max()))
    add("q-rowsum", float(np.abs(hat.q.sum(axis=1) - 2 * lev * (1 - lev)).max()))
    pmat = np.eye(n) - np.full((n, n), 1.0 / n)
    m_expect = pmat - hat.h + pmat @ np.diag(lev)
    add("m-definition", float(np.abs(hat.m - m_expect).max()))
    add("b-gram", float(np.abs(hat.b - hat.m.T @ hat.m).max()))
    b_diag_closed = 1 - 1 / n + (1 - 2 / n) * lev - (1 + 1 / n) * lev**2
    add("b-diagonal-closed-form", float(np.abs(np.diag(hat.b) - b_diag_closed).max()))
    return out


def _random_instance(rng, n: int, p: int) -> ScienceTable:
    from .design import build_hat_structure

    x = rng.standard_normal((n, p))
    hat = build_hat_structure(x)
    y1 = rng.standard_normal(n) + x @ rng.standard_normal(p) / math.sqrt(p)
    y0 = rng.standard_normal(n) + x @ rng.standard_normal(p) / math.sqrt(p)
    return ScienceTable(y1=y1, y0=y0, x=x, hat=hat)


def algebraic_identity_checks(seed: int = 0, instances: int = 10) -> list[CheckOutcome]:
    """Random-instance identities linking the variance representations."""
    from .finitepop import sample_variance, scaled_covariance, scaled_variance
    from .inference import residuals as residual_sets

    rng = substream(seed, 7001)
    worst = {
        "rewrite-linear-variance": 0.0,
        "component-partition": 0.0,
        "quadratic-expansion": 0.0,
        "residual-pythagoras": 0.0,
        "hd-quadratic-nonnegative": 0.0,
    }
    for _ in range(instances):
        n = int(rng.integers(20, 61))
        p = int(rng.integers(1, max(2, int(0.6 * n))))
        n1 = int(rng.integers(max(2, n // 4), n - max(2, n // 4) + 1))
        r1 = n1 / n
        r0 = 1 - r1
        table = _random_instance(rng, n, p)
        ov = oracle_variances(table, r1)

        v = table.y1 / r1 + table.y0 / r0
        rhs = r1 * r0 * scaled_variance(table.hat.b, v)
        worst["rewrite-linear-variance"] = max(
            worst["rewrite-linear-variance"],
            abs(ov.sigma_hd_l2 - rhs) / max(1.0, abs(ov.sigma_hd_l2)))

        comps = variance_components(table, r1)
        worst["component-partition"] = max(
            worst["component-partition"],
            abs(sum(comps) - ov.sigma_hd2) / max(1.0, abs(ov.sigma_hd2)))

        a, b = table.y1, table.y0
        lhs2 = scaled_variance(table.hat.b, a + b)
        rhs2 = (scaled_variance(table.hat.b, a) + scaled_variance(table.hat.b, b)
                + 2 * scaled_covariance(table.hat.b, a, b))
        worst["quadratic-expansion"] = max(
            worst["quadratic-expansion"], abs(lhs2 - rhs2) / max(1.0, abs(lhs2)))

        tau = table.y1 - table.y0
        res = residual_sets(table)
        rhs3 = scaled_variance(table.hat.h, tau) + sample_variance(res.tau_e)
        worst["residual-pythagoras"] = max(
            worst["residual-pythagoras"],
            abs(sample_variance(tau) - rhs3) / max(1.0, abs(sample_variance(tau))))

        worst["hd-quadratic-nonnegative"] = max(
            worst["hd-quadratic-nonnegative"], max(0.0, -ov.sigma_hd_q2))

    bounds = {"hd-quadratic-nonnegative": 1e-10}
    return [
        CheckOutcome(name, err <= bounds.get(name, 1e-8),
                     f"worst error {err:.3e}")
        for name, err in worst.items()
    ]


def enumeration_identity_checks(seed: int = 0, tables: int = 5) -> list[CheckOutcome]:
    """Exact unbiasedness and variance identities on enumerable designs."""
    rng = substream(seed, 7002)
    worst_mean = worst_var = worst_arm = 0.0
    for _ in range(tables):
        n, n1 = 8, 4
        p = int(rng.integers(1, 3))
        table = _random_instance(rng, n, p)
        rep = enumeration_check(table, n1)
        ov = oracle_variances(table, n1 / n)
        worst_mean = max(worst_mean, abs(rep.mean["unadj"] - table.tau_bar))
        worst_var = max(worst_var, abs(rep.variance["unadj"] - ov.sigma_cre2 / n))
        worst_arm = max(
            worst_arm,
            abs(rep.mean_ybar1 - float(table.y1.mean())),
            abs(rep.mean_ybar0 - float(table.y0.mean())),
        )
    return [
        CheckOutcome("enumeration-unadj-unbiased", worst_mean <= 1e-10,
                     f"max abs error {worst_mean:.3e}"),
        CheckOutcome("enumeration-unadj-variance", worst_var <= 1e-10,
                     f"max abs error {worst_var:.3e}"),
        CheckOutcome("enumeration-arm-means", worst_arm <= 1e-10,
                     f"max abs error {worst_arm:.3e}"),
    ]


def exact_checks(seed: int = 0) -> list[CheckOutcome]:
    """All identity checks that hold to numerical tolerance."""
    rng = substream(seed, 7003)
    table = _random_instance(rng, 60, 12)
    out = hat_invariant_checks(table.hat)
    out.extend(algebraic_identity_checks(seed))
    out.extend(enumeration_identity_checks(seed))
    return out


def statistical_checks(seed: int = 0) -> list[CheckOutcome]:
    """Smoke-scale Monte Carlo checks of bias, coverage, and calibration."""
    from .dgp import gen_base_tables

    cfg = CellConfig(n=200, r1=0.35, alpha=0.1, delta=0.25, gamma=3.0,
                     residual="t3")
    base = gen_base_tables(cfg.n, cfg.covariate_dist, seed)
    table = build_cell(base, cfg)
    res = run_cell(table, cfg, reps=400, seed=seed, level=0.05)
    m = res.metrics["hd"]
    return [
        CheckOutcome("mc-db-bias-small", m.rel_bias is not None and m.rel_bias < 0.5,
                     f"relative bias {m.rel_bias}"),
        CheckOutcome("mc-db-coverage", m.coverage is not None and m.coverage >= 0.90,
                     f"coverage {m.coverage}"),
        CheckOutcome("mc-unadj-rmse-calibrated",
                     res.metrics["unadj"].rel_rmse is not None
                     and abs(res.metrics["unadj"].rel_rmse - 1.0) < 0.2,
                     f"relative RMSE {res.metrics['unadj'].rel_rmse}"),
    ]
