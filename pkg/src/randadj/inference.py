"""Randomization-based variance: oracle values, plug-in estimation, intervals.

Everything here is on a common "per-n" variance scale: a variance sigma2
paired with a point estimate tau yields the interval

    tau +/- z_{1-level/2} * sqrt(sigma2 / n).

Oracle quantities (computable only from a full potential-outcome table)
live alongside their sample counterparts (computable from one realized
experiment); the two families share the same decomposition so that tests
can compare them term by term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import ndtri

from .estimators import ArmSingularError, LinFit, ObservedData, ScienceTable, lin_fit
from .finitepop import sample_variance, scaled_covariance, scaled_variance


class LeverageOneError(ValueError):
    """An arm-level leverage reached 1, so HC3 weights are undefined."""

    def __init__(self, arm: int, unit: int, value: float):
        self.arm = arm
        self.unit = unit
        super().__init__(
            f"HC3 leverage for unit {unit} in arm {arm} is {value:.12f}, too close to 1"
        )


# ---------------------------------------------------------------------------
# residual decompositions and oracle variances
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ResidualSet:
    """Projection residuals e(z), leverage deviations s(z), and contrasts."""

    e1: np.ndarray
    e0: np.ndarray
    s1: np.ndarray
    s0: np.ndarray

    @property
    def tau_e(self) -> np.ndarray:
        return self.e1 - self.e0

    @property
    def tau_s(self) -> np.ndarray:
        return self.s1 - self.s0


def residuals(table: ScienceTable) -> ResidualSet:
    """Decompose each potential-outcome vector against the hat matrix.

    e(z) = (I - H)(Y(z) - Ybar(z)) is the part regression adjustment
    removes; s(z) is the centered leverage-weighted deviation
    H_ii (Y_i(z) - Ybar(z)) - mean thereof, which drives the extra
    variability of the debiasing correction.
    """
    h = table.hat.h
    lev = table.hat.leverages
    out = {}
    for arm, y in ((1, table.y1), (0, table.y0)):
        yc = y - y.mean()
        e = yc - h @ yc
        sv = lev * yc
        out[arm] = (e, sv - sv.mean())
    return ResidualSet(e1=out[1][0], e0=out[0][0], s1=out[1][1], s0=out[0][1])


@dataclass(frozen=True)
class OracleVariances:
    """True per-n asymptotic variances for a given table and design."""

    sigma_cre2: float   # difference in means
    sigma_adj2: float   # classical regression-adjustment limit (fixed p)
    sigma_hd_l2: float  # linear part of the many-covariate limit
    sigma_hd_q2: float  # quadratic part of the many-covariate limit
    sigma_hd2: float    # sigma_hd_l2 + sigma_hd_q2
    r_squared: float    # 1 - sigma_adj2 / sigma_cre2
    s_tau2: float       # population variance of unit-level effects


def _neyman_form(a1: np.ndarray, a0: np.ndarray, r1: float) -> float:
    return (
        sample_variance(a1) / r1
        + sample_variance(a0) / (1.0 - r1)
        - sample_variance(a1 - a0)
    )


def _check_r1(r1: float) -> float:
    r1 = float(r1)
    if not 0.0 < r1 < 1.0:
        raise ValueError(f"treated proportion must lie in (0,1), got {r1}")
    return r1


def oracle_variances(table: ScienceTable, r1: float) -> OracleVariances:
    """All oracle variances for a completely randomized design with share r1."""
    r1 = _check_r1(r1)
    r0 = 1.0 - r1
    res = residuals(table)
    sigma_cre2 = _neyman_form(table.y1, table.y0, r1)
    sigma_adj2 = _neyman_form(res.e1, res.e0, r1)
    sigma_hd_l2 = _neyman_form(res.e1 + res.s1, res.e0 + res.s0, r1)
    w = table.y1 / r1**2 - table.y0 / r0**2
    sigma_hd_q2 = (r1 * r0) ** 2 * scaled_variance(table.hat.q, w)
    if sigma_cre2 <= 0:
        raise ValueError("difference-in-means variance is not positive")
    r_squared = min(max(1.0 - sigma_adj2 / sigma_cre2, 0.0), 1.0)
    return OracleVariances(
        sigma_cre2=sigma_cre2,
        sigma_adj2=sigma_adj2,
        sigma_hd_l2=sigma_hd_l2,
        sigma_hd_q2=sigma_hd_q2,
        sigma_hd2=sigma_hd_l2 + sigma_hd_q2,
        r_squared=r_squared,
        s_tau2=sample_variance(table.y1 - table.y0),
    )


def variance_components(table: ScienceTable, r1: float) -> tuple[float, float, float, float]:
    """Exact four-way split of sigma_hd2 into diagonal / off-diagonal,
    single-arm / cross-arm pieces.  The four terms sum to sigma_hd2 and
    each has a sample counterpart inside estimate_variance.
    """
    r1 = _check_r1(r1)
    r0 = 1.0 - r1
    q, b = table.hat.q, table.hat.b
    dq = np.diag(np.diag(q))
    db = np.diag(np.diag(b))
    oq = q - dq
    ob = b - db
    i1 = i2 = 0.0
    for y, rz in ((table.y1, r1), (table.y0, r0)):
        i1 += r1 * r0 * (
            r1 * r0 / rz**4 * scaled_variance(dq, y)
            + scaled_variance(db, y) / rz**2
        )
        i2 += r1 * r0 * (
            r1 * r0 / rz**4 * scaled_variance(oq, y)
            + scaled_variance(ob, y) / rz**2
        )
    i3 = 2.0 * (scaled_covariance(db, table.y1, table.y0)
                - scaled_covariance(dq, table.y1, table.y0))
    i4 = 2.0 * (scaled_covariance(ob, table.y1, table.y0)
                - scaled_covariance(oq, table.y1, table.y0))
    return i1, i2, i3, i4


# ---------------------------------------------------------------------------
# efficiency bounds for adjustment to help at all
# ---------------------------------------------------------------------------

def necessary_bound(alpha) -> np.ndarray | float:
    """R^2 level below which adjustment cannot beat the unadjusted estimator."""
    a = np.asarray(alpha, dtype=float)
    if np.any((a < 0) | (a > 1)):
        raise ValueError("alpha must lie in [0, 1]")
    out = (a**2 + 2 * a) / (1 + 2 * a)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class EfficiencyBounds:
    necessary_r2: float
    sufficient_r2: float
    r_l2: float | None  # closed form, defined only for a balanced design


def efficiency_bounds(table: ScienceTable, r1: float) -> EfficiencyBounds:
    """Necessary and sufficient R^2 thresholds for adjustment to win."""
    r1 = _check_r1(r1)
    r0 = 1.0 - r1
    a = table.hat.alpha
    nec = necessary_bound(a)
    w = table.y1 / r1**2 - table.y0 / r0**2
    v = table.y1 / r1 + table.y0 / r0
    suf = nec + 2 * r1 * r0 * a * (1 - a) / (1 + 2 * a) * (
        sample_variance(w) / sample_variance(v)
    )
    r_l2 = None
    if r1 == 0.5:
        gamma = sample_variance(table.y1 - table.y0) / (
            2 * sample_variance((table.y1 + table.y0) / 2)
        )
        r_l2 = float(nec + a * (1 - a) / (1 + 2 * a) * gamma)
    return EfficiencyBounds(necessary_r2=float(nec), sufficient_r2=float(suf), r_l2=r_l2)


def rl2_curve(alphas, gamma: float) -> np.ndarray:
    """Balanced-design break-even R^2 curve over a grid of alpha values.

    gamma is the effect-heterogeneity ratio S2(tau) / (2 S2((Y(1)+Y(0))/2));
    gamma = 0 recovers the necessary bound, and the curve rises to 1 as
    alpha -> 1 regardless of gamma.
    """
    a = np.asarray(alphas, dtype=float)
    if np.any((a < 0) | (a > 1)):
        raise ValueError("alpha grid must lie in [0, 1]")
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    return (a**2 + 2 * a) / (1 + 2 * a) + a * (1 - a) / (1 + 2 * a) * gamma


# ---------------------------------------------------------------------------
# sample moments of weighted quadratic forms
# ---------------------------------------------------------------------------

def _diag_of(D) -> np.ndarray:
    D = np.asarray(D, dtype=float)
    return np.diag(D) if D.ndim == 2 else D


def _arm_mask(data: ObservedData, arm: int) -> np.ndarray:
    if arm not in (0, 1):
        raise ValueError("arm must be 0 or 1")
    return data.z if arm == 1 else ~data.z


def sample_diag_quadratic(D, data: ObservedData, arm: int, scale_out: float = 1.0) -> float:
    """n_z^-1 sum_{i in arm} D_ii (scale_out * (Y_i - Ybar_arm))^2.

    D may be a full matrix (its diagonal is used) or the diagonal itself.
    """
    d = _diag_of(D)
    z = _arm_mask(data, arm)
    u = scale_out * (data.y[z] - data.y[z].mean())
    return float(d[z] @ u**2 / z.sum())


def sample_offdiag_quadratic(D, data: ObservedData, arm: int, scale_out: float = 1.0) -> float:
    """(r_z n_z)^-1 sum_{i != j, both in arm} D_ij u_i u_j with
    u = scale_out * (Y - Ybar_arm).  Diagonal entries of D never contribute.
    """
    D = np.asarray(D, dtype=float)
    z = _arm_mask(data, arm)
    nz = int(z.sum())
    rz = nz / data.assignment.n
    u = np.zeros(data.assignment.n)
    u[z] = scale_out * (data.y[z] - data.y[z].mean())
    total = u @ (D @ u) - np.diag(D) @ u**2
    return float(total / (rz * nz))


def sample_cross_offdiag(D, data: ObservedData) -> float:
    """(n r1 r0)^-1 sum_{i treated, j control} D_ij (Y_i - Ybar_1)(Y_j - Ybar_0)."""
    D = np.asarray(D, dtype=float)
    asg = data.assignment
    z = data.z
    u1 = np.zeros(asg.n)
    u0 = np.zeros(asg.n)
    u1[z] = data.y[z] - data.y[z].mean()
    u0[~z] = data.y[~z] - data.y[~z].mean()
    return float(u1 @ (D @ u0) / (asg.n * asg.r1 * asg.r0))


# ---------------------------------------------------------------------------
# the plug-in variance estimator for the debiased estimator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VarianceEstimate:
    """Plug-in variance estimate and its four building blocks.

    hd keeps a conservative cross-term bound tight for additive effects;
    hd_prime is the variant that is tighter under effect heterogeneity.
    combined takes the smaller of the two (ties resolved toward hd) and
    is clamped at zero (flagged) in the rare event both go negative.
    """

    i1: float
    i2: float
    i3_upper: float
    i3_upper_prime: float
    i4: float
    hd: float
    hd_prime: float
    combined: float
    source: str  # "hd" or "hd_prime"
    clamped: bool


def estimate_variance(data: ObservedData) -> VarianceEstimate:
    """Assignment-based estimate of the many-covariate variance.

    Every ingredient is a sample moment over one arm or over the two arms'
    off-diagonal pairs, weighted by entries of H, Q, or B; only observed
    outcomes enter.
    """
    hat = data.hat
    asg = data.assignment
    n = asg.n
    r = {1: asg.r1, 0: asg.r0}
    nz = {1: asg.n1, 0: asg.n0}

    qd = hat.leverages - hat.leverages**2
    bd = np.diag(hat.b)

    u = {}
    for arm in (1, 0):
        mask = _arm_mask(data, arm)
        v = np.zeros(n)
        v[mask] = data.y[mask] - data.y[mask].mean()
        u[arm] = v

    mdiag = {}
    moff = {}
    for arm in (1, 0):
        ua = u[arm]
        u2 = ua**2
        mdiag[("q", arm)] = float(qd @ u2) / nz[arm]
        mdiag[("b", arm)] = float(bd @ u2) / nz[arm]
        for name, mat, d in (("q", hat.q, qd), ("b", hat.b, bd), ("h", hat.h, hat.leverages)):
            total = float(ua @ (mat @ ua)) - float(d @ u2)
            moff[(name, arm)] = total / (r[arm] * nz[arm])

    cross = {}
    for name, mat in (("q", hat.q), ("b", hat.b), ("h", hat.h)):
        cross[name] = float(u[1] @ (mat @ u[0])) / (n * asg.r1 * asg.r0)

    r1, r0 = asg.r1, asg.r0
    i1 = i2 = 0.0
    for arm in (1, 0):
        rz = r[arm]
        i1 += r1 * r0 * (r1 * r0 / rz**4 * mdiag[("q", arm)] + mdiag[("b", arm)] / rz**2)
        i2 += r1 * r0 * (r1 * r0 / rz**4 * moff[("q", arm)] + moff[("b", arm)] / rz**2)

    i3_upper = sum(
        mdiag[("b", arm)] - mdiag[("q", arm)] - moff[("h", arm)] for arm in (1, 0)
    ) + 2.0 * cross["h"]
    i3_upper_prime = sum(mdiag[("b", arm)] - mdiag[("q", arm)] for arm in (1, 0))
    i4 = 2.0 * (cross["b"] - cross["q"])

    hd = i1 + i2 + i3_upper + i4
    hd_prime = i1 + i2 + i3_upper_prime + i4
    if hd <= hd_prime:
        combined, source = hd, "hd"
    else:
        combined, source = hd_prime, "hd_prime"
    clamped = combined < 0.0
    if clamped:
        combined = 0.0
    return VarianceEstimate(
        i1=i1, i2=i2, i3_upper=i3_upper, i3_upper_prime=i3_upper_prime, i4=i4,
        hd=hd, hd_prime=hd_prime, combined=combined, source=source, clamped=clamped,
    )


# ---------------------------------------------------------------------------
# competitor variance estimators and interval construction
# ---------------------------------------------------------------------------

def neyman_variance_unadj(data: ObservedData) -> float:
    """Classical conservative variance for the difference in means."""
    z = data.z
    return float(
        sample_variance(data.y[z]) / data.assignment.r1
        + sample_variance(data.y[~z]) / data.assignment.r0
    )


def hc3_variance(data: ObservedData, fit: LinFit | None = None) -> float:
    """HC3 sandwich variance paired with the arm-specific OLS estimator.

    Uses arm-level leverages computed from covariates centered at the
    pooled mean, and the arm OLS residuals.  Already on the per-n scale.
    Raises LeverageOneError when a leverage is within 1e-10 of 1, and
    ArmSingularError when an arm's Gram matrix cannot be factored.
    """
    if fit is None:
        fit = lin_fit(data)
    n = data.assignment.n
    total = 0.0
    for arm, resid in ((1, fit.resid1), (0, fit.resid0)):
        mask = _arm_mask(data, arm)
        nz = int(mask.sum())
        xa = data.hat.xc[mask]
        try:
            chol = cho_factor(xa.T @ xa, lower=True)
        except np.linalg.LinAlgError as err:
            raise ArmSingularError(arm, f"HC3 Gram factorization failed: {err}") from err
        w = cho_solve(chol, xa.T)
        lev = np.einsum("ij,ji->i", xa, w)
        worst = int(np.argmax(lev))
        if lev[worst] >= 1.0 - 1e-10:
            unit = int(np.flatnonzero(mask)[worst])
            raise LeverageOneError(arm, unit, float(lev[worst]))
        total += n / ((nz - 1) * nz) * float(np.sum(resid**2 / (1.0 - lev) ** 2))
    return total


def wald_ci(point: float, variance: float, n: int, level: float = 0.05) -> tuple[float, float]:
    """Normal-theory interval point +/- z * sqrt(variance / n)."""
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    if variance < 0.0:
        raise ValueError("variance must be nonnegative")
    if n < 1:
        raise ValueError("n must be positive")
    half = ndtri(1.0 - level / 2.0) * np.sqrt(variance / n)
    return float(point - half), float(point + half)
