"""Experimental design: hat-matrix geometry and complete randomization.

The hat matrix of a centered covariate matrix drives everything downstream:
leverage-based debiasing, the quadratic variance component, and the
matrices M and B that appear in the linear variance component.

    H_ij = (n-1)^-1 (X_i - Xbar)' S_X^-2 (X_j - Xbar)
    Q    = H.^2 off the diagonal, Q_ii = H_ii - H_ii^2
    M    = P - H + P diag{H},  P = I - 11'/n
    B    = M'M
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

#: eigenvalue-ratio threshold below which the covariate Gram matrix is
#: treated as numerically singular
COND_EPS = 1e-12

#: largest number of assignments enumerate_assignments will agree to produce
MAX_ENUMERATION = 10**6


class SingularCovariatesError(ValueError):
    """Centered covariate matrix is numerically rank deficient."""


class EnumerationTooLargeError(ValueError):
    """The assignment space is too large to enumerate exhaustively."""


def substream(seed, *subkeys: int) -> np.random.Generator:
    """Independent counter-based generator for (seed, *subkeys).

    Distinct key tuples give statistically independent Philox streams, so
    Monte Carlo replicates can be keyed by (cell, replicate) and produce
    identical draws regardless of execution order or worker count.
    """
    if isinstance(seed, np.random.Generator):
        if subkeys:
            raise ValueError("cannot derive subkeys from a live generator")
        return seed
    entropy = (int(seed),) + tuple(int(k) for k in subkeys)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


@dataclass(frozen=True)
class HatStructure:
    """Hat matrix of a covariate matrix together with derived quantities.

    Fields
    ------
    x_mean : column means of the raw covariates
    xc : centered covariates, n x p
    h : hat matrix (projection onto the centered column span), n x n
    leverages : diag(h)
    q : leverage interaction matrix Q
    m, b : debiased-residual map M and its Gram B = M'M
    alpha : covariate dimension ratio p/n
    """

    x_mean: np.ndarray
    xc: np.ndarray
    h: np.ndarray
    leverages: np.ndarray
    q: np.ndarray
    m: np.ndarray
    b: np.ndarray
    alpha: float
    n: int
    p: int
    # Cholesky factor of the centered Gram xc'xc, kept for O(p^2) solves
    gram_chol: tuple | None = field(repr=False, default=None)

    def solve_gram(self, rhs: np.ndarray) -> np.ndarray:
        """Solve (xc'xc) v = rhs via the cached Cholesky factor."""
        return cho_solve(self.gram_chol, rhs)


def build_hat_structure(X) -> HatStructure:
    """Compute the hat-matrix bundle for a raw covariate matrix.

    Requires 1 <= p < n and a numerically nonsingular centered Gram matrix
    (smallest/largest eigenvalue ratio above COND_EPS).  The inverse
    covariance is never formed explicitly; all solves go through a
    Cholesky factorization of xc'xc.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError("covariate matrix must be 2-d")
    n, p = X.shape
    if not 1 <= p < n:
        raise ValueError(f"need 1 <= p < n, got n={n}, p={p}")
    if not np.all(np.isfinite(X)):
        raise ValueError("covariate matrix contains non-finite entries")

    x_mean = X.mean(axis=0)
    xc = X - x_mean
    gram = xc.T @ xc
    evals = np.linalg.eigvalsh(gram)
    if evals[0] <= 0 or evals[0] / evals[-1] < COND_EPS:
        raise SingularCovariatesError(
            f"centered covariate Gram is numerically singular: eigenvalue ratio "
            f"{evals[0] / evals[-1]:.3e} below {COND_EPS:.0e}"
        )
    chol = cho_factor(gram, lower=True)

    h = xc @ cho_solve(chol, xc.T)
    h = (h + h.T) / 2.0  # symmetrize away factorization roundoff
    lev = np.diag(h).copy()

    q = h * h
    np.fill_diagonal(q, lev - lev**2)

    # P diag{H} has columns lev_j * (e_j - 1/n); P itself is I - 11'/n
    pmat = np.eye(n) - np.full((n, n), 1.0 / n)
    m = pmat - h + pmat * lev[np.newaxis, :]
    b = m.T @ m
    b = (b + b.T) / 2.0

    return HatStructure(
        x_mean=x_mean, xc=xc, h=h, leverages=lev, q=q, m=m, b=b,
        alpha=p / n, n=n, p=p, gram_chol=chol,
    )


@dataclass(frozen=True)
class Assignment:
    """A completely randomized assignment of n1 of n units to treatment."""

    z: np.ndarray  # boolean, True = treated
    n: int
    n1: int

    @property
    def n0(self) -> int:
        return self.n - self.n1

    @property
    def r1(self) -> float:
        return self.n1 / self.n

    @property
    def r0(self) -> float:
        return self.n0 / self.n


def _check_arm_sizes(n: int, n1: int) -> None:
    if not (isinstance(n, (int, np.integer)) and isinstance(n1, (int, np.integer))):
        raise ValueError("n and n1 must be integers")
    if not 0 < n1 < n:
        raise ValueError(f"need 0 < n1 < n, got n={n}, n1={n1}")


def complete_randomization(n: int, n1: int, rng) -> Assignment:
    """Draw one assignment uniformly from the n-choose-n1 possibilities.

    `rng` may be an integer seed or a live numpy Generator; passing a
    Generator lets callers draw a reproducible sequence of assignments.
    """
    _check_arm_sizes(n, n1)
    gen = rng if isinstance(rng, np.random.Generator) else substream(rng)
    z = np.zeros(n, dtype=bool)
    z[gen.permutation(n)[:n1]] = True
    return Assignment(z=z, n=n, n1=n1)


def enumerate_assignments(n: int, n1: int):
    """Yield every assignment of n1 of n units, in lexicographic order.

    Refuses (with EnumerationTooLargeError) when the count exceeds
    MAX_ENUMERATION, naming the offending count.
    """
    _check_arm_sizes(n, n1)
    total = math.comb(n, n1)
    if total > MAX_ENUMERATION:
        raise EnumerationTooLargeError(
            f"C({n},{n1}) = {total} assignments exceeds the enumeration "
            f"cap of {MAX_ENUMERATION}"
        )
    for treated in itertools.combinations(range(n), n1):
        z = np.zeros(n, dtype=bool)
        z[list(treated)] = True
        yield Assignment(z=z, n=n, n1=n1)
