"""Deterministic numerical primitives used by every other module.

Covers seeded random-number streams, dense symmetric linear algebra
(Cholesky, Gaussian conditioning), and the handful of distributions the
simulation and imputation machinery need: re-scaled beta draws,
inverse-Wishart draws, and Student-t tail probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats as sps
from scipy.linalg import solve_triangular

from .errors import NotPositiveDefinite

# Purpose tags for deriving independent random streams. Fixed integers,
# never hashes, so stream identities are stable across processes and runs.
SIM = 0
GIBBS = 1
IMPUTE = 2
TRUTH = 3
DIAG = 4


@dataclass(frozen=True)
class RngStream:
    """Hierarchical, reproducible random stream identity.

    A stream is identified by a 64-bit root seed plus a tuple of integer
    key components, conventionally (replication, subject, purpose).
    Distinct keys yield statistically independent Philox streams;
    identical (root_seed, key) pairs reproduce sequences bit-for-bit.
    Generators are single-owner: never share one across concurrent tasks.
    """

    root_seed: int
    key: tuple[int, ...] = ()

    def child(self, *key: int) -> "RngStream":
        return RngStream(self.root_seed, self.key + tuple(int(k) for k in key))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.root_seed, spawn_key=self.key)
        return np.random.Generator(np.random.Philox(ss))


def cholesky(m: np.ndarray) -> np.ndarray:
    """Lower-triangular factor L with L @ L.T == m.

    Raises NotPositiveDefinite when a pivot is non-positive, which callers
    treat as a fit or sampling failure.
    """
    a = np.asarray(m, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    scale = np.max(np.abs(a)) if a.size else 0.0
    if scale > 0 and np.max(np.abs(a - a.T)) > 1e-8 * scale:
        raise ValueError("matrix is not symmetric")
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from exc


def mvn_conditional(
    mean: np.ndarray,
    cov: np.ndarray,
    observed_idx,
    observed_vals,
) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian conditional law of the unobserved coordinates.

    Given x ~ N(mean, cov) and x[observed_idx] = observed_vals, returns
    (conditional mean, conditional covariance) of the remaining
    coordinates, in their original order. An empty observed set returns
    (mean, cov) unchanged.
    """
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    obs = np.asarray(observed_idx, dtype=int)
    if obs.size == 0:
        return mean.copy(), cov.copy()
    d = mean.shape[0]
    miss = np.setdiff1d(np.arange(d), obs)
    if miss.size == 0:
        raise ValueError("observed_idx must be a strict subset of coordinates")
    vals = np.asarray(observed_vals, dtype=float)
    L = cholesky(cov[np.ix_(obs, obs)])
    # B = L^-1 Sigma_om so that Sigma_mo Sigma_oo^-1 = (B from triangular solves)
    B = solve_triangular(L, cov[np.ix_(obs, miss)], lower=True)
    delta = solve_triangular(L, vals - mean[obs], lower=True)
    cond_mean = mean[miss] + B.T @ delta
    cond_cov = cov[np.ix_(miss, miss)] - B.T @ B
    cond_cov = 0.5 * (cond_cov + cond_cov.T)
    return cond_mean, cond_cov


def sample_scaled_beta(
    rng: np.random.Generator,
    alpha: float,
    beta: float,
    lo: float,
    hi: float,
    size=None,
):
    """Draw lo + (hi - lo) * B with B ~ Beta(alpha, beta).

    Sampled via two gamma draws, exact for all shape parameters. A
    degenerate range lo == hi returns lo without consuming randomness.
    """
    if alpha <= 0 or beta <= 0:
        raise ValueError("alpha and beta must be positive")
    if lo > hi:
        raise ValueError("need lo <= hi")
    if lo == hi:
        return float(lo) if size is None else np.full(size, float(lo))
    g1 = rng.gamma(alpha, 1.0, size)
    g2 = rng.gamma(beta, 1.0, size)
    b = g1 / (g1 + g2)
    return lo + (hi - lo) * b


def sample_inverse_wishart(
    rng: np.random.Generator, scale: np.ndarray, dof: float
) -> np.ndarray:
    """Positive-definite inverse-Wishart draw with E[X] = scale / (dof - dim - 1).

    Uses the Bartlett decomposition of the implied Wishart for the inverse,
    so only triangular solves are needed. Requires dof > dim - 1.
    """
    s = np.asarray(scale, dtype=float)
    p = s.shape[0]
    if dof <= p - 1:
        raise ValueError(f"need dof > dim - 1, got dof={dof} dim={p}")
    ls = cholesky(s)
    a = np.zeros((p, p))
    # A_jj^2 ~ chi^2(dof - j); below-diagonal entries standard normal
    a[np.diag_indices(p)] = np.sqrt(rng.chisquare(dof - np.arange(p)))
    if p > 1:
        a[np.tril_indices(p, -1)] = rng.standard_normal(p * (p - 1) // 2)
    k = solve_triangular(a, ls.T, lower=True)  # A^-1 Ls^T
    draw = k.T @ k
    return 0.5 * (draw + draw.T)


def student_t_two_sided_p(t: float, df: float) -> float:
    """Two-sided p-value 2 * (1 - CDF_t(|t|; df)), in (0, 1]."""
    if df <= 0:
        raise ValueError("df must be positive")
    p = 2.0 * float(sps.t.sf(abs(t), df))
    return min(p, 1.0)


def student_t_quantile(q: float, df: float) -> float:
    """Upper-tail t quantile used for confidence limits."""
    if df <= 0:
        raise ValueError("df must be positive")
    return float(sps.t.ppf(q, df))
