"""Bayesian posterior draws of the repeated-measures model parameters via
data augmentation, and per-draw imputation of missing outcomes under
missing-at-random or copy-increments-in-reference rules.

The Gibbs chain alternates three steps on the fit-eligible data: fill in
the non-eligible coordinates from their Gaussian conditionals, draw the
mean coefficients from their Gaussian full conditional under a flat
prior, and draw the covariance from its inverse-Wishart full conditional
under the Jeffreys prior (degrees of freedom = number of chain subjects,
so the posterior mean of the covariance is S / (n - J - 1)). The chain
starts at the frequentist fit, which also certifies identifiability.

The sweep arithmetic uses explicit inverses of the small per-visit
covariance blocks and a precomputed design cross-product tensor; at the
response dimensions involved (a handful of visits) this is faster than
repeated factorizations and equally stable, and any degeneracy still
surfaces through the Cholesky of the conditional covariance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .errors import ConvergenceFailure, NotPositiveDefinite
from .estimands import CIR, AnalysisDataset, DesignMatrices, build_design
from .mmrm import MmrmFit, fit_mmrm
from .numerics import mvn_conditional, sample_inverse_wishart


@dataclass
class GibbsConfig:
    """Chain schedule: sweeps discarded up front and kept every ``thin``."""

    burn_in: int = 200
    thin: int = 20


@dataclass
class PosteriorDraw:
    beta: np.ndarray
    sigma: np.ndarray


@dataclass
class ImputedSet:
    """M completed change-from-baseline matrices for one analysis dataset.

    ``completed`` has shape (M, n, J); observed values are passed through
    untouched in every copy, including CIR's fit-ineligible observations.
    """

    completed: np.ndarray
    arm: np.ndarray
    baseline: np.ndarray
    estimator: str
    draw_indices: tuple[int, ...]
    seed_info: tuple | None = None

    @property
    def M(self) -> int:
        return self.completed.shape[0]


@dataclass
class _PatternGroup:
    """Subjects sharing one observation pattern, with indexers prebuilt."""

    obs: np.ndarray
    miss: np.ndarray
    idx: np.ndarray
    ix_obs: tuple | None
    ix_miss: tuple | None
    oo: tuple | None
    om: tuple | None
    mm: tuple | None


def _prepare_groups(mask: np.ndarray) -> list[_PatternGroup]:
    J = mask.shape[1]
    codes, inverse = np.unique(mask, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).reshape(-1)
    groups = []
    for g in range(codes.shape[0]):
        obs = np.flatnonzero(codes[g])
        miss = np.flatnonzero(~codes[g])
        idx = np.flatnonzero(inverse == g)
        groups.append(_PatternGroup(
            obs=obs, miss=miss, idx=idx,
            ix_obs=np.ix_(idx, obs) if obs.size else None,
            ix_miss=np.ix_(idx, miss) if miss.size else None,
            oo=np.ix_(obs, obs) if obs.size else None,
            om=np.ix_(obs, miss) if obs.size and miss.size else None,
            mm=np.ix_(miss, miss) if miss.size else None,
        ))
    return groups


def _fill_missing(Y, mu, sigma, groups, rng):
    """Draw unobserved coordinates from their Gaussian conditionals, per
    pattern, vectorized over the subjects sharing it."""
    for g in groups:
        if g.miss.size == 0:
            continue
        if g.obs.size == 0:
            Lc = np.linalg.cholesky(sigma)
            z = rng.standard_normal((g.idx.size, sigma.shape[0]))
            Y[g.idx] = mu[g.idx] + z @ Lc.T
            continue
        K = np.linalg.inv(sigma[g.oo]) @ sigma[g.om]       # Sigma_oo^-1 Sigma_om
        cond_cov = sigma[g.mm] - sigma[g.om].T @ K
        Lc = np.linalg.cholesky(0.5 * (cond_cov + cond_cov.T))
        cond_mean = mu[g.ix_miss] + (Y[g.ix_obs] - mu[g.ix_obs]) @ K
        z = rng.standard_normal((g.idx.size, g.miss.size))
        Y[g.ix_miss] = cond_mean + z @ Lc.T
    return Y


def posterior_draws(
    init: MmrmFit,
    design: DesignMatrices,
    M: int,
    gibbs: GibbsConfig,
    rng: np.random.Generator,
    fixed_sigma: np.ndarray | None = None,
) -> list[PosteriorDraw]:
    """M retained (beta, sigma) draws from the data-augmentation chain.

    Subjects without fit-eligible outcomes carry no information and are
    excluded from the chain (they are still imputed later). A sweep that
    hits a non-positive-definite conditional is retried once with fresh
    randomness before the chain is abandoned. ``fixed_sigma`` freezes the
    covariance at a known value, which makes the beta draws exactly
    Gaussian; it exists for calibration tests.
    """
    if not init.converged:
        raise ValueError("posterior_draws requires a converged initial fit")
    keep = design.fit_eligible.any(axis=1)
    X = np.ascontiguousarray(design.X[keep])
    mask = design.fit_eligible[keep]
    n, J, p = X.shape
    Y = np.where(mask, design.y[keep], 0.0)
    groups = _prepare_groups(mask)
    Xf = X.reshape(n * J, p)
    # design cross-products, constant across sweeps:
    #   H(sigma) = sum_ab Sigma^-1[a,b] * P[a,b]  with  P[a,b] = X_a' X_b
    P = np.einsum("nap,nbq->abpq", X, X)

    beta = init.beta.copy()
    sigma = init.sigma.copy() if fixed_sigma is None else np.asarray(fixed_sigma, float)

    def sweep(beta, sigma, Y):
        mu = (Xf @ beta).reshape(n, J)
        Y = _fill_missing(Y, mu, sigma, groups, rng)
        # beta | sigma, completed data: Gaussian around GLS under a flat prior
        s_inv = np.linalg.inv(sigma)
        H = np.tensordot(s_inv, P, axes=([0, 1], [0, 1]))
        g = Xf.T @ (Y @ s_inv).reshape(-1)
        L_H = np.linalg.cholesky(H)
        beta_hat = cho_solve((L_H, True), g)
        z = rng.standard_normal(p)
        beta = beta_hat + solve_triangular(L_H.T, z, lower=False)
        if fixed_sigma is None:
            resid = Y - (Xf @ beta).reshape(n, J)
            sigma = sample_inverse_wishart(rng, resid.T @ resid, float(n))
        return beta, sigma, Y

    draws: list[PosteriorDraw] = []
    total = gibbs.burn_in + M * gibbs.thin
    for s in range(1, total + 1):
        try:
            beta, sigma, Y = sweep(beta, sigma, Y)
        except (np.linalg.LinAlgError, NotPositiveDefinite):
            try:
                beta, sigma, Y = sweep(beta, sigma, Y)
            except (np.linalg.LinAlgError, NotPositiveDefinite) as exc:
                raise ConvergenceFailure(
                    f"posterior chain failed at sweep {s}",
                    reason="gibbs_failure") from exc
        if s > gibbs.burn_in and (s - gibbs.burn_in) % gibbs.thin == 0:
            draws.append(PosteriorDraw(beta=beta.copy(), sigma=sigma.copy()))
    return draws


def marginal_mean_mar(draw: PosteriorDraw, X_subject: np.ndarray) -> np.ndarray:
    """Model-implied mean trajectory for one subject: X @ beta."""
    return np.asarray(X_subject) @ draw.beta


def marginal_mean_cir(
    draw: PosteriorDraw,
    baseline: float,
    arm: int,
    disc_after_visit: int,
    n_responses: int,
) -> np.ndarray:
    """Copy-increments-in-reference mean trajectory for one subject.

    Requires the base design layout (no time-varying columns). Placebo
    subjects and subjects without a discontinuation keep their assigned
    arm's mean. An active subject discontinuing after all-visit index k
    keeps the active mean through the last response at or before k and
    then accrues the placebo arm's increments, so the benefit accumulated
    up to discontinuation is retained exactly.
    """
    J = n_responses
    beta = draw.beta
    if beta.shape[0] != 3 * J:
        raise ValueError("copy-increments means require the base design layout")
    base_terms = baseline * beta[2 * J:3 * J]
    mu_placebo = beta[0:J] + base_terms
    mu_active = beta[J:2 * J] + base_terms
    assigned = mu_active if arm == 1 else mu_placebo
    if arm != 1 or disc_after_visit < 0:
        return assigned.copy()
    out = assigned.copy()
    # response j sits at all-visit index j+1; post-discontinuation means j+1 > k
    post = np.arange(J) + 1 > disc_after_visit
    anchor = disc_after_visit - 1  # response index of the discontinuation visit
    anchor_active = assigned[anchor] if anchor >= 0 else 0.0
    anchor_placebo = mu_placebo[anchor] if anchor >= 0 else 0.0
    # written as placebo mean plus the retained benefit so the identity
    # (mu_cir - mu_placebo == benefit at the anchor) holds to the last bit
    out[post] = mu_placebo[post] + (anchor_active - anchor_placebo)
    return out


def impute_subject(
    draw: PosteriorDraw,
    marginal_mean: np.ndarray,
    observed_idx,
    observed_vals,
    rng: np.random.Generator,
) -> np.ndarray:
    """Complete one subject's trajectory given a parameter draw.

    Missing coordinates are sampled from their Gaussian conditional given
    the observed ones; observed coordinates pass through untouched.
    """
    mean = np.asarray(marginal_mean, dtype=float)
    obs = np.asarray(observed_idx, dtype=int)
    out = mean.copy()
    out[obs] = observed_vals
    miss = np.setdiff1d(np.arange(mean.shape[0]), obs)
    if miss.size == 0:
        return out
    cond_mean, cond_cov = mvn_conditional(mean, draw.sigma, obs, observed_vals)
    z = rng.standard_normal(miss.size)
    out[miss] = cond_mean + np.linalg.cholesky(cond_cov) @ z
    return out


def _strategy_means(
    draw: PosteriorDraw, data: AnalysisDataset, design: DesignMatrices
) -> np.ndarray:
    """Marginal mean matrix (n, J) under the estimator's imputation rule."""
    if data.spec.imputation == CIR:
        J = data.n_responses
        beta = draw.beta
        base_terms = data.baseline[:, None] * beta[2 * J:3 * J][None, :]
        mu = np.where(data.arm[:, None] == 1,
                      beta[J:2 * J][None, :], beta[0:J][None, :]) + base_terms
        # only active discontinuers deviate from their assigned-arm mean
        for i in np.flatnonzero((data.arm == 1) & (data.disc_after_visit >= 0)):
            mu[i] = marginal_mean_cir(
                draw, float(data.baseline[i]), 1,
                int(data.disc_after_visit[i]), J)
        return mu
    return design.X @ draw.beta


def multiple_impute(
    data: AnalysisDataset,
    M: int,
    rng: np.random.Generator,
    gibbs: GibbsConfig | None = None,
    init: MmrmFit | None = None,
    design: DesignMatrices | None = None,
) -> ImputedSet:
    """Fit, draw, and impute: M completed datasets for one estimator.

    Under MAR the imputation mean is the subject's own design mean
    (including any time-varying columns); under CIR it is the combined
    assigned/placebo trajectory. Conditioning always uses every present
    outcome, which for CIR includes the fit-ineligible ones.
    """
    gibbs = gibbs or GibbsConfig()
    if design is None:
        design = build_design(data)
    if init is None:
        init = fit_mmrm(design)
    draws = posterior_draws(init, design, M, gibbs, rng)

    n, J = data.n_subjects, data.n_responses
    present = data.present
    y_obs = np.where(present, data.outcome, 0.0)
    groups = _prepare_groups(present)
    completed = np.empty((M, n, J))
    for m, draw in enumerate(draws):
        mu = _strategy_means(draw, data, design)
        Ym = y_obs.copy()
        Ym = _fill_missing(Ym, mu, draw.sigma, groups, rng)
        Ym[present] = data.outcome[present]
        completed[m] = Ym
    return ImputedSet(
        completed=completed, arm=data.arm, baseline=data.baseline,
        estimator=data.spec.name, draw_indices=tuple(range(M)),
    )
