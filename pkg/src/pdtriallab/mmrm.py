"""Likelihood fitting of the multivariate-normal repeated-measures model
with a common unstructured visit covariance, on fit-eligible outcomes.

Subjects contribute their observed response subvector y_i ~ N(X_i beta,
Sigma[obs_i, obs_i]). The mean coefficients are profiled out by
generalized least squares at every covariance value, and the covariance
is optimized over its log-Cholesky parameterization (diagonal of the
factor stored on the log scale), which keeps every iterate positive
definite. REML is the default criterion; plain maximum likelihood is
available for the saturated-model identities it satisfies exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .errors import ConvergenceFailure, NotPositiveDefinite, RankDeficient
from .estimands import DesignMatrices

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class MmrmFit:
    """Fitted repeated-measures model.

    ``beta_vcov`` is the GLS covariance (sum_i X_i' Sigma_i^-1 X_i)^-1 at
    the optimum; ``loglik`` is the REML or ML log-likelihood according to
    ``reml``.
    """

    beta: np.ndarray
    sigma: np.ndarray
    beta_vcov: np.ndarray
    loglik: float
    converged: bool
    n_iterations: int
    reml: bool
    columns: list[str] | None = None


@dataclass
class _Pattern:
    obs: np.ndarray        # observed visit indices, shape (J_o,)
    X: np.ndarray          # (m, J_o, p)
    y: np.ndarray          # (m, J_o)


def _group_patterns(X: np.ndarray, y: np.ndarray, mask: np.ndarray) -> list[_Pattern]:
    """Group subjects by identical eligibility pattern; drop empty rows."""
    keep = mask.any(axis=1)
    Xk, yk, mk = X[keep], y[keep], mask[keep]
    codes, inverse = np.unique(mk, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).reshape(-1)
    out = []
    for g in range(codes.shape[0]):
        obs = np.flatnonzero(codes[g])
        idx = np.flatnonzero(inverse == g)
        out.append(_Pattern(obs=obs, X=Xk[np.ix_(idx, obs)], y=yk[np.ix_(idx, obs)]))
    return out


def _theta_to_chol(theta: np.ndarray, J: int) -> np.ndarray:
    L = np.zeros((J, J))
    L[np.tril_indices(J)] = theta
    d = np.diag_indices(J)
    L[d] = np.exp(np.minimum(L[d], 200.0))
    return L


def _chol_to_theta(L: np.ndarray) -> np.ndarray:
    J = L.shape[0]
    M = L.copy()
    d = np.diag_indices(J)
    M[d] = np.log(np.maximum(M[d], 1e-300))
    return M[np.tril_indices(J)]


class _Objective:
    """Negative profiled (RE)ML log-likelihood and its analytic gradient.

    For each eligibility pattern, responses and design rows are whitened
    with the Cholesky factor of the pattern's covariance block, which
    turns the GLS normal equations into one stacked least-squares system.
    The gradient is assembled as a full matrix d(-2 loglik)/d Sigma and
    chained through the log-Cholesky map.
    """

    def __init__(self, patterns: list[_Pattern], J: int, p: int, reml: bool):
        self.patterns = patterns
        self.J = J
        self.p = p
        self.reml = reml
        self.n_obs = sum(pat.y.size for pat in patterns)
        self.n_eval = 0

    def _assemble(self, sigma: np.ndarray):
        """Whiten per pattern; return (H, g, rss-parts, logdet sum, caches)."""
        H = np.zeros((self.p, self.p))
        g = np.zeros(self.p)
        q_const = 0.0
        logdet = 0.0
        caches = []
        for pat in self.patterns:
            L = np.linalg.cholesky(sigma[np.ix_(pat.obs, pat.obs)])
            m, J_o, p = pat.X.shape
            Xw = solve_triangular(
                L, pat.X.transpose(1, 0, 2).reshape(J_o, m * p), lower=True
            ).reshape(J_o, m, p).transpose(1, 0, 2)
            yw = solve_triangular(L, pat.y.T, lower=True).T
            Xf = Xw.reshape(m * J_o, p)
            H += Xf.T @ Xf
            g += Xf.T @ yw.reshape(-1)
            q_const += float(yw.reshape(-1) @ yw.reshape(-1))
            logdet += 2.0 * m * float(np.log(np.diag(L)).sum())
            caches.append((L, Xw, yw))
        return H, g, q_const, logdet, caches

    def value_and_grad(self, theta: np.ndarray):
        self.n_eval += 1
        J = self.J
        L_sigma = _theta_to_chol(theta, J)
        sigma = L_sigma @ L_sigma.T
        try:
            H, g, q_const, logdet, caches = self._assemble(sigma)
            cf = cho_factor(H, lower=True)
        except np.linalg.LinAlgError:
            return np.inf, np.zeros_like(theta)
        beta = cho_solve(cf, g)
        rss = q_const - float(g @ beta)
        neg2 = self.n_obs * _LOG_2PI + logdet + rss
        if self.reml:
            neg2 += 2.0 * float(np.log(np.diag(cf[0])).sum()) - self.p * _LOG_2PI
        if not np.isfinite(neg2):
            return np.inf, np.zeros_like(theta)

        # d(-2 loglik)/d Sigma accumulated over patterns:
        #   T - T r r' T per subject, minus T W T for the REML term,
        # where T is the pattern block inverse and W = sum_i X_i H^-1 X_i'.
        G = np.zeros((J, J))
        if self.reml:
            Vc = np.linalg.cholesky(cho_solve(cf, np.eye(self.p)))
        for pat, (L, Xw, yw) in zip(self.patterns, caches):
            m = yw.shape[0]
            Rw = yw - Xw @ beta                       # whitened residuals (m, J_o)
            # T r = L^-T (whitened residual)
            TR = solve_triangular(L.T, Rw.T, lower=False).T
            Gp = -TR.T @ TR                           # - sum T r r' T
            T = cho_solve((L, True), np.eye(len(pat.obs)))
            Gp += m * T
            if self.reml:
                B = Xw @ Vc                           # (m, J_o, p)
                S = np.einsum("iap,ibp->ab", B, B)    # sum_i Xw_i H^-1 Xw_i'
                Gp -= solve_triangular(L.T, solve_triangular(
                    L.T, S.T, lower=False).T, lower=False)
            G[np.ix_(pat.obs, pat.obs)] += Gp
        G = 0.5 * (G + G.T)
        # chain rule through Sigma = L L' with log diagonal
        GL = 2.0 * (G @ L_sigma)
        GL[np.diag_indices(J)] *= np.diag(L_sigma)
        grad = GL[np.tril_indices(J)]
        return 0.5 * neg2, 0.5 * grad

    def loglik(self, theta: np.ndarray) -> float:
        v, _ = self.value_and_grad(theta)
        return -v

    def gls(self, sigma: np.ndarray):
        H, g, _, _, _ = self._assemble(sigma)
        cf = cho_factor(H, lower=True)
        beta = cho_solve(cf, g)
        vcov = cho_solve(cf, np.eye(self.p))
        return beta, 0.5 * (vcov + vcov.T)


def _starting_sigma(design: DesignMatrices) -> np.ndarray:
    """Pairwise-complete residual covariance, floored to positive definite.

    Residuals come from visit-wise least squares on the fit-eligible rows;
    missing pairs fall back to zero covariance and unit variance, and the
    eigenvalues are floored at 1e-6 * trace / J.
    """
    X, y, mask = design.X, design.y, design.fit_eligible
    n, J, _ = X.shape
    res = np.full((n, J), np.nan)
    for j in range(J):
        sel = mask[:, j]
        if not sel.any():
            continue
        A = X[sel, j, :]
        b = y[sel, j]
        coef, *_ = np.linalg.lstsq(A, b, rcond=None)
        res[sel, j] = b - A @ coef
    have = np.isfinite(res)
    resz = np.where(have, res, 0.0)
    counts = have.astype(float).T @ have.astype(float)
    raw = resz.T @ resz
    with np.errstate(invalid="ignore"):
        cov = np.where(counts > 0, raw / np.maximum(counts, 1.0), 0.0)
    for j in range(J):
        if counts[j, j] == 0:
            cov[j, j] = 1.0
    cov = 0.5 * (cov + cov.T)
    w, v = np.linalg.eigh(cov)
    floor = 1e-6 * max(np.trace(cov), 1e-8) / J
    w = np.maximum(w, floor)
    return (v * w) @ v.T


def observed_loglik(beta: np.ndarray, sigma: np.ndarray, design: DesignMatrices) -> float:
    """Gaussian log-likelihood of the fit-eligible subvectors at (beta, sigma).

    Subjects without fit-eligible visits contribute zero. This is the plain
    observed-data likelihood; the REML adjustment is a fitting criterion,
    not part of this density.
    """
    beta = np.asarray(beta, dtype=float)
    sig = np.asarray(sigma, dtype=float)
    patterns = _group_patterns(design.X, design.y, design.fit_eligible)
    total = 0.0
    for pat in patterns:
        block = sig[np.ix_(pat.obs, pat.obs)]
        try:
            L = np.linalg.cholesky(block)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefinite(str(exc)) from exc
        r = pat.y - pat.X @ beta
        rw = solve_triangular(L, r.T, lower=True)
        m, J_o = pat.y.shape
        total += -0.5 * (m * J_o * _LOG_2PI
                         + 2.0 * m * float(np.log(np.diag(L)).sum())
                         + float((rw ** 2).sum()))
    return total


def fit_mmrm(
    design: DesignMatrices,
    reml: bool = True,
    max_iter: int = 500,
    ftol: float = 1e-8,
    gtol: float = 1e-4,
) -> MmrmFit:
    """Profile-likelihood fit of the repeated-measures model.

    Starting values use the pairwise-complete residual covariance; the
    covariance parameters are then optimized by a quasi-Newton method with
    analytic gradients. Raises ConvergenceFailure (with the optimizer
    diagnostics attached) on iteration cap or a non-finite objective, and
    propagates RankDeficient from callers that skipped the design check.
    """
    patterns = _group_patterns(design.X, design.y, design.fit_eligible)
    if not patterns:
        raise RankDeficient("no fit-eligible observations")
    J, p = design.n_responses, design.n_columns
    obj = _Objective(patterns, J, p, reml=reml)

    sigma0 = _starting_sigma(design)
    theta0 = _chol_to_theta(np.linalg.cholesky(sigma0))

    res = optimize.minimize(
        obj.value_and_grad, theta0, jac=True, method="L-BFGS-B",
        options={"maxiter": max_iter, "ftol": ftol, "gtol": gtol,
                 "maxls": 50},
    )
    n_iter = int(res.nit)
    if not np.isfinite(res.fun):
        raise ConvergenceFailure(
            "objective became non-finite", reason="nonfinite", diagnostics=res)
    success = bool(res.success)
    if not success:
        # a line-search breakdown right at the optimum still counts when
        # the gradient criterion is met
        _, g_final = obj.value_and_grad(res.x)
        success = bool(np.max(np.abs(g_final)) <= gtol)
    if not success:
        reason = "iteration_cap" if n_iter >= max_iter else "nonfinite"
        raise ConvergenceFailure(
            f"optimizer did not converge: {res.message}", reason=reason,
            diagnostics=res)

    L_hat = _theta_to_chol(res.x, J)
    sigma = L_hat @ L_hat.T
    try:
        beta, vcov = obj.gls(sigma)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceFailure(
            "normal equations singular at optimum",
            reason="not_positive_definite", diagnostics=res) from exc
    return MmrmFit(
        beta=beta, sigma=sigma, beta_vcov=vcov, loglik=float(-res.fun),
        converged=True, n_iterations=n_iter, reml=reml,
        columns=list(design.columns),
    )
