"""Per-imputation analysis and combination of the M results into a single
estimate, standard error, confidence interval, and p-value.

The analysis model is a final-visit analysis of covariance: change from
baseline regressed on treatment with adjustment for the baseline score.
Pooling follows the usual between/within variance decomposition with the
Barnard-Rubin small-sample degrees of freedom.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateVariance, Singular
from .numerics import student_t_quantile, student_t_two_sided_p


@dataclass
class PooledResult:
    estimate: float
    std_error: float
    df: float
    p_value: float
    ci_low: float
    ci_high: float
    M: int


def ancova(arm: np.ndarray, baseline: np.ndarray, y_final: np.ndarray):
    """Final-visit treatment contrast adjusted for baseline.

    Ordinary least squares of y_final on {intercept, arm indicator,
    baseline}; returns (arm coefficient, its sampling variance, residual
    degrees of freedom n - 3). Raises Singular for a constant baseline or
    an empty arm.
    """
    arm = np.asarray(arm, dtype=float)
    baseline = np.asarray(baseline, dtype=float)
    y = np.asarray(y_final, dtype=float)
    n = y.shape[0]
    if arm.min() == arm.max():
        raise Singular("one treatment arm is empty")
    if baseline.min() == baseline.max():
        raise Singular("baseline score is constant")
    if n < 4:
        raise Singular("too few subjects for a 3-parameter regression")
    X = np.column_stack([np.ones(n), arm, baseline])
    xtx = X.T @ X
    try:
        xtx_inv = np.linalg.inv(xtx)
    except np.linalg.LinAlgError as exc:
        raise Singular("collinear analysis design") from exc
    # guard against near-collinearity that inv() silently tolerates
    if np.linalg.cond(xtx) > 1e12:
        raise Singular("analysis design is numerically singular")
    coef = xtx_inv @ (X.T @ y)
    resid = y - X @ coef
    df = n - 3
    s2 = float(resid @ resid) / df
    return float(coef[1]), s2 * float(xtx_inv[1, 1]), float(df)


def rubin_pool(estimates, variances, residual_df: float) -> PooledResult:
    """Combine M point estimates and variances into one inference.

    Total variance is W + (1 + 1/M) B with W the mean within-imputation
    variance and B the between-imputation sample variance. Degrees of
    freedom use the Barnard-Rubin adjustment
        1/df = 1/nu_m + 1/nu_obs,
    with nu_m = (M-1)/lambda^2 and
    nu_obs = (nu_com+1)/(nu_com+3) * nu_com * (1-lambda); when the
    estimates are identical (lambda = 0) the df collapse to nu_obs.
    """
    q = np.asarray(estimates, dtype=float)
    u = np.asarray(variances, dtype=float)
    m = q.shape[0]
    if m < 2:
        raise ValueError("pooling requires at least 2 imputations")
    if np.any(u < 0):
        raise ValueError("within-imputation variances cannot be negative")
    est = float(q.mean())
    b = float(q.var(ddof=1))
    w = float(u.mean())
    v = w + (1.0 + 1.0 / m) * b
    if v <= 0:
        raise DegenerateVariance("total variance is zero")
    lam = (1.0 + 1.0 / m) * b / v
    nu_com = float(residual_df)
    nu_obs = (nu_com + 1.0) / (nu_com + 3.0) * nu_com * (1.0 - lam)
    if lam > 0:
        nu_m = (m - 1.0) / lam ** 2
        df = 1.0 / (1.0 / nu_m + 1.0 / nu_obs)
    else:
        df = nu_obs
    se = v ** 0.5
    t_stat = est / se
    p = student_t_two_sided_p(t_stat, df)
    half = student_t_quantile(0.975, df) * se
    return PooledResult(
        estimate=est, std_error=se, df=df, p_value=p,
        ci_low=est - half, ci_high=est + half, M=m,
    )
