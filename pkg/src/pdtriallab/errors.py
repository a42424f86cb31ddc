"""Exception hierarchy shared across the package."""


class PdTrialLabError(Exception):
    """Base class for all package-specific errors."""


class NotPositiveDefinite(PdTrialLabError):
    """A matrix required to be positive definite failed a Cholesky pivot.

    Signals fit or sampling failure to the caller; replication harnesses
    map this onto the ``not_positive_definite`` failure category.
    """


class RankDeficient(PdTrialLabError):
    """The stacked design matrix is rank deficient on fit-eligible rows.

    Typically raised when no subject in one arm contributes data to a
    time-varying covariate column, which leaves that regression
    parameter unidentified.
    """


class ConvergenceFailure(PdTrialLabError):
    """Model fitting or posterior sampling did not converge.

    ``reason`` is one of the replication failure categories
    (``iteration_cap``, ``nonfinite``, ``not_positive_definite``,
    ``gibbs_failure``); ``diagnostics`` carries optimizer output.
    """

    def __init__(self, message: str, reason: str = "iteration_cap", diagnostics=None):
        super().__init__(message)
        self.reason = reason
        self.diagnostics = diagnostics


class ConfigNotAnalytic(PdTrialLabError):
    """Closed-form evaluation is unavailable for this configuration.

    Reserved for configurations whose discontinuation hazard depends on
    outcomes; the built-in configuration schema only supports per-arm
    constant visit hazards, which are always analytic.
    """


class Singular(PdTrialLabError):
    """Analysis-model regression is singular (constant covariate or empty arm)."""


class DegenerateVariance(PdTrialLabError):
    """Pooled total variance is zero; no inference is possible."""


class SchemaMismatch(PdTrialLabError):
    """A study summary file is malformed or cannot be merged safely."""
