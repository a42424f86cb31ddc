"""Simulation and multiple-imputation estimation laboratory for
longitudinal randomized trials in early Parkinson's disease.

The package simulates 12-month trials with two intercurrent events
(study-treatment discontinuation, symptomatic-treatment initiation),
implements eight multiple-imputation treatment-effect estimators
targeting hypothetical, mixed, and treatment-policy estimands, and runs
replicated studies reporting bias, RMSE, mean standard error, power, and
convergence-failure counts.
"""

from .bayes import (GibbsConfig, ImputedSet, PosteriorDraw, impute_subject,
                    marginal_mean_cir, marginal_mean_mar, multiple_impute,
                    posterior_draws)
from .errors import (ConfigNotAnalytic, ConvergenceFailure, DegenerateVariance,
                     NotPositiveDefinite, PdTrialLabError, RankDeficient,
                     SchemaMismatch, Singular)
from .estimands import (ESTIMATORS, AnalysisDataset, DesignMatrices, DesignSpec,
                        EstimatorSpec, build_design, build_tv_covariates,
                        mask_for_estimand)
from .mmrm import MmrmFit, fit_mmrm, observed_loglik
from .numerics import (RngStream, cholesky, mvn_conditional, sample_inverse_wishart,
                       sample_scaled_beta, student_t_two_sided_p)
from .pooling import PooledResult, ancova, rubin_pool
from .simulate import (SimConfig, SubjectRecord, TrialDataset, TruthResult,
                       analytic_hypothetical_truth, analytic_mixed_truth,
                       compute_truth_mc, export_long_csv, generator_marginals,
                       simulate_subject, simulate_trial, sympt_init_probability)
from .study import (StudyConfig, StudySummary, SummaryRow, emit,
                    informative_postdisc_probability, load_study_config,
                    merge_summaries, parse_summary, run_replication, run_study,
                    study_config_from_dict, summarize)

__version__ = "0.1.0"

__all__ = [
    "AnalysisDataset", "ConfigNotAnalytic", "ConvergenceFailure",
    "DegenerateVariance", "DesignMatrices", "DesignSpec", "ESTIMATORS",
    "EstimatorSpec", "GibbsConfig", "ImputedSet", "MmrmFit",
    "NotPositiveDefinite", "PdTrialLabError", "PooledResult", "PosteriorDraw",
    "RankDeficient", "RngStream", "SchemaMismatch", "SimConfig", "Singular",
    "StudyConfig", "StudySummary", "SubjectRecord", "SummaryRow",
    "TrialDataset", "TruthResult", "analytic_hypothetical_truth",
    "analytic_mixed_truth", "ancova", "build_design", "build_tv_covariates",
    "cholesky", "compute_truth_mc", "emit", "export_long_csv", "fit_mmrm",
    "generator_marginals", "impute_subject", "informative_postdisc_probability",
    "load_study_config", "marginal_mean_cir", "marginal_mean_mar",
    "mask_for_estimand", "merge_summaries", "multiple_impute",
    "mvn_conditional", "observed_loglik", "parse_summary", "posterior_draws",
    "rubin_pool", "run_replication", "run_study", "sample_inverse_wishart",
    "sample_scaled_beta", "simulate_subject", "simulate_trial",
    "study_config_from_dict",
    "student_t_two_sided_p", "summarize", "sympt_init_probability",
]
