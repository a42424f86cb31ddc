"""Transformation of a simulated trial into per-estimator analysis data:
event-strategy outcome masking, time-varying covariate construction, and
design-matrix assembly for the imputation and analysis models.

Masking follows the same "strictly after" convention as the generator:
the visit at which an event is recorded keeps its observation; later
visits are affected. Outcomes enter the models as change from baseline,
so the response grid covers post-baseline visits only and the baseline
score acts purely as a covariate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import qr

from .errors import RankDeficient
from .simulate import TrialDataset

HYPOTHETICAL = "hypothetical"
MIXED = "mixed"
POLICY = "policy"

MAR = "MAR"
CIR = "CIR"

TV_NONE = "none"
TV_POST_DISC = "post_disc_indicator"
TV_TIME_SINCE_DISC = "time_since_disc"
TV_POST_DISC_SYMPT = "post_disc_indicator+sympt_indicator"
TV_TIME_SINCE_DISC_SYMPT = "time_since_disc+sympt_indicator"

_TV_COMPONENTS = {
    TV_NONE: (),
    TV_POST_DISC: ("post_disc",),
    TV_TIME_SINCE_DISC: ("time_since_disc",),
    TV_POST_DISC_SYMPT: ("post_disc", "sympt"),
    TV_TIME_SINCE_DISC_SYMPT: ("time_since_disc", "sympt"),
}


# The eight supported estimator rows: name -> (estimand, imputation, tv scheme).
_ESTIMATOR_TABLE = {
    "MAR_HYP": (HYPOTHETICAL, MAR, TV_NONE),
    "MAR_MIX": (MIXED, MAR, TV_NONE),
    "CIR_MIX": (MIXED, CIR, TV_NONE),
    "TV1_MIX": (MIXED, MAR, TV_POST_DISC),
    "TV2_MIX": (MIXED, MAR, TV_TIME_SINCE_DISC),
    "MAR_TP": (POLICY, MAR, TV_NONE),
    "TV3_TP": (POLICY, MAR, TV_POST_DISC_SYMPT),
    "TV4_TP": (POLICY, MAR, TV_TIME_SINCE_DISC_SYMPT),
}


@dataclass(frozen=True)
class EstimatorSpec:
    """One row of the estimator table: estimand, imputation, covariates."""

    name: str
    estimand: str
    imputation: str
    tv_scheme: str

    def __post_init__(self):
        if _ESTIMATOR_TABLE.get(self.name) != (self.estimand, self.imputation,
                                               self.tv_scheme):
            raise ValueError(f"not a recognized estimator combination: {self}")

    @property
    def tv_components(self) -> tuple[str, ...]:
        return _TV_COMPONENTS[self.tv_scheme]


ESTIMATORS: dict[str, EstimatorSpec] = {
    name: EstimatorSpec(name, *row) for name, row in _ESTIMATOR_TABLE.items()
}


@dataclass
class AnalysisDataset:
    """Per-estimator masked analysis data on the change-from-baseline scale.

    ``outcome`` is (n, J) with NaN wherever the estimand's masking rule or
    dropout applies. ``fit_eligible`` flags the outcomes the imputation
    model may be fit on; it equals ``present`` except under CIR, where
    observed post-discontinuation outcomes stay present (and condition the
    imputation) but are excluded from the model fit.
    """

    spec: EstimatorSpec
    arm: np.ndarray
    baseline: np.ndarray
    outcome: np.ndarray
    present: np.ndarray
    fit_eligible: np.ndarray
    tv: dict[str, np.ndarray]
    disc_after_visit: np.ndarray
    sympt_after_visit: np.ndarray
    visit_months: tuple[float, ...]

    @property
    def n_subjects(self) -> int:
        return self.arm.shape[0]

    @property
    def n_responses(self) -> int:
        return self.outcome.shape[1]

    @property
    def response_times_years(self) -> np.ndarray:
        return np.asarray(self.visit_months[1:], dtype=float) / 12.0


def build_tv_covariates(data: TrialDataset, scheme: str) -> dict[str, np.ndarray]:
    """Time-varying covariate values on the response grid, (n, J) each.

    post_disc: 1 at visits strictly after the discontinuation visit;
    time_since_disc: years since the discontinuation visit there, else 0;
    sympt: 1 at visits strictly after the initiation visit. Values exist
    at every visit (the recorded event times define them), which is what
    lets the imputation model use them at missing outcomes.
    """
    if scheme == TV_NONE:
        raise ValueError("no time-varying covariates requested")
    t = data.config.times_years
    vidx = np.arange(1, data.config.n_visits)[None, :]  # all-visit indices of responses
    out: dict[str, np.ndarray] = {}
    for comp in _TV_COMPONENTS[scheme]:
        if comp in ("post_disc", "time_since_disc"):
            ev = data.disc_after_visit[:, None]
        else:
            ev = data.sympt_after_visit[:, None]
        after = (ev >= 0) & (vidx > ev)
        if comp == "time_since_disc":
            vals = np.where(after, t[None, 1:] - t[np.maximum(ev, 0)], 0.0)
        else:
            vals = after.astype(float)
        out[comp] = vals
    return out


def mask_for_estimand(data: TrialDataset, spec: EstimatorSpec) -> AnalysisDataset:
    """Apply the estimand's event strategy and dropout to the observed data.

    hypothetical: outcomes strictly after the first event are missing;
    mixed: outcomes strictly after symptomatic initiation are missing;
    policy: all observed outcomes stay. Dropout masking is already part of
    ``data.observed`` and always applies on top.
    """
    nv = data.config.n_visits
    vidx = np.arange(1, nv)[None, :]
    obs = data.observed
    baseline = obs[:, 0].copy()
    if not np.all(np.isfinite(baseline)):
        raise ValueError("baseline score must be observed for every subject")

    disc = data.disc_after_visit[:, None]
    sympt = data.sympt_after_visit[:, None]
    none = np.iinfo(np.int64).max
    disc_eff = np.where(disc >= 0, disc, none)
    sympt_eff = np.where(sympt >= 0, sympt, none)
    if spec.estimand == HYPOTHETICAL:
        keep = vidx <= np.minimum(disc_eff, sympt_eff)
    elif spec.estimand == MIXED:
        keep = vidx <= sympt_eff
    elif spec.estimand == POLICY:
        keep = np.ones((data.n_subjects, nv - 1), dtype=bool)
    else:
        raise ValueError(f"unknown estimand {spec.estimand!r}")

    present = keep & np.isfinite(obs[:, 1:])
    outcome = np.where(present, obs[:, 1:] - baseline[:, None], np.nan)
    if spec.imputation == CIR:
        fit_eligible = present & (vidx <= disc_eff)
    else:
        fit_eligible = present.copy()

    tv = (build_tv_covariates(data, spec.tv_scheme)
          if spec.tv_scheme != TV_NONE else {})
    return AnalysisDataset(
        spec=spec,
        arm=data.arm.astype(np.int8).copy(),
        baseline=baseline,
        outcome=outcome,
        present=present,
        fit_eligible=fit_eligible,
        tv=tv,
        disc_after_visit=data.disc_after_visit.copy(),
        sympt_after_visit=data.sympt_after_visit.copy(),
        visit_months=data.config.visit_months,
    )


@dataclass(frozen=True)
class DesignSpec:
    """Column plan for the repeated-measures imputation model.

    The base model is saturated in arm-by-visit cells plus baseline-by-visit
    terms: 2J + J columns. Each time-varying component adds a main-effect
    column and a treatment-interaction column.
    """

    n_responses: int
    tv_components: tuple[str, ...] = ()

    @property
    def n_columns(self) -> int:
        return 3 * self.n_responses + 2 * len(self.tv_components)


@dataclass
class DesignMatrices:
    """Per-subject design tensors plus response and eligibility masks.

    X has shape (n, J, p) with the canonical column layout
    [placebo x visit | active x visit | baseline x visit | tv pairs],
    which downstream code relies on for arm-specific mean trajectories.
    """

    X: np.ndarray
    y: np.ndarray
    present: np.ndarray
    fit_eligible: np.ndarray
    columns: list[str]
    arm: np.ndarray
    baseline: np.ndarray

    @property
    def n_subjects(self) -> int:
        return self.X.shape[0]

    @property
    def n_responses(self) -> int:
        return self.X.shape[1]

    @property
    def n_columns(self) -> int:
        return self.X.shape[2]


RANK_TOL = 1e-8


def design_spec_for(spec: EstimatorSpec, n_responses: int) -> DesignSpec:
    # CIR pairs with the base model: post-discontinuation behaviour is
    # handled in the imputation step, not with covariates.
    tv = () if spec.imputation == CIR else spec.tv_components
    return DesignSpec(n_responses=n_responses, tv_components=tv)


def build_design(data: AnalysisDataset, dspec: DesignSpec | None = None) -> DesignMatrices:
    """Assemble design tensors and verify identifiability.

    Raises RankDeficient when the stacked fit-eligible rows do not have
    full column rank (pivoted QR, threshold RANK_TOL times the largest
    column norm); deficiency is reported, never silently repaired.
    """
    if dspec is None:
        dspec = design_spec_for(data.spec, data.n_responses)
    n, J = data.n_subjects, data.n_responses
    if dspec.n_responses != J:
        raise ValueError("design and data disagree on the response grid")
    p = dspec.n_columns
    months = data.visit_months[1:]

    X = np.zeros((n, J, p))
    rows = np.arange(n)
    cols = []
    for j in range(J):
        X[rows, j, (data.arm.astype(int) * J) + j] = 1.0
        X[rows, j, 2 * J + j] = data.baseline
    cols += [f"placebo:m{months[j]:g}" for j in range(J)]
    cols += [f"active:m{months[j]:g}" for j in range(J)]
    cols += [f"baseline:m{months[j]:g}" for j in range(J)]
    for c, comp in enumerate(dspec.tv_components):
        vals = data.tv[comp]
        base_col = 3 * J + 2 * c
        X[:, :, base_col] = vals
        X[:, :, base_col + 1] = vals * data.arm[:, None]
        cols += [comp, f"{comp}:active"]

    stacked = X[data.fit_eligible]
    if stacked.shape[0] < p:
        raise RankDeficient(
            f"{stacked.shape[0]} fit-eligible rows cannot identify {p} columns")
    col_norms = np.sqrt((stacked ** 2).sum(axis=0))
    _, r, piv = qr(stacked, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = RANK_TOL * col_norms.max()
    rank = int((diag > tol).sum())
    if rank < p:
        bad = [cols[piv[k]] for k in range(rank, p)]
        raise RankDeficient(
            f"design rank {rank} < {p} on fit-eligible rows; "
            f"unidentified columns: {', '.join(bad)}")

    return DesignMatrices(
        X=X, y=data.outcome, present=data.present,
        fit_eligible=data.fit_eligible, columns=cols,
        arm=data.arm, baseline=data.baseline,
    )
