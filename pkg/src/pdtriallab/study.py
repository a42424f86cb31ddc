"""Replicated simulation studies: configuration ingestion, parallel
execution across sample sizes and estimators, failure accounting,
performance metrics, and CSV/JSON emission.

A replication simulates one trial and runs every requested estimator on
it (sharing the dataset reduces between-estimator comparison variance).
Per-estimator failures are recorded under a fixed taxonomy and excluded
from all summaries. Random streams are keyed by replication index, so
summaries are bit-for-bit independent of the thread budget.
"""

from __future__ import annotations

import csv
import json
import math
import multiprocessing
from dataclasses import dataclass, field, fields

import numpy as np

from .bayes import GibbsConfig, multiple_impute
from .errors import (ConvergenceFailure, DegenerateVariance, NotPositiveDefinite,
                     PdTrialLabError, RankDeficient, SchemaMismatch, Singular)
from .estimands import ESTIMATORS, HYPOTHETICAL, MIXED, POLICY, mask_for_estimand
from .numerics import DIAG, GIBBS, RngStream
from .pooling import ancova, rubin_pool
from .simulate import (ACTIVE, PLACEBO, SimConfig,
                       analytic_hypothetical_truth, analytic_mixed_truth,
                       compute_truth_mc, _simulate_block, simulate_trial)

FAILURE_RANK_DEFICIENT = "rank_deficient"
FAILURE_NOT_PD = "not_positive_definite"
FAILURE_ITERATION_CAP = "iteration_cap"
FAILURE_NONFINITE = "nonfinite"
FAILURE_GIBBS = "gibbs_failure"
FAILURE_KINDS = (FAILURE_RANK_DEFICIENT, FAILURE_NOT_PD, FAILURE_ITERATION_CAP,
                 FAILURE_NONFINITE, FAILURE_GIBBS)

# top-level stream namespaces; replication indices live under their own
# prefix so they can never collide with truth or diagnostic streams
_NS_REPLICATION = 0
_NS_TRUTH = 1


@dataclass(frozen=True)
class StudyConfig:
    """Full description of one replicated study."""

    sim: SimConfig = field(default_factory=SimConfig)
    sample_sizes: tuple[int, ...] = (75, 100, 125, 150, 175, 200, 225, 250, 275, 300)
    replications: int = 500
    M: int = 25
    estimators: tuple[str, ...] = tuple(ESTIMATORS)
    alpha: float = 0.05
    root_seed: int = 1729
    threads: int = 1
    gibbs_burn_in: int = 200
    gibbs_thin: int = 20
    truth_n_per_arm: int = 1_000_000

    def __post_init__(self):
        if self.replications < 1:
            raise ValueError("replications must be at least 1")
        if self.M < 2:
            raise ValueError("M must be at least 2")
        unknown = [e for e in self.estimators if e not in ESTIMATORS]
        if unknown:
            raise ValueError(f"unknown estimators: {unknown}")
        if not (0 < self.alpha < 1):
            raise ValueError("alpha must lie in (0, 1)")
        if self.threads < 1:
            raise ValueError("threads must be at least 1")

    @property
    def gibbs(self) -> GibbsConfig:
        return GibbsConfig(burn_in=self.gibbs_burn_in, thin=self.gibbs_thin)


@dataclass
class EstimateRecord:
    estimate: float
    std_error: float
    p_value: float
    df: float


@dataclass
class ReplicationResult:
    rep: int
    n_per_arm: int
    estimates: dict  # estimator name -> EstimateRecord or failure string


def _classify_failure(exc: PdTrialLabError) -> str:
    if isinstance(exc, RankDeficient):
        return FAILURE_RANK_DEFICIENT
    if isinstance(exc, NotPositiveDefinite):
        return FAILURE_NOT_PD
    if isinstance(exc, ConvergenceFailure):
        return exc.reason if exc.reason in FAILURE_KINDS else FAILURE_ITERATION_CAP
    return FAILURE_NONFINITE


def run_replication(cfg: StudyConfig, n_per_arm: int, rep: int) -> ReplicationResult:
    """One trial, all estimators; failures recorded, never raised."""
    stream = RngStream(cfg.root_seed).child(_NS_REPLICATION, rep)
    trial = simulate_trial(n_per_arm, cfg.sim, stream)
    out: dict = {}
    for e_idx, name in enumerate(cfg.estimators):
        spec = ESTIMATORS[name]
        rng = stream.child(2 * n_per_arm, GIBBS, e_idx).generator()
        try:
            analysis = mask_for_estimand(trial, spec)
            imputed = multiple_impute(analysis, cfg.M, rng, gibbs=cfg.gibbs)
            ests = np.empty(cfg.M)
            variances = np.empty(cfg.M)
            df_com = 0.0
            for m in range(cfg.M):
                ests[m], variances[m], df_com = ancova(
                    imputed.arm, imputed.baseline, imputed.completed[m, :, -1])
            pooled = rubin_pool(ests, variances, df_com)
            out[name] = EstimateRecord(
                estimate=pooled.estimate, std_error=pooled.std_error,
                p_value=pooled.p_value, df=pooled.df)
        except (RankDeficient, NotPositiveDefinite, ConvergenceFailure,
                Singular, DegenerateVariance) as exc:
            out[name] = _classify_failure(exc)
    return ReplicationResult(rep=rep, n_per_arm=n_per_arm, estimates=out)


@dataclass
class SummaryRow:
    sample_size: int
    estimator: str
    truth: float
    mean_estimate: float
    bias: float
    rmse: float
    mean_se: float
    power: float
    n_failures: int
    n_effective: int
    # (root_seed, first replication, one past last) spans backing this row
    provenance: tuple = ()


@dataclass
class StudySummary:
    rows: list

    def row(self, sample_size: int, estimator: str) -> SummaryRow:
        for r in self.rows:
            if r.sample_size == sample_size and r.estimator == estimator:
                return r
        raise KeyError((sample_size, estimator))


_truth_cache: dict = {}


def estimand_truths(cfg: StudyConfig) -> dict:
    """Ground truths per estimand, analytic where exact, Monte Carlo otherwise.

    Hypothetical and mixed truths have closed forms under the outcome-
    independent visit hazards this configuration schema supports; the
    policy truth requires simulation. Cached per (sim config, n, seed).
    """
    key = (cfg.sim, cfg.truth_n_per_arm, cfg.root_seed)
    if key not in _truth_cache:
        mc = compute_truth_mc(cfg.sim, cfg.truth_n_per_arm,
                              RngStream(cfg.root_seed).child(_NS_TRUTH))
        _truth_cache[key] = {
            HYPOTHETICAL: analytic_hypothetical_truth(cfg.sim),
            MIXED: analytic_mixed_truth(cfg.sim),
            POLICY: mc.policy_effect,
        }
    return _truth_cache[key]


def _rep_block(args):
    cfg, n_per_arm, reps = args
    return [run_replication(cfg, n_per_arm, r) for r in reps]


def run_study(cfg: StudyConfig) -> StudySummary:
    """Execute the full grid and reduce to per-cell performance metrics.

    Replications are independent tasks; results are sorted by replication
    index before reduction, so the summary does not depend on the thread
    budget or scheduling order.
    """
    truths = estimand_truths(cfg)
    results: list[ReplicationResult] = []
    for n in cfg.sample_sizes:
        reps = list(range(cfg.replications))
        if cfg.threads > 1 and cfg.replications > 1:
            blocks = [(cfg, n, reps[i::cfg.threads]) for i in range(cfg.threads)]
            with multiprocessing.get_context("fork").Pool(cfg.threads) as pool:
                for block in pool.map(_rep_block, blocks):
                    results.extend(block)
        else:
            results.extend(_rep_block((cfg, n, reps)))
    results.sort(key=lambda r: (r.n_per_arm, r.rep))

    rows = []
    for n in cfg.sample_sizes:
        cell_reps = [r for r in results if r.n_per_arm == n]
        for name in cfg.estimators:
            truth = truths[ESTIMATORS[name].estimand]
            records = [r.estimates[name] for r in cell_reps]
            good = [rec for rec in records if isinstance(rec, EstimateRecord)]
            n_fail = len(records) - len(good)
            if good:
                est = np.array([g.estimate for g in good])
                se = np.array([g.std_error for g in good])
                p = np.array([g.p_value for g in good])
                mean_est = float(est.mean())
                rmse = float(np.sqrt(np.mean((est - truth) ** 2)))
                mean_se = float(se.mean())
                power = float(np.mean(p < cfg.alpha))
            else:
                mean_est = rmse = mean_se = power = float("nan")
            rows.append(SummaryRow(
                sample_size=n, estimator=name, truth=float(truth),
                mean_estimate=mean_est, bias=mean_est - truth, rmse=rmse,
                mean_se=mean_se, power=power, n_failures=n_fail,
                n_effective=len(good),
                provenance=((cfg.root_seed, 0, cfg.replications),),
            ))
    return StudySummary(rows=rows)


@dataclass
class PostdiscDiagnosis:
    """Probability of informative retrieved post-discontinuation data."""

    placebo: float
    active: float
    all_empty: float
    n_per_arm_for_all_empty: int


def informative_postdisc_probability(
    sim: SimConfig,
    n_per_arm: int,
    stream: RngStream,
    mc_subjects: int = 1_000_000,
    chunk: int = 200_000,
) -> PostdiscDiagnosis:
    """Monte-Carlo probability that a subject contributes retrieved
    post-discontinuation data before symptomatic initiation, per arm, and
    the chance that a trial of the given size has no such subject in at
    least one arm (the identification failure mode of the time-varying
    discontinuation covariates).
    """
    p_arm = {}
    for arm in (PLACEBO, ACTIVE):
        hits = 0
        done = 0
        block = 0
        while done < mc_subjects:
            m = min(chunk, mc_subjects - done)
            rng = stream.child(DIAG, arm, block).generator()
            blk = _simulate_block(arm, m, sim, rng)
            disc, sympt, dropped = blk["disc"], blk["sympt"], blk["dropped"]
            informative = (disc >= 0) & ~dropped & ((sympt < 0) | (sympt > disc))
            hits += int(informative.sum())
            done += m
            block += 1
        p_arm[arm] = hits / mc_subjects
    all_empty = 1.0 - ((1.0 - (1.0 - p_arm[PLACEBO]) ** n_per_arm)
                       * (1.0 - (1.0 - p_arm[ACTIVE]) ** n_per_arm))
    return PostdiscDiagnosis(
        placebo=p_arm[PLACEBO], active=p_arm[ACTIVE], all_empty=all_empty,
        n_per_arm_for_all_empty=n_per_arm,
    )


# ---------------------------------------------------------------------------
# Emission, parsing, merging

CSV_COLUMNS = ("sample_size", "estimator", "truth", "mean_estimate", "bias",
               "rmse", "mean_se", "power", "n_failures", "n_effective")


def _sig6(v: float) -> str:
    if isinstance(v, float) and math.isnan(v):
        return "nan"
    return f"{v:.6g}"


def emit(summary: StudySummary, fmt: str, path) -> None:
    """Write a summary as plot-ready CSV or provenance-carrying JSON.

    The CSV holds exactly the ten metric columns at six significant
    digits. Replication provenance, which merging requires, is only
    representable in JSON.
    """
    if fmt == "csv":
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for r in summary.rows:
                w.writerow([r.sample_size, r.estimator] + [
                    _sig6(getattr(r, c)) for c in CSV_COLUMNS[2:8]
                ] + [r.n_failures, r.n_effective])
    elif fmt == "json":
        payload = {
            "format": "pdtriallab-study-summary",
            "version": 1,
            "rows": [
                {**{c: getattr(r, c) for c in CSV_COLUMNS},
                 "provenance": [list(span) for span in r.provenance]}
                for r in summary.rows
            ],
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, allow_nan=True)
            fh.write("\n")
    else:
        raise ValueError(f"unknown format {fmt!r}")


def parse_summary(path) -> StudySummary:
    """Read a summary back from either emitted format."""
    text = str(path)
    if text.endswith(".json"):
        with open(path, encoding="utf-8") as fh:
            try:
                payload = json.load(fh)
            except json.JSONDecodeError as exc:
                raise SchemaMismatch(f"not valid JSON: {exc}") from exc
        if not isinstance(payload, dict) or payload.get(
                "format") != "pdtriallab-study-summary":
            raise SchemaMismatch("not a study summary JSON file")
        rows = []
        for raw in payload["rows"]:
            try:
                rows.append(SummaryRow(
                    sample_size=int(raw["sample_size"]),
                    estimator=str(raw["estimator"]),
                    truth=float(raw["truth"]),
                    mean_estimate=float(raw["mean_estimate"]),
                    bias=float(raw["bias"]),
                    rmse=float(raw["rmse"]),
                    mean_se=float(raw["mean_se"]),
                    power=float(raw["power"]),
                    n_failures=int(raw["n_failures"]),
                    n_effective=int(raw["n_effective"]),
                    provenance=tuple(tuple(int(x) for x in span)
                                     for span in raw.get("provenance", [])),
                ))
            except (KeyError, TypeError, ValueError) as exc:
                raise SchemaMismatch(f"malformed summary row: {exc}") from exc
        return StudySummary(rows=rows)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaMismatch("empty summary file") from None
        if tuple(header) != CSV_COLUMNS:
            raise SchemaMismatch(f"unexpected CSV header {header}")
        rows = []
        for line in reader:
            if len(line) != len(CSV_COLUMNS):
                raise SchemaMismatch(f"bad CSV row: {line}")
            try:
                rows.append(SummaryRow(
                    sample_size=int(line[0]), estimator=line[1],
                    truth=float(line[2]), mean_estimate=float(line[3]),
                    bias=float(line[4]), rmse=float(line[5]),
                    mean_se=float(line[6]), power=float(line[7]),
                    n_failures=int(line[8]), n_effective=int(line[9]),
                ))
            except ValueError as exc:
                raise SchemaMismatch(f"bad CSV row: {line}") from exc
        return StudySummary(rows=rows)


def _merge_rows(a: SummaryRow, b: SummaryRow) -> SummaryRow:
    if not a.provenance or not b.provenance:
        raise SchemaMismatch(
            "cannot merge rows without replication provenance; re-emit as JSON")
    for seed_a, lo_a, hi_a in a.provenance:
        for seed_b, lo_b, hi_b in b.provenance:
            if seed_a == seed_b and lo_a < hi_b and lo_b < hi_a:
                raise SchemaMismatch(
                    f"overlapping replication ranges for "
                    f"({a.sample_size}, {a.estimator})")
    if not math.isclose(a.truth, b.truth, rel_tol=1e-9, abs_tol=1e-12):
        raise SchemaMismatch(
            f"conflicting truths for ({a.sample_size}, {a.estimator})")
    na, nb = a.n_effective, b.n_effective
    n = na + nb
    if n == 0:
        mean_est = rmse = mean_se = power = float("nan")
    elif na == 0:
        mean_est, rmse, mean_se, power = b.mean_estimate, b.rmse, b.mean_se, b.power
    elif nb == 0:
        mean_est, rmse, mean_se, power = a.mean_estimate, a.rmse, a.mean_se, a.power
    else:
        mean_est = (na * a.mean_estimate + nb * b.mean_estimate) / n
        rmse = math.sqrt((na * a.rmse ** 2 + nb * b.rmse ** 2) / n)
        mean_se = (na * a.mean_se + nb * b.mean_se) / n
        power = (na * a.power + nb * b.power) / n
    return SummaryRow(
        sample_size=a.sample_size, estimator=a.estimator, truth=a.truth,
        mean_estimate=mean_est, bias=mean_est - a.truth, rmse=rmse,
        mean_se=mean_se, power=power, n_failures=a.n_failures + b.n_failures,
        n_effective=n, provenance=tuple(sorted(a.provenance + b.provenance)),
    )


def merge_summaries(summaries) -> StudySummary:
    cells: dict = {}
    order = []  # first-seen order, so single-input merges round-trip
    for s in summaries:
        for r in s.rows:
            key = (r.sample_size, r.estimator)
            if key in cells:
                cells[key] = _merge_rows(cells[key], r)
            else:
                cells[key] = r
                order.append(key)
    return StudySummary(rows=[cells[k] for k in order])


def summarize(paths) -> StudySummary:
    """Parse and merge summary files into one summary."""
    return merge_summaries([parse_summary(p) for p in paths])


# ---------------------------------------------------------------------------
# Configuration files

def _sim_from_dict(raw: dict) -> SimConfig:
    allowed = {f.name for f in fields(SimConfig)}
    unknown = set(raw) - allowed
    if unknown:
        raise SchemaMismatch(f"unknown sim config keys: {sorted(unknown)}")
    kwargs = dict(raw)
    for name in ("visit_months", "sympt_base_prob_by_visit", "sympt_drop_law",
                 "disc_prob_per_visit"):
        if name in kwargs:
            kwargs[name] = tuple(kwargs[name])
    if "disc_prob_per_visit" in raw and isinstance(raw["disc_prob_per_visit"], dict):
        d = raw["disc_prob_per_visit"]
        extra = set(d) - {"placebo", "active"}
        if extra:
            raise SchemaMismatch(f"unknown disc_prob_per_visit keys: {sorted(extra)}")
        kwargs["disc_prob_per_visit"] = (d["placebo"], d["active"])
    try:
        return SimConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise SchemaMismatch(f"invalid sim config: {exc}") from exc


def study_config_from_dict(raw: dict) -> StudyConfig:
    """Build a StudyConfig from a parsed JSON document, rejecting unknown keys."""
    allowed = {f.name for f in fields(StudyConfig)}
    unknown = set(raw) - allowed
    if unknown:
        raise SchemaMismatch(f"unknown study config keys: {sorted(unknown)}")
    kwargs = dict(raw)
    if "sim" in kwargs:
        if not isinstance(kwargs["sim"], dict):
            raise SchemaMismatch("'sim' must be an object")
        kwargs["sim"] = _sim_from_dict(kwargs["sim"])
    for name in ("sample_sizes", "estimators"):
        if name in kwargs:
            kwargs[name] = tuple(kwargs[name])
    try:
        return StudyConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise SchemaMismatch(f"invalid study config: {exc}") from exc


def load_study_config(path) -> StudyConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaMismatch(f"not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise SchemaMismatch("study config must be a JSON object")
    return study_config_from_dict(raw)
