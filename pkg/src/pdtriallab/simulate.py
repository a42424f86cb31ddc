"""Trial data generation for a 12-month longitudinal design with two
intercurrent events: study-treatment discontinuation and initiation of
symptomatic therapy.

Each subject carries three potential-outcome trajectories built from the
same random effects, residuals, event times, and symptomatic drop:

* ``y_hypothetical`` -- no intercurrent event affects the scores;
* ``y_mixed``        -- only the discontinuation slope change applies;
* ``y_policy``       -- discontinuation and symptomatic-treatment effects
                        both apply.

Observable data are ``y_policy`` values masked by study dropout.

Timing convention: an event sampled "after visit k" takes effect at the
instant of visit k, so visit k's score is unchanged and visit k+1 is the
first to reflect the new fixed slope (and, for symptomatic initiation,
the one-time drop). This convention makes the overall discontinuation
probabilities equal 1 - (1 - q)^(V-1) exactly and admits a closed-form
mixed-estimand truth used as an independent oracle.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .numerics import SIM, TRUTH, RngStream, cholesky, sample_scaled_beta

PLACEBO = 0
ACTIVE = 1
ARM_NAMES = ("placebo", "active")

# stream purpose tag for marginal diagnostics (distinct from TRUTH blocks)
DIAG_MARGINALS = 5

# Score at which the per-visit base initiation probabilities apply; the
# odds shift is measured from here in 10-point steps.
SYMPT_REF_SCORE = 30.0
SYMPT_OR_POINTS = 10.0


@dataclass(frozen=True)
class SimConfig:
    """Complete parameterization of the data-generating process.

    Slopes are in points per year; visit times in months. The per-visit
    symptomatic base probabilities apply at a current score of 30 and
    cover the visits after which initiation can occur (all but the last).
    """

    visit_months: tuple[float, ...] = (0.0, 2.0, 4.0, 6.0, 8.0, 10.0, 12.0)
    baseline_mean: float = 30.0
    placebo_slope: float = 10.0
    active_slope: float = 6.0
    sd_intercept: float = 10.0
    sd_slope: float = 5.0
    corr_int_slope: float = 0.5
    sd_residual: float = 6.0
    disc_prob_per_visit: tuple[float, float] = (0.02, 0.03)  # (placebo, active)
    dropout_prob_after_disc: float = 0.5
    sympt_base_prob_by_visit: tuple[float, ...] = (0.0, 0.025, 0.025, 0.075, 0.075, 0.075)
    sympt_or_per_10pts: float = 1.5
    sympt_drop_law: tuple[float, float, float, float] = (2.0, 1.5, -25.0, 0.0)
    post_sympt_fixed_slope: float = 0.0

    def __post_init__(self):
        v = tuple(float(m) for m in self.visit_months)
        if len(v) < 2 or v[0] != 0.0 or any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("visit_months must be strictly increasing and start at 0")
        object.__setattr__(self, "visit_months", v)
        for name in ("sd_intercept", "sd_slope", "sd_residual"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not abs(self.corr_int_slope) < 1:
            raise ValueError("corr_int_slope must be in (-1, 1)")
        probs = (self.dropout_prob_after_disc, *self.disc_prob_per_visit,
                 *self.sympt_base_prob_by_visit)
        if any(p < 0 or p > 1 for p in probs):
            raise ValueError("probabilities must lie in [0, 1]")
        if len(self.sympt_base_prob_by_visit) != len(v) - 1:
            raise ValueError(
                "sympt_base_prob_by_visit needs one entry per visit with a "
                f"following interval ({len(v) - 1} values)")
        a, b, lo, hi = self.sympt_drop_law
        if a <= 0 or b <= 0 or lo > hi:
            raise ValueError("sympt_drop_law must have positive shapes and lo <= hi")
        if self.sympt_or_per_10pts <= 0:
            raise ValueError("sympt_or_per_10pts must be positive")

    @property
    def n_visits(self) -> int:
        return len(self.visit_months)

    @property
    def times_years(self) -> np.ndarray:
        return np.asarray(self.visit_months, dtype=float) / 12.0


@dataclass(frozen=True)
class SubjectRecord:
    """One subject's simulated state, per-visit values indexed by visit."""

    subject_id: int
    arm: str
    random_intercept: float
    random_slope: float
    y_hypothetical: tuple[float, ...]
    y_mixed: tuple[float, ...]
    y_policy: tuple[float, ...]
    disc_after_visit: int | None
    sympt_after_visit: int | None
    dropped_out: bool
    observed: tuple[float | None, ...]


@dataclass
class TrialDataset:
    """Columnar container for one simulated trial.

    ``disc_after_visit`` / ``sympt_after_visit`` hold all-visit indices
    (baseline = 0) or -1 when the event never occurred. ``observed`` is
    ``y_policy`` with NaN at visits masked by dropout.
    """

    config: SimConfig
    seed_info: tuple
    subject_id: np.ndarray
    arm: np.ndarray
    random_intercept: np.ndarray
    random_slope: np.ndarray
    y_hypothetical: np.ndarray
    y_mixed: np.ndarray
    y_policy: np.ndarray
    disc_after_visit: np.ndarray
    sympt_after_visit: np.ndarray
    dropped_out: np.ndarray
    observed: np.ndarray

    @property
    def n_subjects(self) -> int:
        return self.subject_id.shape[0]

    def subject(self, i: int) -> SubjectRecord:
        obs = tuple(None if not np.isfinite(v) else float(v) for v in self.observed[i])
        return SubjectRecord(
            subject_id=int(self.subject_id[i]),
            arm=ARM_NAMES[int(self.arm[i])],
            random_intercept=float(self.random_intercept[i]),
            random_slope=float(self.random_slope[i]),
            y_hypothetical=tuple(map(float, self.y_hypothetical[i])),
            y_mixed=tuple(map(float, self.y_mixed[i])),
            y_policy=tuple(map(float, self.y_policy[i])),
            disc_after_visit=(int(self.disc_after_visit[i])
                              if self.disc_after_visit[i] >= 0 else None),
            sympt_after_visit=(int(self.sympt_after_visit[i])
                               if self.sympt_after_visit[i] >= 0 else None),
            dropped_out=bool(self.dropped_out[i]),
            observed=obs,
        )

    @property
    def subjects(self) -> list[SubjectRecord]:
        return [self.subject(i) for i in range(self.n_subjects)]


def sympt_init_probability(visit_index: int, current_score: float, cfg: SimConfig) -> float:
    """Probability of initiating symptomatic treatment after this visit.

    logit(p) = logit(base_prob) + ln(OR) * (score - 30) / 10, with p = 0
    whenever the visit's base probability is 0.
    """
    base = cfg.sympt_base_prob_by_visit[visit_index]
    if base == 0.0:
        return 0.0
    logit = math.log(base / (1.0 - base)) + math.log(cfg.sympt_or_per_10pts) * (
        (current_score - SYMPT_REF_SCORE) / SYMPT_OR_POINTS)
    return 1.0 / (1.0 + math.exp(-logit))


def _random_effect_chol(cfg: SimConfig) -> np.ndarray:
    cov = np.array([
        [cfg.sd_intercept ** 2, cfg.corr_int_slope * cfg.sd_intercept * cfg.sd_slope],
        [cfg.corr_int_slope * cfg.sd_intercept * cfg.sd_slope, cfg.sd_slope ** 2],
    ])
    return cholesky(cov)


def _simulate_block(arm: int, n: int, cfg: SimConfig, rng: np.random.Generator) -> dict:
    """Simulate n same-arm subjects from one generator.

    The draw order per visit is fixed (discontinuation uniform, dropout
    uniform, initiation uniform, drop-size gammas) regardless of subject
    state, so results depend only on (cfg, generator state, n).
    """
    t = cfg.times_years
    nv = cfg.n_visits
    assigned = cfg.active_slope if arm == ACTIVE else cfg.placebo_slope
    q_disc = cfg.disc_prob_per_visit[arm]
    d_alpha, d_beta, d_lo, d_hi = cfg.sympt_drop_law
    ln_or = math.log(cfg.sympt_or_per_10pts)

    re = rng.standard_normal((n, 2)) @ _random_effect_chol(cfg).T
    b0, b1 = re[:, 0], re[:, 1]
    resid = rng.standard_normal((n, nv)) * cfg.sd_residual

    is_active = arm == ACTIVE
    disc = np.full(n, -1, dtype=np.int64)
    sympt = np.full(n, -1, dtype=np.int64)
    dropped = np.zeros(n, dtype=bool)
    drop_size = np.zeros(n)
    fixed_m = np.full(n, cfg.baseline_mean)
    fixed_p = np.full(n, cfg.baseline_mean)
    y_h = np.empty((n, nv))
    y_m = np.empty((n, nv))
    y_p = np.empty((n, nv))

    for k in range(nv):
        # the event-free trajectory value, reused verbatim in all three
        # paths so that potential-outcome equalities hold bit-for-bit
        direct = cfg.baseline_mean + assigned * t[k]
        if k > 0:
            dt = t[k] - t[k - 1]
            # discontinuation only alters the trajectory in the active arm
            mixed_changed = is_active & (disc >= 0)
            policy_changed = mixed_changed | (sympt >= 0)
            slope_m = np.where(mixed_changed, cfg.placebo_slope, assigned)
            slope_p = np.where(sympt >= 0, cfg.post_sympt_fixed_slope, slope_m)
            fixed_m = np.where(mixed_changed, fixed_m + slope_m * dt, direct)
            fixed_p = np.where(
                policy_changed,
                fixed_p + slope_p * dt + np.where(sympt == k - 1, drop_size, 0.0),
                direct)
        common = b0 + b1 * t[k] + resid[:, k]
        y_h[:, k] = direct + common
        y_m[:, k] = fixed_m + common
        y_p[:, k] = fixed_p + common

        if k <= nv - 2:
            u_disc = rng.random(n)
            u_drop = rng.random(n)
            u_sympt = rng.random(n)
            drops = sample_scaled_beta(rng, d_alpha, d_beta, d_lo, d_hi, size=n)
            new_disc = (disc < 0) & (u_disc < q_disc)
            disc[new_disc] = k
            dropped[new_disc] = u_drop[new_disc] < cfg.dropout_prob_after_disc
            base = cfg.sympt_base_prob_by_visit[k]
            if base > 0.0:
                logit = math.log(base / (1.0 - base)) + ln_or * (
                    (y_p[:, k] - SYMPT_REF_SCORE) / SYMPT_OR_POINTS)
                p = 1.0 / (1.0 + np.exp(-logit))
            else:
                p = 0.0
            new_sympt = (sympt < 0) & (u_sympt < p)
            sympt[new_sympt] = k
            drop_size[new_sympt] = np.asarray(drops)[new_sympt]

    observed = y_p.copy()
    vidx = np.arange(nv)
    observed[dropped[:, None] & (vidx[None, :] > disc[:, None])] = np.nan
    return dict(b0=b0, b1=b1, y_h=y_h, y_m=y_m, y_p=y_p, disc=disc,
                sympt=sympt, dropped=dropped, observed=observed)


def simulate_subject(
    arm: int, cfg: SimConfig, rng: np.random.Generator, subject_id: int = 0
) -> SubjectRecord:
    """Single-subject draw; thin wrapper over the block kernel."""
    blk = _simulate_block(arm, 1, cfg, rng)
    obs = tuple(None if not np.isfinite(v) else float(v) for v in blk["observed"][0])
    return SubjectRecord(
        subject_id=subject_id,
        arm=ARM_NAMES[arm],
        random_intercept=float(blk["b0"][0]),
        random_slope=float(blk["b1"][0]),
        y_hypothetical=tuple(map(float, blk["y_h"][0])),
        y_mixed=tuple(map(float, blk["y_m"][0])),
        y_policy=tuple(map(float, blk["y_p"][0])),
        disc_after_visit=int(blk["disc"][0]) if blk["disc"][0] >= 0 else None,
        sympt_after_visit=int(blk["sympt"][0]) if blk["sympt"][0] >= 0 else None,
        dropped_out=bool(blk["dropped"][0]),
        observed=obs,
    )


def simulate_trial(n_per_arm: int, cfg: SimConfig, stream: RngStream) -> TrialDataset:
    """Simulate a 1:1 randomized trial with one stream per subject.

    Subject i draws from stream.child(i, SIM), so datasets are bit-for-bit
    reproducible for a given (stream, cfg, n) and individual subjects can
    be re-simulated in isolation. Placebo subjects get ids 0..n-1,
    active subjects n..2n-1.
    """
    if n_per_arm < 1:
        raise ValueError("n_per_arm must be at least 1")
    n = 2 * n_per_arm
    nv = cfg.n_visits
    out = dict(
        subject_id=np.arange(n, dtype=np.int64),
        arm=np.repeat(np.array([PLACEBO, ACTIVE], dtype=np.int8), n_per_arm),
        random_intercept=np.empty(n), random_slope=np.empty(n),
        y_hypothetical=np.empty((n, nv)), y_mixed=np.empty((n, nv)),
        y_policy=np.empty((n, nv)),
        disc_after_visit=np.empty(n, dtype=np.int64),
        sympt_after_visit=np.empty(n, dtype=np.int64),
        dropped_out=np.empty(n, dtype=bool), observed=np.empty((n, nv)),
    )
    for i in range(n):
        arm = int(out["arm"][i])
        blk = _simulate_block(arm, 1, cfg, stream.child(i, SIM).generator())
        out["random_intercept"][i] = blk["b0"][0]
        out["random_slope"][i] = blk["b1"][0]
        out["y_hypothetical"][i] = blk["y_h"][0]
        out["y_mixed"][i] = blk["y_m"][0]
        out["y_policy"][i] = blk["y_p"][0]
        out["disc_after_visit"][i] = blk["disc"][0]
        out["sympt_after_visit"][i] = blk["sympt"][0]
        out["dropped_out"][i] = blk["dropped"][0]
        out["observed"][i] = blk["observed"][0]
    return TrialDataset(config=cfg, seed_info=(stream.root_seed, stream.key), **out)


@dataclass
class TruthResult:
    """Monte-Carlo estimand ground truths on the change-from-baseline scale."""

    hypothetical_effect: float
    mixed_effect: float
    policy_effect: float
    # mean change per post-baseline visit, keyed by estimand then arm
    arm_means: dict
    n_per_arm: int


def compute_truth_mc(
    cfg: SimConfig,
    n_per_arm: int,
    stream: RngStream,
    chunk: int = 200_000,
) -> TruthResult:
    """Estimand truths from a large simulated cohort.

    Effects are mean active change minus mean placebo change at the final
    visit, computed on the complete potential-outcome trajectories; event
    masking plays no role. Simulation runs in chunks with one stream per
    (arm, chunk) so memory stays bounded at any n_per_arm.
    """
    nv = cfg.n_visits
    sums = {(est, arm): np.zeros(nv - 1)
            for est in ("hypothetical", "mixed", "policy") for arm in (PLACEBO, ACTIVE)}
    for arm in (PLACEBO, ACTIVE):
        done = 0
        block_idx = 0
        while done < n_per_arm:
            m = min(chunk, n_per_arm - done)
            rng = stream.child(TRUTH, arm, block_idx).generator()
            blk = _simulate_block(arm, m, cfg, rng)
            for est, y in (("hypothetical", blk["y_h"]), ("mixed", blk["y_m"]),
                           ("policy", blk["y_p"])):
                sums[(est, arm)] += (y[:, 1:] - y[:, [0]]).sum(axis=0)
            done += m
            block_idx += 1
    means = {est: {ARM_NAMES[arm]: sums[(est, arm)] / n_per_arm for arm in (PLACEBO, ACTIVE)}
             for est in ("hypothetical", "mixed", "policy")}

    def effect(est):
        return float(means[est]["active"][-1] - means[est]["placebo"][-1])

    return TruthResult(
        hypothetical_effect=effect("hypothetical"),
        mixed_effect=effect("mixed"),
        policy_effect=effect("policy"),
        arm_means=means,
        n_per_arm=n_per_arm,
    )


@dataclass
class GeneratorMarginals:
    """Cohort-level diagnostics of the generator, one value per arm."""

    disc_total: tuple[float, float]
    sympt_total: tuple[float, float]
    dropout_total: tuple[float, float]
    sd_hypothetical_first: tuple[float, float]
    sd_hypothetical_last: tuple[float, float]
    n_per_arm: int


def generator_marginals(
    cfg: SimConfig, n_per_arm: int, stream: RngStream, chunk: int = 200_000
) -> GeneratorMarginals:
    """Event totals and marginal score spreads from a large cohort."""
    stats = {}
    for arm in (PLACEBO, ACTIVE):
        n_disc = n_sympt = n_drop = 0
        s1 = s2 = sl1 = sl2 = 0.0
        done = 0
        block_idx = 0
        while done < n_per_arm:
            m = min(chunk, n_per_arm - done)
            rng = stream.child(DIAG_MARGINALS, arm, block_idx).generator()
            blk = _simulate_block(arm, m, cfg, rng)
            n_disc += int((blk["disc"] >= 0).sum())
            n_sympt += int((blk["sympt"] >= 0).sum())
            n_drop += int(blk["dropped"].sum())
            s1 += blk["y_h"][:, 0].sum()
            s2 += (blk["y_h"][:, 0] ** 2).sum()
            sl1 += blk["y_h"][:, -1].sum()
            sl2 += (blk["y_h"][:, -1] ** 2).sum()
            done += m
            block_idx += 1
        sd_first = math.sqrt(max(s2 / n_per_arm - (s1 / n_per_arm) ** 2, 0.0))
        sd_last = math.sqrt(max(sl2 / n_per_arm - (sl1 / n_per_arm) ** 2, 0.0))
        stats[arm] = (n_disc / n_per_arm, n_sympt / n_per_arm, n_drop / n_per_arm,
                      sd_first, sd_last)
    return GeneratorMarginals(
        disc_total=(stats[PLACEBO][0], stats[ACTIVE][0]),
        sympt_total=(stats[PLACEBO][1], stats[ACTIVE][1]),
        dropout_total=(stats[PLACEBO][2], stats[ACTIVE][2]),
        sd_hypothetical_first=(stats[PLACEBO][3], stats[ACTIVE][3]),
        sd_hypothetical_last=(stats[PLACEBO][4], stats[ACTIVE][4]),
        n_per_arm=n_per_arm,
    )


def analytic_hypothetical_truth(cfg: SimConfig) -> float:
    """Exact hypothetical-estimand effect: slope difference times horizon."""
    horizon = cfg.times_years[-1]
    return (cfg.active_slope - cfg.placebo_slope) * horizon


def analytic_mixed_truth(cfg: SimConfig) -> float:
    """Closed-form mixed-estimand effect under visit-hazard discontinuation.

    Discontinuation after visit k (probability q per opportunity,
    independent of outcomes) switches the active arm's remaining slope to
    the placebo slope, so the mean active change is

        active_slope * T + (placebo_slope - active_slope)
                         * sum_k q (1-q)^k (T - t_k),

    summed over the opportunity visits. Serves as an independent oracle
    for the Monte-Carlo truth.
    """
    t = cfg.times_years
    horizon = t[-1]
    q = cfg.disc_prob_per_visit[ACTIVE]
    shortfall = sum(
        q * (1.0 - q) ** k * (horizon - t[k]) for k in range(cfg.n_visits - 1)
    )
    active_mean = cfg.active_slope * horizon + (
        cfg.placebo_slope - cfg.active_slope) * shortfall
    return active_mean - cfg.placebo_slope * horizon


def export_long_csv(data: TrialDataset, path) -> None:
    """Write the dataset in long format, one row per subject-visit.

    Missing observations and absent event times are empty fields; floats
    use a decimal point and up to 10 significant digits; UTF-8 output.
    """
    months = data.config.visit_months

    def fmt(v):
        return "" if v is None else f"{v:.10g}"

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([
            "subject_id", "arm", "visit_month", "y_observed", "y_hypothetical",
            "y_mixed", "y_policy", "disc_after_month", "sympt_after_month",
            "dropped_out",
        ])
        for i in range(data.n_subjects):
            disc = data.disc_after_visit[i]
            sympt = data.sympt_after_visit[i]
            disc_m = months[disc] if disc >= 0 else None
            sympt_m = months[sympt] if sympt >= 0 else None
            for j, month in enumerate(months):
                obs = data.observed[i, j]
                w.writerow([
                    int(data.subject_id[i]),
                    ARM_NAMES[int(data.arm[i])],
                    fmt(month),
                    fmt(float(obs)) if np.isfinite(obs) else "",
                    fmt(float(data.y_hypothetical[i, j])),
                    fmt(float(data.y_mixed[i, j])),
                    fmt(float(data.y_policy[i, j])),
                    fmt(disc_m),
                    fmt(sympt_m),
                    "true" if data.dropped_out[i] else "false",
                ])
