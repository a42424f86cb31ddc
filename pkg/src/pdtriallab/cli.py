"""Command-line interface: truth computation, trial export, replicated
studies, summary merging, and failure diagnostics."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

from .numerics import RngStream
from .simulate import compute_truth_mc, export_long_csv, simulate_trial
from .study import (emit, informative_postdisc_probability, load_study_config,
                    run_study, summarize)


def _add_config(p):
    p.add_argument("--config", required=True,
                   help="study configuration JSON (see README for the schema)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="pdtriallab",
        description="Simulation and estimation laboratory for longitudinal "
                    "trials with intercurrent events.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("truth", help="estimand ground truths by large-trial simulation")
    _add_config(p)
    p.add_argument("--n", type=int, required=True, help="subjects per arm")
    p.add_argument("--seed", type=int, required=True)

    p = sub.add_parser("simulate", help="simulate one trial and export long CSV")
    _add_config(p)
    p.add_argument("--n-per-arm", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("run-study", help="replicated study across sample sizes")
    _add_config(p)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("csv", "json"), default="json")
    p.add_argument("--threads", type=int, default=None,
                   help="override the config's thread budget")

    p = sub.add_parser("summarize", help="merge study summaries")
    p.add_argument("paths", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("csv", "json"), default="json")

    p = sub.add_parser("diagnose-failures",
                       help="probability of informative post-discontinuation data")
    _add_config(p)
    p.add_argument("--n", type=int, required=True,
                   help="per-arm sample size for the all-empty probability")
    p.add_argument("--seed", type=int, default=None,
                   help="override the config's root seed")
    p.add_argument("--subjects", type=int, default=1_000_000,
                   help="Monte-Carlo subjects per arm")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    if args.command == "truth":
        cfg = load_study_config(args.config)
        res = compute_truth_mc(cfg.sim, args.n, RngStream(args.seed))
        out = {
            "n_per_arm": res.n_per_arm,
            "hypothetical_effect": res.hypothetical_effect,
            "mixed_effect": res.mixed_effect,
            "policy_effect": res.policy_effect,
            "arm_means_change_by_visit": {
                est: {arm: list(map(float, v)) for arm, v in arms.items()}
                for est, arms in res.arm_means.items()
            },
        }
        json.dump(out, sys.stdout, indent=2)
        print()
        return 0

    if args.command == "simulate":
        cfg = load_study_config(args.config)
        data = simulate_trial(args.n_per_arm, cfg.sim, RngStream(args.seed))
        export_long_csv(data, args.out)
        print(f"wrote {data.n_subjects} subjects to {args.out}")
        return 0

    if args.command == "run-study":
        cfg = load_study_config(args.config)
        if args.threads is not None:
            cfg = replace(cfg, threads=args.threads)
        summary = run_study(cfg)
        emit(summary, args.format, args.out)
        print(f"wrote {len(summary.rows)} summary rows to {args.out}")
        return 0

    if args.command == "summarize":
        merged = summarize(args.paths)
        emit(merged, args.format, args.out)
        print(f"wrote {len(merged.rows)} merged rows to {args.out}")
        return 0

    if args.command == "diagnose-failures":
        cfg = load_study_config(args.config)
        seed = cfg.root_seed if args.seed is None else args.seed
        diag = informative_postdisc_probability(
            cfg.sim, args.n, RngStream(seed), mc_subjects=args.subjects)
        json.dump({
            "informative_postdisc_probability": {
                "placebo": diag.placebo, "active": diag.active},
            "all_empty_probability": diag.all_empty,
            "n_per_arm": diag.n_per_arm_for_all_empty,
        }, sys.stdout, indent=2)
        print()
        return 0

    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
