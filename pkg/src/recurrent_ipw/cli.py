"""Command line interface.

Subcommands: ``simulate`` writes one trial as CSV, ``fit`` runs one
model/approach on a dataset, ``weights`` exports the estimated weight
series, ``bootstrap`` builds a percentile CI for one estimator, ``study``
runs the full Monte Carlo loop, and ``report`` re-renders a saved report.
"""

from __future__ import annotations

import argparse
import dataclasses
import math
import os
import sys

from .config import load_config, sim_config_from, study_config_from
from .inference import percentile_bootstrap
from .io import (
    read_subjects,
    read_weights,
    write_bootstrap_trace,
    write_subjects,
    write_weights,
)
from .pipelines import APPROACHES, BOOTSTRAP_SPECS, MODELS, bootstrap_estimator, fit_approach
from .simulate import simulate_trial
from .study import parse_report, render_report, run_study
from .weights import compute_weights


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="PATH", help="key = value configuration file")
    parser.add_argument("--seed", type=int, metavar="N")
    parser.add_argument("--scenario", type=int, choices=(1, 2, 3))
    parser.add_argument(
        "--measurement-interval", type=int, choices=(1, 12), dest="measurement_interval"
    )


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="recurrent-ipw",
        description="Hypothetical treatment effects for recurrent events under switching",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate one trial and write CSV datasets")
    _add_common(p)
    p.add_argument("--out", required=True, metavar="DIR")

    p = sub.add_parser("fit", help="fit one model/approach on a dataset directory")
    _add_common(p)
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--model", required=True, choices=MODELS)
    p.add_argument("--approach", required=True, choices=APPROACHES)
    p.add_argument("--weights", metavar="FILE", help="precomputed weight series CSV")
    p.add_argument("--out", metavar="DIR")

    p = sub.add_parser("weights", help="estimate switching weights and write them as CSV")
    _add_common(p)
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--unstabilized", action="store_true")

    p = sub.add_parser("bootstrap", help="percentile bootstrap CI for one estimator")
    _add_common(p)
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--estimator", required=True, choices=BOOTSTRAP_SPECS)
    p.add_argument("--bootstrap", type=int, required=True, metavar="N")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--out", metavar="DIR")

    p = sub.add_parser("study", help="run the Monte Carlo study and write reports")
    _add_common(p)
    p.add_argument("--replicates", type=int, metavar="N")
    p.add_argument("--bootstrap", type=int, metavar="N")
    p.add_argument("--threads", type=int, metavar="N")
    p.add_argument("--out", required=True, metavar="DIR")

    p = sub.add_parser("report", help="render a saved study report")
    p.add_argument("path", metavar="REPORT_CSV")
    p.add_argument("--format", choices=("text", "csv"), default="text")
    p.add_argument("--out", metavar="FILE")
    return parser


def _load_dataset(path: str):
    if os.path.exists(os.path.join(path, "subjects.csv")):
        return read_subjects(path)
    obs_dir = os.path.join(path, "observed")
    if os.path.exists(os.path.join(obs_dir, "subjects.csv")):
        observed = read_subjects(obs_dir)
        hyp_dir = os.path.join(path, "hypothetical")
        if os.path.exists(os.path.join(hyp_dir, "subjects.csv")):
            hyp = {s.id: s for s in read_subjects(hyp_dir)}
            observed = [
                dataclasses.replace(
                    s,
                    cf_event_times=hyp[s.id].event_times,
                    cf_tv_series=hyp[s.id].tv_series,
                )
                if s.id in hyp
                else s
                for s in observed
            ]
        return observed
    raise FileNotFoundError(f"no subjects.csv under {path} or {path}/observed")


def _cmd_simulate(args) -> int:
    config = sim_config_from(
        load_config(args.config),
        seed=args.seed,
        scenario=args.scenario,
        measurement_interval=args.measurement_interval,
    )
    out = simulate_trial(config)
    write_subjects(out.observed, os.path.join(args.out, "observed"))
    write_subjects(out.hypothetical, os.path.join(args.out, "hypothetical"))
    n_switch = sum(1 for s in out.observed if s.switch_time is not None)
    print(
        f"wrote {len(out.observed)} subjects (scenario {config.scenario}, "
        f"{n_switch} switchers) to {args.out}/observed and {args.out}/hypothetical"
    )
    return 0


def _cmd_fit(args) -> int:
    subjects = _load_dataset(args.data)
    weights = read_weights(args.weights) if args.weights else None
    fit = fit_approach(subjects, args.model, args.approach, weights=weights)
    lines = [f"model {args.model}, approach {args.approach}"]
    lines.append(
        f"converged {fit.converged} after {fit.n_iterations} iterations "
        f"(score norm {fit.score_norm_at_solution:.2e})"
    )
    ses = None
    if fit.variance is not None:
        ses = [math.sqrt(float(fit.variance[i, i])) for i in range(len(fit.beta))]
    lines.append(f"{'term':<16}{'estimate':>12}{'se':>12}")
    for i, name in enumerate(fit.beta_names):
        se_text = f"{ses[i]:>12.4f}" if ses is not None else f"{'':>12}"
        lines.append(f"{name:<16}{fit.beta[i]:>12.4f}{se_text}")
    if fit.phi is not None:
        lines.append(f"{'phi':<16}{fit.phi:>12.4f}")
    if fit.loglik is not None:
        lines.append(f"loglik {fit.loglik:.6f}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "fit.txt"), "w", encoding="utf-8") as fh:
            fh.write(text)
    if not fit.converged:
        print("fit did not converge", file=sys.stderr)
        return 1
    return 0


def _cmd_weights(args) -> int:
    subjects = _load_dataset(args.data)
    series = compute_weights(subjects, stabilized=not args.unstabilized)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "weights.csv")
    write_weights([series[s.id] for s in subjects], path)
    print(f"wrote weight series for {len(series)} subjects to {path}")
    return 0


def _cmd_bootstrap(args) -> int:
    subjects = _load_dataset(args.data)
    spec_fn = bootstrap_estimator(args.estimator)
    seed = 0 if args.seed is None else args.seed
    result = percentile_bootstrap(
        subjects,
        lambda subs: spec_fn(subs, {}),
        n_boot=args.bootstrap,
        seed=seed,
        alpha=args.alpha,
    )
    print(
        f"{args.estimator}: estimate {result.point_estimate:.4f}, "
        f"{100 * (1 - args.alpha):.0f}% CI ({result.ci[0]:.4f}, {result.ci[1]:.4f}), "
        f"bootstrap se {result.se_boot:.4f}, failures {result.n_failures}/{result.n_replicates}"
    )
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        write_bootstrap_trace(result, os.path.join(args.out, "bootstrap_trace.csv"))
    return 0


def _cmd_study(args) -> int:
    config = study_config_from(
        load_config(args.config),
        seed=args.seed,
        scenario=args.scenario,
        measurement_interval=args.measurement_interval,
        n_replicates=args.replicates,
        bootstrap_B=args.bootstrap,
        threads=args.threads,
    )
    report = run_study(config)
    os.makedirs(args.out, exist_ok=True)
    csv_text = render_report(report, "csv")
    with open(os.path.join(args.out, "report.csv"), "w", encoding="utf-8") as fh:
        fh.write(csv_text)
    text = render_report(report, "text")
    with open(os.path.join(args.out, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    print(text, end="")
    return 0


def _cmd_report(args) -> int:
    with open(args.path, "r", encoding="utf-8") as fh:
        report = parse_report(fh.read())
    text = render_report(report, args.format)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        print(text, end="")
    return 0


_COMMANDS = {
    "simulate": _cmd_simulate,
    "fit": _cmd_fit,
    "weights": _cmd_weights,
    "bootstrap": _cmd_bootstrap,
    "study": _cmd_study,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except Exception as exc:  # surface a clean message, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
