"""Monte Carlo study orchestration.

Runs simulated trials, fits every requested model/approach pair on each
replicate, nests a percentile bootstrap inside replicates for the IPW
approaches, and aggregates estimates into a report: Est (Monte Carlo mean),
SD, Bias against the empirical truth, RR = exp(Est), coverage, and power.
The empirical truth of a model is the Monte Carlo mean of its hypothetical
fit, so the hypothetical row has zero bias by construction.

Replicate r of a study with seed s draws its trial from the stream
(s, r, 0) and its bootstrap resamples from (s, r, 1, b); results are
therefore identical for any parallelism degree.
"""

from __future__ import annotations

import logging
import math
import multiprocessing
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from threadpoolctl import threadpool_limits

from .data import SUMMARY_MODES, summarize
from .inference import multi_bootstrap, reject_null, wald_ci
from .pipelines import MODEL_APPROACHES, MODELS, APPROACHES, bootstrap_estimator, fit_approach
from .seeding import seed_seq
from .simulate import SimConfig, simulate_trial
from .weights import compute_weights

logger = logging.getLogger(__name__)

_IPW_APPROACHES = ("lwyy_ipw", "nb_ipw", "naive_nb_ipw")
_FIT_ERRORS = (ValueError, ArithmeticError, np.linalg.LinAlgError, RuntimeError)

SUMMARY_FIELDS = (
    "n_subjects",
    "total_events",
    "mean_followup_years",
    "event_rate_per_year",
    "mean_events_per_subject",
    "pct_switchers",
)


@dataclass
class StudyConfig:
    """Design of one Monte Carlo study."""

    sim: SimConfig = field(default_factory=SimConfig)
    n_replicates: int = 200
    models: tuple = MODELS
    approaches: tuple = APPROACHES
    bootstrap_B: int = 0
    alpha: float = 0.05
    threads: int = 1

    def __post_init__(self) -> None:
        self.models = tuple(self.models)
        self.approaches = tuple(self.approaches)
        if self.n_replicates < 1:
            raise ValueError("n_replicates must be at least 1")
        for m in self.models:
            if m not in MODELS:
                raise ValueError(f"unknown model {m!r}")
        for a in self.approaches:
            if a not in APPROACHES:
                raise ValueError(f"unknown approach {a!r}")
        wants_ipw = any(a in _IPW_APPROACHES for a in self.approaches)
        if self.bootstrap_B < 0 or (0 < self.bootstrap_B < 2 and wants_ipw):
            raise ValueError("bootstrap_B must be 0 or at least 2")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must be inside (0, 1)")
        if self.threads < 1:
            raise ValueError("threads must be at least 1")

    def row_keys(self) -> List[Tuple[str, str]]:
        keys = []
        for model in self.models:
            for app in MODEL_APPROACHES[model]:
                if app in self.approaches:
                    keys.append((model, app))
        return keys


@dataclass
class ReportRow:
    """Aggregated metrics for one model/approach cell."""

    model: str
    approach: str
    measurement_interval: int
    est: Optional[float]
    sd: Optional[float]
    bias: Optional[float]
    rr: Optional[float]
    cp: Optional[float]
    power_r: Optional[float]
    power_b: Optional[float]
    n_converged: int
    n_failures: int
    n_ci_failures: int


@dataclass
class SummaryRow:
    """Per-arm data statistics averaged over replicates."""

    mode: str
    arm: int
    n_subjects: float
    total_events: float
    mean_followup_years: float
    event_rate_per_year: float
    mean_events_per_subject: float
    pct_switchers: float


@dataclass
class StudyReport:
    meta: dict
    summary: List[SummaryRow]
    rows: List[ReportRow]

    def row(self, model: str, approach: str) -> ReportRow:
        for r in self.rows:
            if r.model == model and r.approach == approach:
                return r
        raise KeyError((model, approach))

    def summary_row(self, mode: str, arm: int) -> SummaryRow:
        for r in self.summary:
            if r.mode == mode and r.arm == arm:
                return r
        raise KeyError((mode, arm))


def _replicate_worker(task) -> dict:
    config, rep = task
    with threadpool_limits(limits=1):
        out = simulate_trial(config.sim, seed_seq(config.sim.seed, rep, 0))
        record = {
            "rep": rep,
            "est": {},
            "se": {},
            "ok": {},
            "boot_ci": {},
            "summary": {mode: summarize(out.observed, mode) for mode in SUMMARY_MODES},
        }
        keys = config.row_keys()
        weights = None
        if any(app in _IPW_APPROACHES for _, app in keys):
            try:
                weights = compute_weights(out.observed)
            except _FIT_ERRORS as exc:
                logger.warning("replicate %d: weight estimation failed: %s", rep, exc)
        cache: dict = {}
        for model, app in keys:
            est = se = math.nan
            ok = False
            try:
                if app in _IPW_APPROACHES and weights is None:
                    raise RuntimeError("weights unavailable")
                fit = fit_approach(out.observed, model, app, weights=weights, cache=cache)
                if fit.converged:
                    est = fit.arm_estimate
                    ok = True
                    if fit.variance is not None:
                        se = math.sqrt(float(fit.variance[0, 0]))
            except _FIT_ERRORS as exc:
                logger.warning("replicate %d: %s/%s failed: %s", rep, model, app, exc)
            record["est"][(model, app)] = est
            record["se"][(model, app)] = se
            record["ok"][(model, app)] = ok
        boot_specs = sorted({app for _, app in keys if app in _IPW_APPROACHES})
        if config.bootstrap_B > 0 and boot_specs:
            estimators = {spec: bootstrap_estimator(spec) for spec in boot_specs}
            try:
                results = multi_bootstrap(
                    out.observed,
                    estimators,
                    config.bootstrap_B,
                    seed=config.sim.seed,
                    alpha=config.alpha,
                    spawn_prefix=(rep, 1),
                )
                for spec, res in results.items():
                    record["boot_ci"][spec] = res.ci
            except _FIT_ERRORS as exc:
                logger.warning("replicate %d: bootstrap failed: %s", rep, exc)
        return record


def run_study(config: StudyConfig) -> StudyReport:
    """Run all replicates (in parallel when configured) and aggregate."""
    tasks = [(config, r) for r in range(config.n_replicates)]
    if config.threads > 1:
        with multiprocessing.Pool(config.threads) as pool:
            records = pool.map(_replicate_worker, tasks, chunksize=1)
    else:
        records = [_replicate_worker(t) for t in tasks]
    return _aggregate(config, records)


def _percent(flags: List[bool]) -> Optional[float]:
    if not flags:
        return None
    return 100.0 * sum(flags) / len(flags)


def _aggregate(config: StudyConfig, records: List[dict]) -> StudyReport:
    z_alpha = config.alpha
    n_reps = config.n_replicates
    interval = config.sim.measurement_interval

    summary = []
    for mode in SUMMARY_MODES:
        for arm in (0, 1):
            values = {name: [] for name in SUMMARY_FIELDS}
            for rec in records:
                arm_summary = rec["summary"][mode].arm(arm)
                for name in SUMMARY_FIELDS:
                    values[name].append(float(getattr(arm_summary, name)))
            summary.append(
                SummaryRow(
                    mode=mode,
                    arm=arm,
                    **{name: float(np.mean(values[name])) for name in SUMMARY_FIELDS},
                )
            )

    truth = {}
    for model in config.models:
        if "hypothetical" not in config.approaches:
            continue
        ests = [
            rec["est"][(model, "hypothetical")]
            for rec in records
            if rec["ok"][(model, "hypothetical")]
        ]
        if ests:
            truth[model] = float(np.mean(ests))

    rows = []
    for model, app in config.row_keys():
        ests = []
        wald_cis = []
        wald_rejects = []
        for rec in records:
            if not rec["ok"][(model, app)]:
                continue
            est = rec["est"][(model, app)]
            ests.append(est)
            se = rec["se"][(model, app)]
            if math.isfinite(se):
                ci = wald_ci(est, se, z_alpha)
                wald_cis.append(ci)
                wald_rejects.append(reject_null(ci))
        n_conv = len(ests)
        est_mean = float(np.mean(ests)) if ests else None
        sd = float(np.std(ests, ddof=1)) if n_conv >= 2 else None
        model_truth = truth.get(model)
        bias = est_mean - model_truth if est_mean is not None and model_truth is not None else None
        rr = math.exp(est_mean) if est_mean is not None else None

        is_ipw = app in _IPW_APPROACHES
        n_ci_failures = 0
        if is_ipw:
            boot_cis = [rec["boot_ci"][app] for rec in records if app in rec["boot_ci"]]
            if config.bootstrap_B > 0:
                n_ci_failures = n_reps - len(boot_cis)
            cp = (
                _percent([lo <= model_truth <= hi for lo, hi in boot_cis])
                if model_truth is not None
                else None
            )
            power_b = _percent([reject_null(ci) for ci in boot_cis])
            power_r = _percent(wald_rejects)
        else:
            cp = (
                _percent([lo <= model_truth <= hi for lo, hi in wald_cis])
                if model_truth is not None
                else None
            )
            power_r = _percent(wald_rejects)
            power_b = None
        rows.append(
            ReportRow(
                model=model,
                approach=app,
                measurement_interval=interval,
                est=est_mean,
                sd=sd,
                bias=bias,
                rr=rr,
                cp=cp,
                power_r=power_r,
                power_b=power_b,
                n_converged=n_conv,
                n_failures=n_reps - n_conv,
                n_ci_failures=n_ci_failures,
            )
        )

    meta = {
        "scenario": config.sim.scenario,
        "n_subjects": config.sim.n_subjects,
        "n_replicates": config.n_replicates,
        "measurement_interval": interval,
        "bootstrap_B": config.bootstrap_B,
        "alpha": config.alpha,
        "seed": config.sim.seed,
        "ltfu_rate": config.sim.ltfu_rate,
        "trial_years": config.sim.trial_years,
        "enrollment_years": config.sim.enrollment_years,
        "models": "+".join(config.models),
        "approaches": "+".join(config.approaches),
    }
    return StudyReport(meta=meta, summary=summary, rows=rows)


def _cell(value, digits: int = 4) -> str:
    if value is None:
        return ""
    return f"{value:.{digits}f}"


def _csv_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


_SUMMARY_HEADER = ("mode", "arm") + SUMMARY_FIELDS
_ROW_HEADER = (
    "model",
    "approach",
    "measurement_interval",
    "est",
    "sd",
    "bias",
    "rr",
    "cp",
    "power_r",
    "power_b",
    "n_converged",
    "n_failures",
    "n_ci_failures",
)


def render_report(report: StudyReport, format: str = "text") -> str:
    """Serialize a report; csv round-trips through parse_report."""
    if format == "csv":
        return _render_csv(report)
    if format == "text":
        return _render_text(report)
    raise ValueError(f"unknown report format {format!r}")


def _render_csv(report: StudyReport) -> str:
    lines = ["[meta]", "key,value"]
    for k, v in report.meta.items():
        lines.append(f"{k},{_csv_value(v)}")
    lines.append("[summary]")
    lines.append(",".join(_SUMMARY_HEADER))
    for row in report.summary:
        vals = [row.mode, str(row.arm)] + [
            _csv_value(getattr(row, name)) for name in SUMMARY_FIELDS
        ]
        lines.append(",".join(vals))
    lines.append("[estimates]")
    lines.append(",".join(_ROW_HEADER))
    for row in report.rows:
        vals = [
            row.model,
            row.approach,
            str(row.measurement_interval),
            _csv_value(row.est),
            _csv_value(row.sd),
            _csv_value(row.bias),
            _csv_value(row.rr),
            _csv_value(row.cp),
            _csv_value(row.power_r),
            _csv_value(row.power_b),
            str(row.n_converged),
            str(row.n_failures),
            str(row.n_ci_failures),
        ]
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"


def _render_text(report: StudyReport) -> str:
    meta = report.meta
    lines = ["Monte Carlo study report"]
    lines.append(
        "scenario {scenario}, n={n_subjects}, {n_replicates} replicates, "
        "measurement interval {measurement_interval}w, bootstrap B={bootstrap_B}, "
        "alpha={alpha}, seed={seed}".format(**meta)
    )
    lines.append("")
    lines.append("Data summary (replicate means)")
    header = f"{'mode':<18}{'arm':>4}{'n':>8}{'events':>10}{'followup':>10}{'rate/yr':>9}{'ev/subj':>9}{'%switch':>9}"
    lines.append(header)
    for row in report.summary:
        lines.append(
            f"{row.mode:<18}{row.arm:>4}{row.n_subjects:>8.1f}{row.total_events:>10.1f}"
            f"{row.mean_followup_years:>10.3f}{row.event_rate_per_year:>9.3f}"
            f"{row.mean_events_per_subject:>9.3f}{row.pct_switchers:>9.2f}"
        )
    lines.append("")
    lines.append("Estimates (treatment coefficient)")
    lines.append(
        f"{'model':<6}{'approach':<18}{'Est':>9}{'SD':>9}{'Bias':>9}{'RR':>9}{'CP':>7}"
    )
    for row in report.rows:
        lines.append(
            f"{row.model:<6}{row.approach:<18}"
            f"{_cell(row.est):>9}{_cell(row.sd):>9}{_cell(row.bias):>9}"
            f"{_cell(row.rr):>9}{_cell(row.cp, 1):>7}"
        )
    lines.append("")
    lines.append("Power (% rejecting zero)")
    lines.append(f"{'model':<6}{'approach':<18}{'robust':>9}{'boot':>9}")
    for row in report.rows:
        lines.append(
            f"{row.model:<6}{row.approach:<18}"
            f"{_cell(row.power_r, 1):>9}{_cell(row.power_b, 1):>9}"
        )
    failures = [
        row
        for row in report.rows
        if row.n_failures or row.n_ci_failures
    ]
    if failures:
        lines.append("")
        lines.append("Failures")
        for row in failures:
            lines.append(
                f"{row.model}/{row.approach}: {row.n_failures} fit failures, "
                f"{row.n_ci_failures} bootstrap CI failures"
            )
    return "\n".join(lines) + "\n"


def _coerce(text: str):
    if text == "":
        return ""
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def _opt_float(text: str) -> Optional[float]:
    return None if text == "" else float(text)


def parse_report(text: str) -> StudyReport:
    """Rebuild a StudyReport from its csv rendering."""
    meta: dict = {}
    summary: List[SummaryRow] = []
    rows: List[ReportRow] = []
    section = None
    expect_header = False
    for line in text.splitlines():
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1]
            expect_header = True
            continue
        if expect_header:
            expect_header = False
            continue
        parts = line.split(",")
        if section == "meta":
            meta[parts[0]] = _coerce(parts[1])
        elif section == "summary":
            summary.append(
                SummaryRow(
                    mode=parts[0],
                    arm=int(parts[1]),
                    **{
                        name: float(parts[2 + i])
                        for i, name in enumerate(SUMMARY_FIELDS)
                    },
                )
            )
        elif section == "estimates":
            rows.append(
                ReportRow(
                    model=parts[0],
                    approach=parts[1],
                    measurement_interval=int(parts[2]),
                    est=_opt_float(parts[3]),
                    sd=_opt_float(parts[4]),
                    bias=_opt_float(parts[5]),
                    rr=_opt_float(parts[6]),
                    cp=_opt_float(parts[7]),
                    power_r=_opt_float(parts[8]),
                    power_b=_opt_float(parts[9]),
                    n_converged=int(parts[10]),
                    n_failures=int(parts[11]),
                    n_ci_failures=int(parts[12]),
                )
            )
        else:
            raise ValueError("report text does not look like a csv report")
    return StudyReport(meta=meta, summary=summary, rows=rows)
