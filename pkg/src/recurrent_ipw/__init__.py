"""Hypothetical treatment effects for recurrent events under switching.

Estimates the treatment effect that would have been observed had no
subject switched treatment: counting-process data preparation, LWYY and
negative binomial models, inverse probability of switching weights,
percentile bootstrap inference, a weekly trial simulator, and a Monte
Carlo study runner.
"""

from .data import (
    COVARIATE_NAMES,
    ArmSummary,
    CountingProcessRow,
    DatasetSummary,
    PositivityError,
    Subject,
    TVSeries,
    complete_weeks,
    expand_counting_process,
    locf_impute,
    summarize,
    week_of,
)
from .estimators import (
    BaselineEstimate,
    FitResult,
    breslow_baseline,
    fit_lwyy,
    fit_poisson_constant,
    sandwich_variance,
)
from .inference import (
    BootstrapResult,
    multi_bootstrap,
    percentile_bootstrap,
    reject_null,
    wald_ci,
)
from .io import (
    read_subjects,
    read_weights,
    write_bootstrap_trace,
    write_rows,
    write_subjects,
    write_weights,
)
from .nb import (
    NBData,
    conditional_frailty_mean,
    fit_nb_constant,
    fit_nb_semiparam,
    nb_loglik_constant,
    nb_pseudo_loglik,
)
from .pipelines import (
    APPROACHES,
    BOOTSTRAP_SPECS,
    MODELS,
    bootstrap_estimator,
    fit_approach,
    hypothetical_subjects,
)
from .seeding import rng_for, seed_seq
from .simulate import (
    SCENARIOS,
    ScenarioParams,
    SimConfig,
    SimOutput,
    gen_baseline,
    gen_events,
    gen_switching,
    gen_tv_trajectory,
    simulate_trial,
)
from .study import (
    ReportRow,
    StudyConfig,
    StudyReport,
    SummaryRow,
    parse_report,
    render_report,
    run_study,
)
from .weights import (
    LogisticFit,
    PersonPeriodRecord,
    WeightSeries,
    build_person_period,
    compute_weights,
    cumulative_unswitched_prob,
    fit_pooled_logistic,
    stabilized_weights,
)

__version__ = "0.1.0"
