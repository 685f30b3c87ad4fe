"""Key = value configuration files for the simulator and study runner.

Lines look like ``n_subjects = 2000``; blank lines and ``#`` comments are
ignored. Study keys and simulation keys share one namespace since they do
not overlap.
"""

from __future__ import annotations

from typing import Optional

from .pipelines import APPROACHES, MODELS
from .simulate import SimConfig
from .study import StudyConfig

SIM_KEYS = (
    "n_subjects",
    "trial_years",
    "enrollment_years",
    "ltfu_rate",
    "measurement_interval",
    "scenario",
    "seed",
)
STUDY_KEYS = ("n_replicates", "bootstrap_B", "alpha", "threads", "models", "approaches")

_INT_KEYS = {
    "n_subjects",
    "measurement_interval",
    "scenario",
    "seed",
    "n_replicates",
    "bootstrap_B",
    "threads",
}
_FLOAT_KEYS = {"trial_years", "enrollment_years", "ltfu_rate", "alpha"}


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines into a typed dict."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno} is not 'key = value': {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in _INT_KEYS:
            out[key] = int(value)
        elif key in _FLOAT_KEYS:
            out[key] = float(value)
        elif key in ("models", "approaches"):
            out[key] = tuple(tok.strip() for tok in value.replace("+", ",").split(",") if tok.strip())
        else:
            raise ValueError(f"unknown config key {key!r} on line {lineno}")
    return out


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def sim_config_from(options: dict, **overrides) -> SimConfig:
    """Build a SimConfig from config-file values plus CLI overrides."""
    merged = {k: v for k, v in options.items() if k in SIM_KEYS}
    for key, value in overrides.items():
        if value is not None:
            merged[key] = value
    return SimConfig(**merged)


def study_config_from(options: dict, **overrides) -> StudyConfig:
    """Build a StudyConfig (with nested SimConfig) the same way."""
    sim_overrides = {k: overrides.pop(k, None) for k in SIM_KEYS}
    sim = sim_config_from(options, **sim_overrides)
    merged = {k: v for k, v in options.items() if k in STUDY_KEYS}
    for key, value in overrides.items():
        if value is not None:
            merged[key] = value
    merged.setdefault("models", MODELS)
    merged.setdefault("approaches", APPROACHES)
    return StudyConfig(sim=sim, **merged)
