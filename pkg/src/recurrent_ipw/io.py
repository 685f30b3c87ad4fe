"""CSV interchange: subject datasets, counting-process rows, weights, traces.

Dataset directories hold three files:
    subjects.csv  id, arm, sex, age, prior_history, enroll_time, tau, switch_time
    events.csv    id, time
    tv.csv        id, week, value
switch_time is empty for non-switchers. Floats use Python's shortest repr so
round trips are lossless.
"""

from __future__ import annotations

import os
from typing import Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from .data import COVARIATE_NAMES, CountingProcessRow, Subject, TVSeries

SUBJECT_COLUMNS = [
    "id",
    "arm",
    "sex",
    "age",
    "prior_history",
    "enroll_time",
    "tau",
    "switch_time",
]


def write_subjects(subjects: Sequence[Subject], directory: str) -> None:
    os.makedirs(directory, exist_ok=True)
    sub_rows = []
    event_rows = []
    tv_rows = []
    for s in subjects:
        sub_rows.append(
            {
                "id": s.id,
                "arm": s.arm,
                "sex": s.sex,
                "age": s.age,
                "prior_history": s.prior_history,
                "enroll_time": s.enroll_time,
                "tau": s.tau,
                "switch_time": "" if s.switch_time is None else repr(s.switch_time),
            }
        )
        for t in s.event_times:
            event_rows.append({"id": s.id, "time": t})
        if s.tv_series is not None:
            for w, v in zip(s.tv_series.weeks, s.tv_series.values):
                tv_rows.append({"id": s.id, "week": int(w), "value": v})
    pd.DataFrame(sub_rows, columns=SUBJECT_COLUMNS).to_csv(
        os.path.join(directory, "subjects.csv"), index=False
    )
    pd.DataFrame(event_rows, columns=["id", "time"]).to_csv(
        os.path.join(directory, "events.csv"), index=False
    )
    pd.DataFrame(tv_rows, columns=["id", "week", "value"]).to_csv(
        os.path.join(directory, "tv.csv"), index=False
    )


def _infer_interval(weeks: np.ndarray) -> int:
    gaps = np.diff(np.sort(weeks))
    gaps = gaps[gaps > 0]
    return int(gaps.min()) if gaps.size else 1


def read_subjects(directory: str) -> list[Subject]:
    sub_path = os.path.join(directory, "subjects.csv")
    if not os.path.exists(sub_path):
        raise ValueError(f"missing subjects.csv in {directory}")
    df = pd.read_csv(sub_path)
    missing = [c for c in SUBJECT_COLUMNS if c not in df.columns]
    if missing:
        raise ValueError(f"subjects.csv lacks columns: {', '.join(missing)}")

    events_by_id: dict = {}
    ev_path = os.path.join(directory, "events.csv")
    if os.path.exists(ev_path):
        ev = pd.read_csv(ev_path)
        if len(ev):
            for sid, grp in ev.groupby("id", sort=False):
                events_by_id[sid] = np.sort(grp["time"].to_numpy(dtype=np.float64))

    tv_by_id: dict = {}
    tv_path = os.path.join(directory, "tv.csv")
    if os.path.exists(tv_path):
        tv = pd.read_csv(tv_path)
        if len(tv):
            for sid, grp in tv.groupby("id", sort=False):
                grp = grp.sort_values("week")
                weeks = grp["week"].to_numpy(dtype=np.int64)
                values = grp["value"].to_numpy(dtype=np.float64)
                tv_by_id[sid] = TVSeries(weeks, values, _infer_interval(weeks))

    subjects = []
    for rec in df.itertuples(index=False):
        switch = rec.switch_time
        if switch is None or (isinstance(switch, float) and np.isnan(switch)) or switch == "":
            switch_time = None
        else:
            switch_time = float(switch)
        sid = rec.id
        subjects.append(
            Subject(
                id=sid,
                arm=int(rec.arm),
                sex=int(rec.sex),
                age=float(rec.age),
                prior_history=int(rec.prior_history),
                enroll_time=float(rec.enroll_time),
                tau=float(rec.tau),
                event_times=events_by_id.get(sid, np.empty(0)),
                switch_time=switch_time,
                tv_series=tv_by_id.get(sid),
            )
        )
    return subjects


def write_rows(rows: Sequence[CountingProcessRow], path: str) -> None:
    recs = []
    for r in rows:
        if len(r.covariates) != len(COVARIATE_NAMES):
            raise ValueError("row export expects the (arm, sex, age, prior_history) covariates")
        rec = {"id": r.id, "start": r.start, "stop": r.stop, "status": r.status}
        rec.update(dict(zip(COVARIATE_NAMES, r.covariates)))
        rec["weight"] = r.weight
        recs.append(rec)
    cols = ["id", "start", "stop", "status", *COVARIATE_NAMES, "weight"]
    pd.DataFrame(recs, columns=cols).to_csv(path, index=False)


def write_weights(series_list: Sequence["object"], path: str) -> None:
    """Weight series to CSV: one row per (id, week) with the cumulative
    stay-uncensored probabilities whose ratio is that week's weight."""
    recs = []
    for ws in series_list:
        for k in range(len(ws.values)):
            recs.append(
                {
                    "id": ws.id,
                    "week": k + 1,
                    "weight": ws.values[k],
                    "cumulative_prob_num": ws.cum_num[k],
                    "cumulative_prob_den": ws.cum_den[k],
                }
            )
    cols = ["id", "week", "weight", "cumulative_prob_num", "cumulative_prob_den"]
    pd.DataFrame(recs, columns=cols).to_csv(path, index=False)


def read_weights(path: str):
    """Rebuild a {subject id: WeightSeries} map from a weights CSV."""
    from .weights import WeightSeries

    df = pd.read_csv(path)
    needed = {"id", "week", "weight", "cumulative_prob_num", "cumulative_prob_den"}
    if not needed.issubset(df.columns):
        raise ValueError(f"weights CSV lacks columns: {', '.join(sorted(needed - set(df.columns)))}")
    out = {}
    for sid, grp in df.groupby("id", sort=False):
        grp = grp.sort_values("week")
        weeks = grp["week"].to_numpy(dtype=np.int64)
        if weeks.size and not np.array_equal(weeks, np.arange(1, weeks.size + 1)):
            raise ValueError(f"subject {sid}: weight weeks must run 1..K without gaps")
        num = grp["cumulative_prob_num"].to_numpy(dtype=np.float64)
        den = grp["cumulative_prob_den"].to_numpy(dtype=np.float64)
        vals = grp["weight"].to_numpy(dtype=np.float64)
        stabilized = bool(np.any(num != 1.0))
        out[sid] = WeightSeries(sid, vals, stabilized, num, den)
    return out


def write_bootstrap_trace(result, path: str) -> None:
    """Per-replicate bootstrap estimates; failed replicates carry an empty
    estimate and converged=0."""
    recs = []
    for k, (est, ok) in enumerate(zip(result.all_estimates, result.replicate_converged)):
        recs.append(
            {
                "replicate": k,
                "estimate": "" if not ok else repr(float(est)),
                "converged": int(ok),
            }
        )
    pd.DataFrame(recs, columns=["replicate", "estimate", "converged"]).to_csv(path, index=False)
