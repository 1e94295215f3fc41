"""File formats: observation panels (CSV), ground truth (JSON), traces (CSV).

All floating-point values are written with ``repr``, which round-trips
exactly, so a write/read cycle reproduces arrays bit for bit and reruns with
the same seed produce byte-identical files.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .estimators import PosteriorTrace
from .simulate import ObservationSeries, SimulationTruth

MATURITY_PREFIX = "tau_"


def _fmt(value: float) -> str:
    return repr(float(value))


def write_series_csv(series: ObservationSeries, path) -> Path:
    """Write an observation panel; maturities are encoded in the header.

    When the series carries simulation truth, a sidecar ``<stem>.truth.json``
    is written next to the panel.
    """
    path = Path(path)
    header = ["time"] + [f"{MATURITY_PREFIX}{_fmt(m)}" for m in series.maturities]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for t, row in zip(series.times, series.values):
            writer.writerow([_fmt(t)] + [_fmt(v) for v in row])
    if series.truth is not None:
        write_truth_json(series.truth, truth_path_for(path))
    return path


def truth_path_for(series_path) -> Path:
    series_path = Path(series_path)
    return series_path.with_name(series_path.stem + ".truth.json")


def read_series_csv(path, obs_var=None) -> ObservationSeries:
    """Read a panel written by :func:`write_series_csv`.

    The observation variance comes from, in order of precedence: the
    ``obs_var`` argument, the truth sidecar if present.  A panel without
    either source raises, because the filters cannot run without it.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path} is empty") from None
        if not header or header[0] != "time":
            raise ValueError(f"{path} does not look like an observation panel")
        maturities = []
        for name in header[1:]:
            if not name.startswith(MATURITY_PREFIX):
                raise ValueError(f"unexpected column {name!r} in {path}")
            maturities.append(float(name[len(MATURITY_PREFIX):]))
        rows = [[float(v) for v in row] for row in reader if row]
    data = np.asarray(rows, dtype=np.float64)
    if data.size == 0:
        raise ValueError(f"{path} has no observation rows")
    truth = None
    sidecar = truth_path_for(path)
    if sidecar.exists():
        truth = read_truth_json(sidecar)
    if obs_var is None:
        if truth is None:
            raise ValueError(
                f"{path} has no truth sidecar; pass obs_var explicitly"
            )
        obs_var = truth.obs_var
    return ObservationSeries(
        times=data[:, 0],
        maturities=np.asarray(maturities),
        values=data[:, 1:],
        obs_var=float(obs_var),
        truth=truth,
    )


def write_truth_json(truth: SimulationTruth, path) -> Path:
    path = Path(path)
    payload = {
        "family": truth.family,
        "segments": [
            {"first_step": int(step), "params": {k: float(v) for k, v in params.items()}}
            for step, params in truth.segments
        ],
        "dt": truth.dt,
        "obs_var": truth.obs_var,
        "seed": truth.seed,
        "x_path": [[float(v) for v in row] for row in np.atleast_2d(truth.x_path)],
    }
    path.write_text(json.dumps(payload, indent=1) + "\n")
    return path


def read_truth_json(path) -> SimulationTruth:
    payload = json.loads(Path(path).read_text())
    segments = tuple(
        (int(seg["first_step"]), {k: float(v) for k, v in seg["params"].items()})
        for seg in payload["segments"]
    )
    return SimulationTruth(
        family=payload["family"],
        segments=segments,
        x_path=np.asarray(payload["x_path"], dtype=np.float64),
        dt=float(payload["dt"]),
        obs_var=float(payload["obs_var"]),
        seed=payload.get("seed"),
    )


def write_trace_csv(trace: PosteriorTrace, path) -> Path:
    """Write a posterior trace, one row per step.

    Wall-clock information is deliberately absent so identical runs produce
    identical files.
    """
    path = Path(path)
    names = trace.param_names
    header = ["step", "phase", "reset", "max_loglik"]
    header += [f"mean_{n}" for n in names]
    header += [f"std_{n}" for n in names]
    header += [f"jitter_{n}" for n in names]
    with_state = trace.state_mean is not None
    if with_state:
        dim = trace.state_mean.shape[1]
        header += [f"state_mean_{i}" for i in range(dim)]
        header += [f"state_var_{i}" for i in range(dim)]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(trace.n_steps):
            row = [
                str(int(trace.steps[i])),
                str(trace.phase[i]),
                "1" if trace.reset[i] else "0",
                _fmt(trace.max_loglik[i]),
            ]
            row += [_fmt(v) for v in trace.theta_mean[i]]
            row += [_fmt(v) for v in trace.theta_std[i]]
            row += [_fmt(v) for v in trace.jitter_std[i]]
            if with_state:
                row += [_fmt(v) for v in trace.state_mean[i]]
                row += [_fmt(v) for v in trace.state_var[i]]
            writer.writerow(row)
    return path


def read_trace_csv(path) -> PosteriorTrace:
    """Load a trace written by :func:`write_trace_csv`.

    Segment bookkeeping (switch and reset steps) is reconstructed from the
    phase and reset columns.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [row for row in reader if row]
    if not rows:
        raise ValueError(f"{path} has no trace rows")
    cols = {name: i for i, name in enumerate(header)}
    names = tuple(n[len("mean_"):] for n in header if n.startswith("mean_"))
    k = len(rows)
    steps = np.array([int(r[cols["step"]]) for r in rows])
    phase = np.array([r[cols["phase"]] for r in rows], dtype="<U9")
    reset = np.array([r[cols["reset"]] == "1" for r in rows])
    max_loglik = np.array([float(r[cols["max_loglik"]]) for r in rows])

    def block(prefix, labels):
        idx = [cols[f"{prefix}{n}"] for n in labels]
        return np.array([[float(r[i]) for i in idx] for r in rows])

    theta_mean = block("mean_", names)
    theta_std = block("std_", names)
    jitter_std = block("jitter_", names)
    state_labels = [n[len("state_mean_"):] for n in header if n.startswith("state_mean_")]
    if state_labels:
        state_mean = block("state_mean_", state_labels)
        state_var = block("state_var_", state_labels)
    else:
        state_mean = state_var = None

    switch_steps = []
    prev_phase = None
    for i in range(k):
        if phase[i] == "recursive" and prev_phase != "recursive":
            switch_steps.append(int(steps[i]))
        prev_phase = None if reset[i] else phase[i]
    reset_steps = [int(s) for s in steps[reset]]
    return PosteriorTrace(
        param_names=names,
        steps=steps,
        phase=phase,
        reset=reset,
        max_loglik=max_loglik,
        theta_mean=theta_mean,
        theta_std=theta_std,
        jitter_std=jitter_std,
        state_mean=state_mean,
        state_var=state_var,
        switch_steps=tuple(switch_steps),
        reset_steps=tuple(reset_steps),
    )


def write_summary_json(summary: dict, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return path
