"""CSV/JSON serialisation of trajectories, samples and metrics.

Skeleton files have the header ``t,x1,...,xd``.  Event files have
``t,kind,coord,factor,x1,...,xd``; ``coord`` and ``factor`` are 1-based
like the ``x`` columns and empty when they do not apply.  Floats are
written with ``repr`` so a read-back is exact; non-finite values appear
as ``NaN``, ``Inf`` and ``-Inf``.
"""
from __future__ import annotations

import csv
import json
import math

import numpy as np

from .samplers import EVENT_KINDS, SamplerState, Trajectory

__all__ = ["fmt", "write_trajectory", "read_trajectory", "write_samples", "write_acf", "write_metrics"]


def fmt(v):
    """Bit-exact text form of a float; ``NaN``/``Inf`` spelled out."""
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "NaN"
    if math.isinf(v):
        return "Inf" if v > 0 else "-Inf"
    return repr(v)


def _x_header(d):
    return [f"x{i + 1}" for i in range(d)]


def write_trajectory(traj, skeleton_path, events_path=None):
    d = traj.dim
    with open(skeleton_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + _x_header(d))
        for t, x in zip(traj.times, traj.positions):
            w.writerow([fmt(t)] + [fmt(v) for v in x])
    if events_path is None:
        return
    with open(events_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "kind", "coord", "factor"] + _x_header(d))
        for t, k, c, f, x in zip(
            traj.event_times, traj.event_kinds, traj.event_coords, traj.event_factors, traj.event_positions
        ):
            w.writerow(
                [fmt(t), EVENT_KINDS[k], "" if c < 0 else c + 1, "" if f < 0 else f + 1] + [fmt(v) for v in x]
            )


def _float(cell):
    # float() already accepts NaN, Inf and -Inf
    return float(cell)


def read_trajectory(skeleton_path, events_path=None, kind="sg-zz"):
    """Rebuild a :class:`Trajectory` (without velocities) from CSV files."""
    with open(skeleton_path, newline="") as fh:
        rows = list(csv.reader(fh))
    body = np.array([[_float(c) for c in r] for r in rows[1:]], dtype=float)
    d = len(rows[0]) - 1
    body = body.reshape(-1, d + 1)
    ev_t, ev_k, ev_c, ev_f, ev_x = [], [], [], [], []
    if events_path is not None:
        with open(events_path, newline="") as fh:
            erows = list(csv.reader(fh))[1:]
        for r in erows:
            ev_t.append(_float(r[0]))
            ev_k.append(EVENT_KINDS.index(r[1]))
            ev_c.append(int(r[2]) - 1 if r[2] else -1)
            ev_f.append(int(r[3]) - 1 if r[3] else -1)
            ev_x.append([_float(c) for c in r[4:]])
    state = SamplerState(float(body[-1, 0]), body[-1, 1:].copy(), np.zeros(d))
    return Trajectory(
        kind=kind,
        times=body[:, 0].copy(),
        positions=body[:, 1:].copy(),
        event_times=np.asarray(ev_t, dtype=float),
        event_kinds=np.asarray(ev_k, dtype=np.int8),
        event_coords=np.asarray(ev_c, dtype=np.int64),
        event_factors=np.asarray(ev_f, dtype=np.int64),
        event_positions=np.asarray(ev_x, dtype=float).reshape(len(ev_t), d),
        final_state=state,
    )


def write_samples(path, samples):
    vals = samples.values
    times = samples.times if samples.times is not None else np.arange(len(vals)) * samples.interval
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + _x_header(vals.shape[1]))
        for t, x in zip(times, vals):
            w.writerow([fmt(t)] + [fmt(v) for v in x])


def write_acf(path, acfs):
    """``acfs`` maps a column label to its autocorrelation vector."""
    labels = list(acfs)
    n = max((len(a) for a in acfs.values()), default=0)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lag"] + labels)
        for k in range(n):
            w.writerow([k] + [fmt(acfs[c][k]) if k < len(acfs[c]) else "" for c in labels])


def write_metrics(path, report):
    """Flat JSON object of a :class:`~sgpdmp.diagnostics.MetricsReport`."""
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")
