"""Command-line entry point: ``python -m sgpdmp <command> --config PATH``.

Commands:
    gen-data  write the synthetic (or ingested) data set to ``data.csv``
    fit-cv    fit the control variate of every replicate
    sample    run every cell and save its trajectory under ``traces/``
    eval      compute metrics from the trajectories saved by ``sample``
    sweep     sample and evaluate in one go

Exit codes: 0 on success, 1 for configuration errors, 2 when every
cell failed at run time.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import harness as hn
from . import io as sio
from .targets import write_dataset

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _load_config(args):
    try:
        with open(args.config, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise hn.ConfigError("--config", f"cannot read {args.config}: {exc.strerror}") from None
    cfg = hn.parse_config(text)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["output_dir"] = args.out
    if cfg.model.kind == "csv" and not os.path.isabs(cfg.model.params["path"]):
        # relative data paths are taken relative to the config file
        base = os.path.dirname(os.path.abspath(args.config))
        params = dict(cfg.model.params, path=os.path.join(base, cfg.model.params["path"]))
        changes["model"] = dataclasses.replace(cfg.model, params=params)
    if args.threads < 1:
        raise hn.ConfigError("--threads", "must be >= 1")
    return dataclasses.replace(cfg, **changes)


def _finish(rows):
    if rows and all(r.error for r in rows):
        print(f"all {len(rows)} cells failed; first error: {rows[0].error}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_gen_data(cfg, args):
    dataset, truth = hn.generate_dataset(cfg.model, hn._data_seed(cfg))
    os.makedirs(cfg.output_dir, exist_ok=True)
    write_dataset(os.path.join(cfg.output_dir, "data.csv"), dataset)
    if truth is not None:
        with open(os.path.join(cfg.output_dir, "true_params.csv"), "w") as fh:
            fh.write("x\n" + "".join(sio.fmt(v) + "\n" for v in truth))
    print(f"wrote {dataset.n} rows to {cfg.output_dir}")
    return EXIT_OK


def cmd_fit_cv(cfg, args):
    dataset, _ = hn.generate_dataset(cfg.model, hn._data_seed(cfg))
    out = []
    for m in range(cfg.replicates):
        rep = hn.prepare_replicate(cfg, m, dataset)
        entry = {"replicate": m, "error": rep.error}
        if rep.cv is not None:
            entry["anchor"] = [float(v) for v in rep.cv.anchor]
            entry["full_grad_at_anchor"] = [float(v) for v in rep.cv.full_grad_at_anchor]
        if rep.reference_std is not None:
            entry["reference_std"] = [float(v) for v in rep.reference_std]
        out.append(entry)
    os.makedirs(cfg.output_dir, exist_ok=True)
    path = os.path.join(cfg.output_dir, "control_variate.json")
    with open(path, "w") as fh:
        fh.write(json.dumps(out, indent=2) + "\n")
    print(f"wrote {path}")
    if all(e["error"] for e in out):
        return EXIT_RUNTIME
    return EXIT_OK


def _meta(row, traj):
    return {
        "sampler": row.sampler,
        "kind": row.kind,
        "h": row.h,
        "batch_size": row.batch_size,
        "replicate": row.replicate,
        "error": row.error,
        "diverged": bool(traj.diverged) if traj is not None else True,
        "gradient_evaluations": int(traj.gradient_evaluations) if traj is not None else 0,
        "n_intervals": int(traj.n_intervals) if traj is not None else 0,
        "file": hn._cell_name(row.key) if traj is not None else None,
    }


def cmd_sample(cfg, args):
    rows, traces = hn.run_experiment(cfg, threads=args.threads, keep_traces=True)
    tdir = os.path.join(cfg.output_dir, "traces")
    os.makedirs(tdir, exist_ok=True)
    metas = []
    for r in rows:
        traj = traces.get(r.key)
        metas.append(_meta(r, traj))
        if traj is not None:
            name = hn._cell_name(r.key)
            sio.write_trajectory(traj, os.path.join(tdir, name + "_skeleton.csv"),
                                 os.path.join(tdir, name + "_events.csv"))
    with open(os.path.join(tdir, "cells.json"), "w") as fh:
        fh.write(json.dumps(metas, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(metas)} cells to {tdir}")
    return _finish(rows)


def cmd_eval(cfg, args):
    tdir = os.path.join(cfg.output_dir, "traces")
    try:
        with open(os.path.join(tdir, "cells.json")) as fh:
            metas = json.load(fh)
    except OSError as exc:
        print(f"cannot read {tdir}/cells.json ({exc.strerror}); run 'sample' first", file=sys.stderr)
        return EXIT_RUNTIME
    dataset, _ = hn.generate_dataset(cfg.model, hn._data_seed(cfg))
    reps = {}
    order = {s.label: i for i, s in enumerate(cfg.samplers)}
    rows = []
    for meta in metas:
        m = meta["replicate"]
        if m not in reps:
            reps[m] = hn.prepare_replicate(cfg, m, dataset)
        row = hn.ResultRow(meta["sampler"], meta["kind"], meta["h"], meta["batch_size"], m,
                           hn.dg.MetricsReport(divergence_flag=True), error=meta["error"])
        if meta["file"] is not None:
            traj = sio.read_trajectory(os.path.join(tdir, meta["file"] + "_skeleton.csv"),
                                       os.path.join(tdir, meta["file"] + "_events.csv"), kind=meta["kind"])
            traj = dataclasses.replace(traj, diverged=meta["diverged"],
                                       gradient_evaluations=meta["gradient_evaluations"],
                                       n_intervals=meta["n_intervals"], step_size=meta["h"])
            row.n_events = len(traj.event_times)
            row.metrics = hn.evaluate_trajectory(cfg, reps[m], traj)
        row.order = (order.get(row.sampler, len(order)), _index(cfg.step_sizes, row.h),
                     _index(cfg.batch_sizes, row.batch_size), m)
        rows.append(row)
    rows.sort(key=lambda r: r.order)
    hn.write_outputs(rows, {}, cfg.output_dir, cfg)
    print(f"wrote results for {len(rows)} cells to {cfg.output_dir}")
    return _finish(rows)


def _index(seq, v):
    return seq.index(v) if v in seq else len(seq)


def cmd_sweep(cfg, args):
    rows, traces = hn.run_experiment(cfg, threads=args.threads)
    hn.write_outputs(rows, traces, cfg.output_dir, cfg)
    print(f"wrote {len(rows)} rows to {os.path.join(cfg.output_dir, 'results.csv')}")
    return _finish(rows)


HELP = {
    "gen-data": "write the data set to data.csv",
    "fit-cv": "fit the control variate of every replicate",
    "sample": "run every cell and save trajectories",
    "eval": "compute metrics from saved trajectories",
    "sweep": "run and evaluate every cell",
}

COMMANDS = {
    "gen-data": cmd_gen_data,
    "fit-cv": cmd_fit_cv,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="sgpdmp", description="Stochastic-gradient PDMP experiment harness.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", required=True, metavar="PATH", help="JSON experiment description")
        p.add_argument("--out", metavar="DIR", help="output directory (overrides output_dir)")
        p.add_argument("--seed", type=int, metavar="U64", help="master seed (overrides seed)")
        p.add_argument("--threads", type=int, default=1, metavar="N", help="worker threads")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("--seed must lie in [0, 2^64)", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = _load_config(args)
    except hn.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with np.errstate(all="ignore"):
            return COMMANDS[args.command](cfg, args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
