"""Config-driven experiment sweeps.

An experiment is a JSON document (see ``README.md`` for the schema).  It
names a model, a list of samplers, a step-size grid, a mini-batch grid,
the number of replicates and which metrics to compute.  Every
``(sampler, h, batch, replicate)`` cell is run independently with its
own seed and yields one :class:`ResultRow`.

Seeds are derived from cell *values* rather than grid positions:

    cell seed = SeedSequence([seed, crc32(sampler label), crc32(repr(h)), batch, replicate])

so adding or removing cells never changes the stream of any other cell.
The data set uses ``SeedSequence([seed, 0xDA7A])`` (``data_seed`` in the
model section overrides it) and the control-variate fit of replicate
``m`` uses ``SeedSequence([seed, 0xADA3, m])``.
"""
from __future__ import annotations

import copy
import csv
import json
import math
import os
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import diagnostics as dg
from . import io as sio
from .gradients import AdamConfig, ControlVariate, DivergenceError, fit_control_variate, full_gradient
from .samplers import SAMPLER_KINDS, SamplerConfig, initial_state, run_sampler
from .targets import (
    BNNModel,
    Dataset,
    LinearRegressionModel,
    LogisticRegressionModel,
    SplitSpec,
    laplace_approximation,
    normal_density_at_zero,
    read_dataset,
    split_dataset,
    sticky_kappa,
    synth_bnn_regression,
    synth_linear_regression,
    synth_logistic,
)

__all__ = [
    "ConfigError",
    "ModelSpec",
    "SamplerSpec",
    "MetricSpec",
    "ExperimentConfig",
    "ResultRow",
    "parse_config",
    "serialize_config",
    "cell_seed",
    "prepare_replicate",
    "run_cell",
    "run_experiment",
    "write_outputs",
    "RESULT_COLUMNS",
]


class ConfigError(ValueError):
    """Schema violation; ``path`` names the offending key."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path


# ----------------------------------------------------------------------------
# schema

_MODEL_KEYS = {
    "linear": {"n": 1000, "d": 5, "c": 1.0, "prior_variance": 100.0},
    "logistic": {"n": 1000, "p": 10, "rho": 0.4, "sparse": False, "prior_variance": 10.0},
    "bnn": {"n": 500, "p": 13, "hidden": 50, "noise": 1.0, "prior_variance": 10.0},
    "csv": {"path": None, "likelihood": "linear", "c": 1.0, "hidden": 50, "prior_variance": None,
            "standardize": True},
}
_COMMON_MODEL_KEYS = {"kind": None, "data_seed": None, "train_fraction": None}
_DEFAULT_PRIOR = {"linear": 100.0, "logistic": 10.0, "bnn": 10.0}


@dataclass(frozen=True)
class ModelSpec:
    """Model kind plus its parameters (``params`` holds the kind-specific keys)."""

    kind: str
    params: dict = field(default_factory=dict)
    data_seed: int | None = None
    train_fraction: float | None = None

    @property
    def likelihood(self):
        return self.params["likelihood"] if self.kind == "csv" else self.kind

    def to_dict(self):
        out = {"kind": self.kind, **self.params}
        if self.data_seed is not None:
            out["data_seed"] = self.data_seed
        if self.train_fraction is not None:
            out["train_fraction"] = self.train_fraction
        return out


@dataclass(frozen=True)
class SamplerSpec:
    kind: str
    label: str
    refresh_rate: float = 1.0
    single_event_mode: bool = False
    spike_weight: float = 0.5
    slab_variance: float | None = None

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class MetricSpec:
    std_error: bool = True
    ksd: bool = False
    acf: bool = False
    predictive_loss: bool = False
    n_points: int = 200
    max_lag: int = 50
    ksd_c: float = 1.0
    ksd_beta: float = -0.5

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class CVSpec:
    step_size: float = 1e-3
    iterations: int = 10_000
    batch_fraction: float = 0.01

    def to_dict(self):
        return asdict(self)

    def adam(self):
        return AdamConfig(step_size=self.step_size, iterations=self.iterations, batch_fraction=self.batch_fraction)


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelSpec
    samplers: tuple
    step_sizes: tuple
    batch_sizes: tuple = (1,)
    iterations: int | None = 10_000
    horizon: float | None = None
    replicates: int = 1
    seed: int = 0
    output_dir: str = "results"
    init: str = "cv"
    metrics: MetricSpec = MetricSpec()
    control_variate: CVSpec = CVSpec()
    save_traces: bool = False
    thin: int = 1

    def horizon_for(self, h):
        return self.horizon if self.horizon is not None else self.iterations * h

    def to_dict(self):
        return {
            "model": self.model.to_dict(),
            "samplers": [s.to_dict() for s in self.samplers],
            "step_sizes": list(self.step_sizes),
            "batch_sizes": list(self.batch_sizes),
            "iterations": self.iterations,
            "horizon": self.horizon,
            "replicates": self.replicates,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "init": self.init,
            "metrics": self.metrics.to_dict(),
            "control_variate": self.control_variate.to_dict(),
            "save_traces": self.save_traces,
            "thin": self.thin,
        }


def _is_num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _check_keys(obj, allowed, path):
    if not isinstance(obj, dict):
        raise ConfigError(path, "expected an object")
    for k in obj:
        if k not in allowed:
            raise ConfigError(f"{path}.{k}", "unknown key")


def _num(obj, key, path, default, positive=False, integer=False, nonneg=False):
    v = obj.get(key, default)
    p = f"{path}.{key}"
    if v is None:
        return None
    if integer and not _is_int(v):
        raise ConfigError(p, "expected an integer")
    if not _is_num(v):
        raise ConfigError(p, "expected a number")
    if not math.isfinite(v):
        raise ConfigError(p, "must be finite")
    if positive and not v > 0:
        raise ConfigError(p, "must be positive")
    if nonneg and v < 0:
        raise ConfigError(p, "must be nonnegative")
    return v if integer else float(v)


def _bool(obj, key, path, default):
    v = obj.get(key, default)
    if not isinstance(v, bool):
        raise ConfigError(f"{path}.{key}", "expected true or false")
    return v


def _parse_model(obj, path="model"):
    if not isinstance(obj, dict):
        raise ConfigError(path, "expected an object")
    kind = obj.get("kind")
    if kind not in _MODEL_KEYS:
        raise ConfigError(f"{path}.kind", f"expected one of {sorted(_MODEL_KEYS)}")
    defaults = _MODEL_KEYS[kind]
    _check_keys(obj, set(defaults) | set(_COMMON_MODEL_KEYS), path)
    params = {}
    for key, default in defaults.items():
        v = obj.get(key, default)
        p = f"{path}.{key}"
        if key in ("n", "d", "p", "hidden"):
            params[key] = _num(obj, key, path, default, positive=True, integer=True)
        elif key in ("c", "prior_variance", "noise"):
            params[key] = _num(obj, key, path, default, positive=True)
        elif key == "rho":
            params[key] = _num(obj, key, path, default, nonneg=True)
            if not params[key] < 1:
                raise ConfigError(p, "must lie in [0, 1)")
        elif key in ("sparse", "standardize"):
            params[key] = _bool(obj, key, path, default)
        elif key == "path":
            if not isinstance(v, str) or not v:
                raise ConfigError(p, "expected a file path")
            params[key] = v
        elif key == "likelihood":
            if v not in _DEFAULT_PRIOR:
                raise ConfigError(p, f"expected one of {sorted(_DEFAULT_PRIOR)}")
            params[key] = v
    if kind == "linear" and params["d"] < 2:
        raise ConfigError(f"{path}.d", "must be >= 2 (intercept plus covariates)")
    if kind == "csv" and params["prior_variance"] is None:
        params["prior_variance"] = _DEFAULT_PRIOR[params["likelihood"]]
    data_seed = _num(obj, "data_seed", path, None, integer=True, nonneg=True)
    frac = _num(obj, "train_fraction", path, None)
    if frac is not None and not 0 < frac < 1:
        raise ConfigError(f"{path}.train_fraction", "must lie in (0, 1)")
    return ModelSpec(kind, params, data_seed, frac)


def _parse_sampler(obj, path, model):
    if isinstance(obj, str):
        obj = {"kind": obj}
    names = {f.name for f in fields(SamplerSpec)}
    _check_keys(obj, names, path)
    kind = obj.get("kind")
    if kind not in SAMPLER_KINDS:
        raise ConfigError(f"{path}.kind", f"expected one of {list(SAMPLER_KINDS)}")
    label = obj.get("label", kind)
    if not isinstance(label, str) or not label:
        raise ConfigError(f"{path}.label", "expected a non-empty string")
    w = _num(obj, "spike_weight", path, 0.5)
    if not 0 < w < 1:
        raise ConfigError(f"{path}.spike_weight", "must lie strictly inside (0, 1)")
    return SamplerSpec(
        kind=kind,
        label=label,
        refresh_rate=_num(obj, "refresh_rate", path, 1.0, nonneg=True),
        single_event_mode=_bool(obj, "single_event_mode", path, False),
        spike_weight=w,
        slab_variance=_num(obj, "slab_variance", path, None, positive=True),
    )


def _parse_grid(obj, key, default, integer):
    v = obj.get(key, default)
    if _is_num(v):
        v = [v]
    if not isinstance(v, list) or not v:
        raise ConfigError(key, "expected a non-empty list")
    name = "step_size" if key == "step_sizes" else "batch_size"
    out = []
    for i, x in enumerate(v):
        p = f"{key}[{i}]"
        if integer and not _is_int(x):
            raise ConfigError(p, f"{name} must be an integer")
        if not _is_num(x) or not math.isfinite(x) or not x > 0:
            raise ConfigError(p, f"{name} must be positive")
        out.append(int(x) if integer else float(x))
    if len(set(out)) != len(out):
        raise ConfigError(key, "duplicate entries")
    return tuple(out)


def parse_config(text):
    """Parse and validate a JSON experiment description.

    Args:
        text: JSON document, or an already-decoded ``dict``.

    Returns:
        An :class:`ExperimentConfig` with every default filled in.

    Raises:
        ConfigError: on invalid JSON, unknown keys or bad values; the
            message starts with the offending key path.
    """
    if isinstance(text, dict):
        obj = copy.deepcopy(text)
    else:
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("$", f"invalid JSON ({exc})") from None
    top = {f.name for f in fields(ExperimentConfig)}
    _check_keys(obj, top, "$")
    for key in ("model", "samplers", "step_sizes"):
        if key not in obj:
            raise ConfigError(key, "required key missing")
    model = _parse_model(obj["model"])
    samplers = obj["samplers"]
    if isinstance(samplers, (str, dict)):
        samplers = [samplers]
    if not isinstance(samplers, list) or not samplers:
        raise ConfigError("samplers", "expected a non-empty list")
    samplers = tuple(_parse_sampler(s, f"samplers[{i}]", model) for i, s in enumerate(samplers))
    labels = [s.label for s in samplers]
    if len(set(labels)) != len(labels):
        raise ConfigError("samplers", "sampler labels must be unique (set 'label')")

    iterations = obj.get("iterations", None)
    horizon = obj.get("horizon", None)
    if iterations is not None and horizon is not None:
        raise ConfigError("horizon", "give either 'iterations' or 'horizon', not both")
    if horizon is None:
        iterations = _num(obj, "iterations", "$", 10_000, positive=True, integer=True)
    else:
        horizon = _num(obj, "horizon", "$", None, positive=True)

    m = obj.get("metrics", {})
    _check_keys(m, {f.name for f in fields(MetricSpec)}, "metrics")
    metrics = MetricSpec(
        std_error=_bool(m, "std_error", "metrics", True),
        ksd=_bool(m, "ksd", "metrics", False),
        acf=_bool(m, "acf", "metrics", False),
        predictive_loss=_bool(m, "predictive_loss", "metrics", False),
        n_points=_num(m, "n_points", "metrics", 200, positive=True, integer=True),
        max_lag=_num(m, "max_lag", "metrics", 50, positive=True, integer=True),
        ksd_c=_num(m, "ksd_c", "metrics", 1.0, positive=True),
        ksd_beta=_num(m, "ksd_beta", "metrics", -0.5),
    )
    if not -1 < metrics.ksd_beta < 0:
        raise ConfigError("metrics.ksd_beta", "must lie in (-1, 0)")
    if metrics.acf and metrics.max_lag >= metrics.n_points:
        raise ConfigError("metrics.max_lag", "must be smaller than metrics.n_points")

    c = obj.get("control_variate", {})
    _check_keys(c, {f.name for f in fields(CVSpec)}, "control_variate")
    cv = CVSpec(
        step_size=_num(c, "step_size", "control_variate", 1e-3, positive=True),
        iterations=_num(c, "iterations", "control_variate", 10_000, positive=True, integer=True),
        batch_fraction=_num(c, "batch_fraction", "control_variate", 0.01, positive=True),
    )
    if cv.batch_fraction > 1:
        raise ConfigError("control_variate.batch_fraction", "must lie in (0, 1]")

    init = obj.get("init", "cv")
    if init not in ("cv", "ols"):
        raise ConfigError("init", "expected 'cv' or 'ols'")
    if init == "ols" and model.likelihood != "linear":
        raise ConfigError("init", "'ols' initialisation needs a linear model")
    out = obj.get("output_dir", "results")
    if not isinstance(out, str) or not out:
        raise ConfigError("output_dir", "expected a directory path")
    seed = _num(obj, "seed", "$", 0, integer=True, nonneg=True)
    replicates = _num(obj, "replicates", "$", 1, positive=True, integer=True)
    return ExperimentConfig(
        model=model,
        samplers=samplers,
        step_sizes=_parse_grid(obj, "step_sizes", None, integer=False),
        batch_sizes=_parse_grid(obj, "batch_sizes", [1], integer=True),
        iterations=iterations,
        horizon=horizon,
        replicates=replicates,
        seed=seed,
        output_dir=out,
        init=init,
        metrics=metrics,
        control_variate=cv,
        save_traces=_bool(obj, "save_traces", "$", False),
        thin=_num(obj, "thin", "$", 1, positive=True, integer=True),
    )


def serialize_config(cfg):
    """JSON text of ``cfg``; ``parse_config`` reads it back to an equal config."""
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"


# ----------------------------------------------------------------------------
# seeds and data


def cell_seed(master, label, h, batch, replicate):
    """Seed sequence of one sweep cell, hashed from the cell's values."""
    return np.random.SeedSequence(
        [master, zlib.crc32(label.encode()), zlib.crc32(repr(float(h)).encode()), batch, replicate]
    )


def _data_seed(cfg):
    if cfg.model.data_seed is not None:
        return np.random.SeedSequence(cfg.model.data_seed)
    return np.random.SeedSequence([cfg.seed, 0xDA7A])


def generate_dataset(spec, seed):
    """Synthesise (or read) the full data set; returns ``(dataset, true_params or None)``."""
    p = spec.params
    rng_seed = np.random.default_rng(seed)
    if spec.kind == "linear":
        return synth_linear_regression(p["n"], p["d"], p["c"], seed=rng_seed)
    if spec.kind == "logistic":
        return synth_logistic(p["n"], p["p"], p["rho"], seed=rng_seed, sparse=p["sparse"])
    if spec.kind == "bnn":
        return synth_bnn_regression(p["n"], p["p"], p["hidden"], p["noise"], seed=rng_seed)
    return read_dataset(p["path"]), None


def build_model(spec, dataset):
    p = spec.params
    lik = spec.likelihood
    if lik == "linear":
        return LinearRegressionModel(dataset, c=p["c"], prior_variance=p["prior_variance"])
    if lik == "logistic":
        return LogisticRegressionModel(dataset, prior_variance=p["prior_variance"])
    return BNNModel(dataset, hidden=p["hidden"], prior_variance=p["prior_variance"])


def _train_fraction(spec):
    if spec.train_fraction is not None:
        return spec.train_fraction
    return None if spec.likelihood == "linear" else 0.9


@dataclass
class Replicate:
    """Everything the cells of one replicate share (read-only)."""

    index: int
    train: Dataset
    test: Dataset | None
    model: object
    cv: ControlVariate | None
    x0: np.ndarray | None
    reference_std: np.ndarray | None
    error: str = ""


def _newton_mode(model, x, steps=50):
    for _ in range(steps):
        g = model.full_grad(x)
        step = np.linalg.solve(model.hessian(x), g)
        x = x - step
        if np.max(np.abs(step)) < 1e-12:
            break
    return x


def prepare_replicate(cfg, m, dataset=None):
    """Split the data, fit the control variate and the reference std for replicate ``m``."""
    if dataset is None:
        dataset, _ = generate_dataset(cfg.model, _data_seed(cfg))
    frac = _train_fraction(cfg.model)
    if frac is None:
        train, test = dataset, None
    else:
        split_seed = int(_data_seed(cfg).generate_state(1)[0])
        spec = SplitSpec(frac, seed=split_seed, replicate=m)
        std = cfg.model.kind == "csv" and cfg.model.params["standardize"]
        train, test = split_dataset(dataset, spec, standardize=std, standardize_response=std)
    model = build_model(cfg.model, train)
    try:
        cv = fit_control_variate(
            model, cfg.control_variate.adam(), seed=np.random.SeedSequence([cfg.seed, 0xADA3, m])
        )
    except DivergenceError as exc:
        return Replicate(m, train, test, model, None, None, None, f"control variate: {exc}")
    x0 = np.array(cv.anchor) if cfg.init == "cv" else model.ols()
    ref = None
    if cfg.model.likelihood == "linear":
        ref = model.posterior().std
    elif cfg.model.likelihood == "logistic":
        ref = laplace_approximation(model, _newton_mode(model, np.array(cv.anchor))).std
    return Replicate(m, train, test, model, cv, x0, ref)


# ----------------------------------------------------------------------------
# cells

RESULT_COLUMNS = (
    "sampler",
    "kind",
    "h",
    "batch_size",
    "replicate",
    "std_error",
    "ksd",
    "acf1",
    "predictive_loss",
    "divergence_flag",
    "loss_clamped",
    "gradient_evaluations",
    "n_events",
    "error",
)


@dataclass
class ResultRow:
    """One sweep cell.  ``wall_time`` is kept out of ``results.csv``."""

    sampler: str
    kind: str
    h: float
    batch_size: int
    replicate: int
    metrics: dg.MetricsReport
    n_events: int = 0
    error: str = ""
    order: tuple = field(default=(), repr=False, compare=False)

    @property
    def key(self):
        return (self.sampler, self.h, self.batch_size, self.replicate)

    def flat(self):
        m = self.metrics
        acf1 = math.nan
        if m.acf:
            acf1 = float(np.mean([a[1] for a in m.acf if len(a) > 1]))
        return {
            "sampler": self.sampler,
            "kind": self.kind,
            "h": self.h,
            "batch_size": self.batch_size,
            "replicate": self.replicate,
            "std_error": m.std_error,
            "ksd": math.nan if m.ksd is None else m.ksd,
            "acf1": acf1,
            "predictive_loss": math.nan if m.predictive_loss is None else m.predictive_loss,
            "divergence_flag": m.divergence_flag,
            "loss_clamped": m.loss_clamped,
            "gradient_evaluations": m.gradient_evaluations,
            "n_events": self.n_events,
            "error": self.error,
        }

    def nested(self):
        d = self.metrics.to_dict()
        d.pop("wall_time")
        return {
            "sampler": self.sampler,
            "kind": self.kind,
            "h": self.h,
            "batch_size": self.batch_size,
            "replicate": self.replicate,
            "n_events": self.n_events,
            "error": self.error,
            "metrics": d,
        }


def _kappa(spec, model, params):
    slab = spec.slab_variance if spec.slab_variance is not None else params["prior_variance"]
    return sticky_kappa(np.full(model.dim, spec.spike_weight), normal_density_at_zero(slab))


def sampler_config(cfg, spec, h, batch, replicate, model):
    return SamplerConfig(
        step_size=h,
        horizon=cfg.horizon_for(h),
        refresh_rate=spec.refresh_rate,
        kappa=_kappa(spec, model, cfg.model.params) if spec.kind == "sg-szz" else None,
        batch_size=batch,
        single_event_mode=spec.single_event_mode,
        seed=cell_seed(cfg.seed, spec.label, h, batch, replicate),
        thin=cfg.thin,
    )


def _sample_times(traj, n_points):
    t, T = traj.t_start, traj.t_end
    if not traj.continuous:
        X = traj.positions[1:] if len(traj.positions) > 1 else traj.positions
        step = max(1, len(X) // n_points)
        return dg.SampleMatrix(X[::step][:n_points], step * traj.step_size)
    delta = (T - t) / max(n_points - 1, 1)
    S = dg.discretize_trajectory(traj, delta)
    return dg.SampleMatrix(S.values[:n_points], delta, S.times[:n_points])


def evaluate_trajectory(cfg, rep, traj):
    """Metrics of one trajectory; NaN metrics when the chain diverged."""
    ms = cfg.metrics
    rep_ = dg.MetricsReport(divergence_flag=bool(traj.diverged), gradient_evaluations=int(traj.gradient_evaluations))
    if traj.diverged or not np.all(np.isfinite(traj.positions)):
        rep_.divergence_flag = True
        if ms.ksd:
            rep_.ksd = math.nan
        if ms.predictive_loss:
            rep_.predictive_loss = math.nan
        return rep_
    if ms.std_error and rep.reference_std is not None:
        _, sd = dg.path_moments(traj)
        rep_.std_error = dg.std_error_metric(sd, rep.reference_std)
    if not (ms.ksd or ms.acf or ms.predictive_loss):
        return rep_
    S = _sample_times(traj, ms.n_points)
    if ms.ksd:
        G = np.array([full_gradient(rep.model, x) for x in S.values])
        rep_.ksd = dg.ksd(S, G, ms.ksd_c, ms.ksd_beta)
    if ms.acf:
        out = []
        for col in S.values.T:
            out.append(dg.acf(col, ms.max_lag).tolist() if len(col) > ms.max_lag and col.std() > 0 else [])
        rep_.acf = out
    if ms.predictive_loss and rep.test is not None and rep.test.n > 0:
        lik = cfg.model.likelihood
        kind = "logistic-nll" if lik == "logistic" else "mse"
        predict = rep.model.predict if lik == "bnn" else None
        losses = [dg.per_datum_loss(kind, rep.test, x, predict) for x in S.values]
        rep_.predictive_loss = float(np.mean([l.mean() for l, _ in losses]))
        rep_.loss_clamped = any(f for _, f in losses)
    return rep_


def run_cell(cfg, rep, spec, h, batch):
    """Run and evaluate one ``(sampler, h, batch)`` cell of replicate ``rep``.

    Returns ``(row, trajectory or None)``.  Exceptions are caught and
    recorded in the row instead of propagating.
    """
    row = ResultRow(spec.label, spec.kind, h, batch, rep.index, dg.MetricsReport())
    if rep.error:
        row.error = rep.error
        row.metrics.divergence_flag = True
        return row, None
    start = time.perf_counter()
    traj = None
    try:
        scfg = sampler_config(cfg, spec, h, batch, rep.index, rep.model)
        # initial velocity from a child stream of the cell seed
        init_rng = np.random.default_rng(np.random.SeedSequence(scfg.seed.entropy, spawn_key=(0,)))
        state = initial_state(spec.kind, rep.x0, init_rng)
        traj = run_sampler(spec.kind, rep.model, rep.cv, scfg, state)
        row.n_events = len(traj.event_times)
        row.metrics = evaluate_trajectory(cfg, rep, traj)
    except Exception as exc:  # recorded per cell; the sweep carries on
        row.error = f"{type(exc).__name__}: {exc}"
        row.metrics.divergence_flag = True
    row.metrics.wall_time = time.perf_counter() - start
    return row, traj


def _cells(cfg):
    for m in range(cfg.replicates):
        for si, spec in enumerate(cfg.samplers):
            for hi, h in enumerate(cfg.step_sizes):
                for bi, b in enumerate(cfg.batch_sizes):
                    yield (si, hi, bi, m), spec, h, b


def run_experiment(cfg, threads=1, keep_traces=None, dataset=None):
    """Run every cell of ``cfg``.

    Args:
        cfg: an :class:`ExperimentConfig`.
        threads: worker count.  Results do not depend on it.
        keep_traces: keep trajectories in memory (defaults to
            ``cfg.save_traces``).
        dataset: use this data set instead of generating or reading one.

    Returns:
        ``(rows, traces)``: rows sorted by (sampler, h, batch, replicate)
        in config order, and a dict mapping row keys to trajectories.
    """
    keep = cfg.save_traces if keep_traces is None else keep_traces
    if dataset is None:
        dataset, _ = generate_dataset(cfg.model, _data_seed(cfg))
    reps = [prepare_replicate(cfg, m, dataset) for m in range(cfg.replicates)]
    work = list(_cells(cfg))

    def job(item):
        order, spec, h, b = item
        row, traj = run_cell(cfg, reps[order[3]], spec, h, b)
        row.order = order
        return row, (traj if keep else None)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(job, work))
    else:
        results = [job(w) for w in work]
    results.sort(key=lambda r: r[0].order)
    rows = [r for r, _ in results]
    traces = {r.key: t for r, t in results if t is not None}
    return rows, traces


# ----------------------------------------------------------------------------
# outputs


def _cell_name(key):
    label, h, b, m = key
    safe = "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in label)
    return f"{safe}_h{h!r}_b{b}_r{m}"


def write_outputs(rows, traces, out_dir, config=None):
    """Write ``results.csv``, ``results.json``, ``summary.md`` and ``timing.csv``.

    Trajectories in ``traces`` go to ``traces/<cell>_skeleton.csv`` and
    ``traces/<cell>_events.csv``.  Everything except ``timing.csv`` is a
    pure function of the rows, so reruns are byte-identical.

    Raises:
        OSError: with the failing path in the message.
    """
    paths = {}
    p = out_dir
    try:
        os.makedirs(out_dir, exist_ok=True)
        p = paths["results.csv"] = os.path.join(out_dir, "results.csv")
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(RESULT_COLUMNS)
            for r in rows:
                flat = r.flat()
                w.writerow([sio.fmt(flat[c]) if not isinstance(flat[c], str) else flat[c] for c in RESULT_COLUMNS])
        p = paths["results.json"] = os.path.join(out_dir, "results.json")
        doc = {"rows": [r.nested() for r in rows]}
        if config is not None:
            # output_dir is left out so the file does not depend on where it is written
            doc["config"] = {k: v for k, v in config.to_dict().items() if k != "output_dir"}
        with open(p, "w") as fh:
            fh.write(json.dumps(_json_safe(doc), indent=2, sort_keys=True) + "\n")
        p = paths["summary.md"] = os.path.join(out_dir, "summary.md")
        with open(p, "w") as fh:
            fh.write(summary_table(rows))
        p = paths["timing.csv"] = os.path.join(out_dir, "timing.csv")
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sampler", "h", "batch_size", "replicate", "wall_time"])
            for r in rows:
                w.writerow([r.sampler, sio.fmt(r.h), r.batch_size, r.replicate, f"{r.metrics.wall_time:.6f}"])
        if traces:
            tdir = os.path.join(out_dir, "traces")
            os.makedirs(tdir, exist_ok=True)
            for key, traj in sorted(traces.items(), key=lambda kv: _cell_name(kv[0])):
                p = os.path.join(tdir, _cell_name(key) + "_skeleton.csv")
                sio.write_trajectory(traj, p, os.path.join(tdir, _cell_name(key) + "_events.csv"))
                paths[_cell_name(key)] = p
    except OSError as exc:
        raise OSError(f"cannot write outputs to {p}: {exc}") from exc
    return paths


def _json_safe(obj):
    # JSON has no NaN; write it as the string "NaN" like the CSV does
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else sio.fmt(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def summary_table(rows):
    """Markdown table of replicate-averaged metrics keyed by (sampler, h)."""
    groups = {}
    for r in rows:
        groups.setdefault((r.order[:2] if r.order else (0, 0), r.sampler, r.h), []).append(r)
    lines = [
        "| sampler | h | cells | std_error | ksd | predictive_loss | diverged |",
        "|---|---|---|---|---|---|---|",
    ]

    def mean(vals):
        vals = [v for v in vals if v is not None]
        return sio.fmt(float(np.mean(vals))) if vals else ""

    for (_, label, h), rs in sorted(groups.items(), key=lambda kv: kv[0][0]):
        lines.append(
            "| {} | {} | {} | {} | {} | {} | {} |".format(
                label,
                sio.fmt(h),
                len(rs),
                mean([r.metrics.std_error for r in rs]),
                mean([r.metrics.ksd for r in rs]),
                mean([r.metrics.predictive_loss for r in rs]),
                sum(r.metrics.divergence_flag for r in rs),
            )
        )
    return "\n".join(lines) + "\n"
