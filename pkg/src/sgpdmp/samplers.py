"""Stochastic-gradient PDMP samplers, the SGLD baseline and an exact Zig-Zag oracle.

Every SG-PDMP sampler advances time in intervals of length ``eps``.  In
each interval a factor ``J`` is drawn, event clocks are simulated with
rates frozen at the current state and the first event inside the
remaining budget is applied; the loop then redraws ``J`` for what is
left of the interval.  ``single_event_mode`` stops after the first
stochastic event instead.

Paths are continuous and piecewise linear.  A :class:`Trajectory` keeps
the interval-boundary skeleton plus the position of every event, which
is enough to rebuild the path exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .gradients import _cv_grad

__all__ = [
    "SAMPLER_KINDS",
    "EVENT_KINDS",
    "Event",
    "SamplerState",
    "SamplerConfig",
    "Trajectory",
    "RandomStream",
    "DegenerateReflectionError",
    "zz_flip",
    "zz_rate",
    "bps_reflect",
    "bps_rate",
    "sgld_step",
    "sgzz_interval",
    "sgbps_interval",
    "sgszz_interval",
    "initial_state",
    "run_sampler",
    "exact_zigzag_gaussian",
]

SAMPLER_KINDS = ("sgld", "sg-zz", "sg-bps", "sg-szz")
EVENT_KINDS = ("flip", "reflect", "refresh", "stick", "unstick")
FLIP, REFLECT, REFRESH, STICK, UNSTICK = range(5)


class DegenerateReflectionError(ValueError):
    pass


class Event(NamedTuple):
    time: float
    kind: str
    coord: int | None
    factor: int | None
    position: np.ndarray | None = None


@dataclass
class SamplerState:
    """Position/velocity pair at time ``t``.

    ``frozen_velocity`` and ``active`` (a boolean mask) are only used by
    the sticky Zig-Zag sampler.
    """

    t: float
    x: np.ndarray
    v: np.ndarray
    frozen_velocity: np.ndarray | None = None
    active: np.ndarray | None = None

    def copy(self):
        cp = lambda a: None if a is None else np.array(a, copy=True)
        return SamplerState(float(self.t), cp(self.x), cp(self.v), cp(self.frozen_velocity), cp(self.active))

    def validate(self, kind):
        x, v = np.asarray(self.x), np.asarray(self.v)
        if x.ndim != 1 or v.shape != x.shape:
            raise ValueError("x and v must be 1-d arrays of equal length")
        if self.t < 0:
            raise ValueError("time must be nonnegative")
        if kind == "sg-zz" and not np.all(np.abs(v) == 1):
            raise ValueError("Zig-Zag velocities must lie in {-1, +1}")
        if kind == "sg-szz":
            if self.active is None or self.frozen_velocity is None:
                raise ValueError("sticky state needs active and frozen_velocity")
            act = np.asarray(self.active, dtype=bool)
            if not np.all(np.abs(np.asarray(self.frozen_velocity)) == 1):
                raise ValueError("frozen velocities must lie in {-1, +1}")
            if not (np.all(np.abs(v[act]) == 1) and np.all(v[~act] == 0)):
                raise ValueError("sticky velocities must be +-1 on active and 0 on frozen coordinates")
            if not np.all(x[~act] == 0):
                raise ValueError("frozen coordinates must sit exactly at zero")


@dataclass(frozen=True)
class SamplerConfig:
    """Run settings shared by all samplers.

    ``thin`` keeps every ``thin``-th interval boundary in the skeleton
    (events are always kept when ``record_events`` is on, so the path
    stays exact).  ``kappa`` is required by the sticky sampler only.
    """

    step_size: float
    horizon: float
    refresh_rate: float = 1.0
    kappa: np.ndarray | None = None
    batch_size: int = 1
    single_event_mode: bool = False
    seed: int | np.random.SeedSequence | None = None
    thin: int = 1
    record_events: bool = True
    abort_on_divergence: bool = True

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if self.refresh_rate < 0:
            raise ValueError("refresh_rate must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.kappa is not None:
            k = np.atleast_1d(np.asarray(self.kappa, dtype=float))
            if not np.all(k > 0):
                raise ValueError("sticky rates kappa must be positive")
            object.__setattr__(self, "kappa", k)

    @property
    def n_intervals(self):
        return max(1, int(math.ceil(self.horizon / self.step_size - 1e-9)))


class RandomStream:
    """Block-buffered draws from a ``numpy.random.Generator``.

    Scalar draws from numpy carry microseconds of overhead; the samplers
    consume thousands of tiny draws per second, so they take slices of
    pre-drawn blocks instead.  Deterministic given the generator state.
    """

    def __init__(self, rng=None, block=4096):
        self.rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self.block = block
        self._exp = np.empty(0)
        self._ie = 0
        self._nrm = np.empty(0)
        self._in = 0
        self._int = np.empty(0, dtype=np.intp)
        self._ii = 0
        self._high = None

    def exponential(self, k):
        if self._ie + k > len(self._exp):
            self._exp = self.rng.standard_exponential(max(self.block, k))
            self._ie = 0
        out = self._exp[self._ie : self._ie + k]
        self._ie += k
        return out

    def normal(self, k):
        if self._in + k > len(self._nrm):
            self._nrm = self.rng.standard_normal(max(self.block, k))
            self._in = 0
        out = self._nrm[self._in : self._in + k]
        self._in += k
        return out

    def integers(self, high, k):
        if high != self._high or self._ii + k > len(self._int):
            self._int = self.rng.integers(high, size=max(self.block, k))
            self._high = high
            self._ii = 0
        out = self._int[self._ii : self._ii + k]
        self._ii += k
        return out


def _stream(rng):
    return rng if isinstance(rng, RandomStream) else RandomStream(rng, block=256)


# ----------------------------------------------------------------------------
# event kernels


def zz_flip(v, i):
    """Flip the sign of velocity component ``i``."""
    v = np.array(v, dtype=float, copy=True)
    if not 0 <= i < len(v):
        raise IndexError(f"coordinate {i} out of range for dimension {len(v)}")
    v[i] = -v[i]
    return v


def zz_rate(i, g, v):
    """Zig-Zag flip rate ``max(v_i g_i, 0)`` for coordinate ``i``."""
    return max(float(v[i]) * float(g[i]), 0.0)


def bps_reflect(v, g):
    """Reflect ``v`` in the hyperplane orthogonal to ``g``."""
    v = np.asarray(v, dtype=float)
    g = np.asarray(g, dtype=float)
    gg = g @ g
    if gg == 0:
        raise DegenerateReflectionError("cannot reflect against a zero gradient")
    return v - (2.0 * (v @ g) / gg) * g


def bps_rate(g, v):
    return max(float(np.dot(v, g)), 0.0)


def sgld_step(x, grad_est, h, rng):
    """``x - (h / 2) grad_est + sqrt(h) xi`` with ``xi`` standard normal."""
    if not h > 0:
        raise ValueError("step size must be positive")
    xi = _stream(rng).normal(len(x))
    return x - 0.5 * h * grad_est + math.sqrt(h) * xi


# ----------------------------------------------------------------------------
# event log


class _EventLog:
    def __init__(self, record=True):
        self.record = record
        self.times, self.kinds, self.coords, self.factors, self.positions = [], [], [], [], []

    def add(self, t, kind, coord, factor, x):
        if self.record:
            self.times.append(t)
            self.kinds.append(kind)
            self.coords.append(coord)
            self.factors.append(factor)
            self.positions.append(x.copy())

    def as_events(self):
        return [
            Event(t, EVENT_KINDS[k], None if c < 0 else c, None if f < 0 else f, p)
            for t, k, c, f, p in zip(self.times, self.kinds, self.coords, self.factors, self.positions)
        ]


def _factor_label(J):
    return int(J[0]) if len(J) == 1 else -1


# ----------------------------------------------------------------------------
# interval dynamics (in place)


def _zz_interval(x, v, t0, eps, model, cv, n, draws, single, log):
    remaining = eps
    used = 0
    N, d = model.n_factors, len(x)
    while True:
        J = draws.integers(N, n)
        g = _cv_grad(model, cv, J, x)
        used += 1
        tau = draws.exponential(d) / np.maximum(v * g, 0.0)
        i = int(tau.argmin())
        ti = tau[i]
        if ti < remaining:
            x += v * ti
            remaining -= ti
            v[i] = -v[i]
            log.add(t0 + eps - remaining, FLIP, i, _factor_label(J), x)
            if single:
                x += v * remaining
                return used
        else:
            x += v * remaining
            return used


def _bps_interval(x, v, t0, eps, model, cv, n, refresh_rate, draws, single, log, speeds=None):
    remaining = eps
    used = 0
    N, d = model.n_factors, len(x)
    while True:
        J = draws.integers(N, n)
        g = _cv_grad(model, cv, J, x)
        used += 1
        e = draws.exponential(2)
        rate = max(float(v @ g), 0.0)
        t_reflect = e[0] / rate if rate > 0 else math.inf
        t_refresh = e[1] / refresh_rate if refresh_rate > 0 else math.inf
        ti = min(t_reflect, t_refresh)
        if ti < remaining:
            x += v * ti
            remaining -= ti
            if t_reflect <= t_refresh:
                v[:] = bps_reflect(v, g)
                log.add(t0 + eps - remaining, REFLECT, -1, _factor_label(J), x)
            else:
                v[:] = draws.normal(d)
                log.add(t0 + eps - remaining, REFRESH, -1, -1, x)
            if speeds is not None:
                speeds.append(math.sqrt(v @ v))
            if single:
                x += v * remaining
                return used
        else:
            x += v * remaining
            return used


def _szz_interval(x, v, vc, active, t0, eps, model, cv, n, kappa, draws, single, log):
    remaining = eps
    used = 0
    N, d = model.n_factors, len(x)
    stochastic_done = False
    while True:
        any_active = active.any()
        if any_active and not stochastic_done:
            J = draws.integers(N, n)
            g = _cv_grad(model, cv, J, x)
            used += 1
            tau = draws.exponential(d) / np.maximum(v * g, 0.0)
            i_flip = int(tau.argmin())
            t_flip = tau[i_flip]
        else:
            J, t_flip, i_flip = None, math.inf, -1
        if any_active:
            xv = x * v
            hit = np.where(xv < 0, -x / np.where(v == 0, 1.0, v), math.inf)
            i_hit = int(hit.argmin())
            t_hit = hit[i_hit]
        else:
            t_hit, i_hit = math.inf, -1
        if not stochastic_done and not active.all():
            unst = np.where(active, math.inf, draws.exponential(d) / kappa)
            i_un = int(unst.argmin())
            t_un = unst[i_un]
        else:
            t_un, i_un = math.inf, -1

        if t_flip < min(remaining, t_hit, t_un):
            x += v * t_flip
            remaining -= t_flip
            v[i_flip] = -v[i_flip]
            vc[i_flip] = v[i_flip]
            log.add(t0 + eps - remaining, FLIP, i_flip, _factor_label(J), x)
            stochastic_done = single
        elif t_hit < min(remaining, t_un):
            x += v * t_hit
            x[i_hit] = 0.0
            remaining -= t_hit
            vc[i_hit] = v[i_hit]
            v[i_hit] = 0.0
            active[i_hit] = False
            log.add(t0 + eps - remaining, STICK, i_hit, -1, x)
        elif t_un < remaining:
            x += v * t_un
            remaining -= t_un
            v[i_un] = vc[i_un]
            active[i_un] = True
            log.add(t0 + eps - remaining, UNSTICK, i_un, -1, x)
            stochastic_done = single
        else:
            x += v * remaining
            return used


# ----------------------------------------------------------------------------
# public single-interval API


def _check_model_cv(model, cv, state):
    if len(state.x) != model.dim:
        raise ValueError(f"state has dimension {len(state.x)}, model has {model.dim}")


def sgzz_interval(state, model, cv, cfg, rng):
    """Advance an SG-ZZ state by one interval of length ``cfg.step_size``.

    Returns ``(new_state, events)``; ``state`` is left untouched.
    """
    _check_model_cv(model, cv, state)
    s = state.copy()
    log = _EventLog()
    with np.errstate(divide="ignore"):  # rate 0 gives an infinite clock
        _zz_interval(s.x, s.v, s.t, cfg.step_size, model, cv, cfg.batch_size, _stream(rng), cfg.single_event_mode, log)
    s.t = state.t + cfg.step_size
    return s, log.as_events()


def sgbps_interval(state, model, cv, cfg, rng):
    """Advance an SG-BPS state by one interval (reflections and refreshes)."""
    _check_model_cv(model, cv, state)
    s = state.copy()
    log = _EventLog()
    _bps_interval(
        s.x, s.v, s.t, cfg.step_size, model, cv, cfg.batch_size, cfg.refresh_rate,
        _stream(rng), cfg.single_event_mode, log,
    )
    s.t = state.t + cfg.step_size
    return s, log.as_events()


def sgszz_interval(state, model, cv, cfg, rng):
    """Advance a sticky Zig-Zag state by one interval.

    Flips, exact zero crossings (which freeze the coordinate at 0.0) and
    unsticking at rate ``kappa_i`` compete; the earliest one wins.  In
    single-event mode only the first flip or unstick of the interval is
    applied, zero crossings are always honoured.
    """
    _check_model_cv(model, cv, state)
    if cfg.kappa is None:
        raise ValueError("sticky sampler needs cfg.kappa")
    kappa = np.broadcast_to(cfg.kappa, (model.dim,))
    s = state.copy()
    log = _EventLog()
    with np.errstate(divide="ignore"):
        _szz_interval(
            s.x, s.v, s.frozen_velocity, s.active, s.t, cfg.step_size, model, cv,
            cfg.batch_size, kappa, _stream(rng), cfg.single_event_mode, log,
        )
    s.t = state.t + cfg.step_size
    return s, log.as_events()


# ----------------------------------------------------------------------------
# trajectories


@dataclass
class Trajectory:
    """Skeleton points, event log and end state of one run.

    Between consecutive knots (skeleton points and events merged in time
    order) the path of a PDMP sampler is exactly linear.  SGLD runs are
    discrete chains; their skeleton holds every saved iterate and
    ``continuous`` is False.
    """

    kind: str
    times: np.ndarray
    positions: np.ndarray
    event_times: np.ndarray
    event_kinds: np.ndarray
    event_coords: np.ndarray
    event_factors: np.ndarray
    event_positions: np.ndarray
    final_state: SamplerState
    diverged: bool = False
    gradient_evaluations: int = 0
    n_intervals: int = 0
    step_size: float = math.nan
    # SG-BPS only: largest speed held during each interval
    interval_speeds: np.ndarray | None = field(default=None, repr=False)

    @property
    def dim(self):
        return self.positions.shape[1]

    @property
    def continuous(self):
        return self.kind != "sgld"

    @property
    def t_start(self):
        return float(self.times[0])

    @property
    def t_end(self):
        return float(self.times[-1])

    @property
    def duration(self):
        return self.t_end - self.t_start

    @property
    def events(self):
        return [
            Event(float(t), EVENT_KINDS[k], None if c < 0 else int(c), None if f < 0 else int(f), p)
            for t, k, c, f, p in zip(
                self.event_times, self.event_kinds, self.event_coords, self.event_factors, self.event_positions
            )
        ]

    def knots(self):
        """Merged ``(times, positions)`` of skeleton points and events."""
        if len(self.event_times) == 0:
            return self.times, self.positions
        t = np.concatenate([self.times, self.event_times])
        X = np.concatenate([self.positions, self.event_positions])
        order = np.argsort(t, kind="stable")
        return t[order], X[order]


def _build_trajectory(kind, times, positions, log, state, diverged, evals, n_int, eps, speeds=None):
    d = len(state.x)
    m = len(log.times)
    return Trajectory(
        kind=kind,
        times=np.asarray(times, dtype=float),
        positions=np.asarray(positions, dtype=float).reshape(-1, d),
        event_times=np.asarray(log.times, dtype=float),
        event_kinds=np.asarray(log.kinds, dtype=np.int8),
        event_coords=np.asarray(log.coords, dtype=np.int64),
        event_factors=np.asarray(log.factors, dtype=np.int64),
        event_positions=np.asarray(log.positions, dtype=float).reshape(m, d),
        final_state=state,
        diverged=diverged,
        gradient_evaluations=evals,
        n_intervals=n_int,
        step_size=eps,
        interval_speeds=None if speeds is None else np.asarray(speeds),
    )


def initial_state(kind, x0, rng=None):
    """Starting state at ``x0`` with a velocity drawn for ``kind``.

    Zig-Zag variants draw independent random signs; BPS draws a standard
    normal velocity; SGLD carries a zero velocity.
    """
    x0 = np.array(x0, dtype=float, copy=True)
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    d = len(x0)
    if kind in ("sg-zz", "sg-szz"):
        v = rng.choice([-1.0, 1.0], size=d)
        if kind == "sg-szz":
            return SamplerState(0.0, x0, v, v.copy(), np.ones(d, dtype=bool))
        return SamplerState(0.0, x0, v)
    if kind == "sg-bps":
        return SamplerState(0.0, x0, rng.standard_normal(d))
    if kind == "sgld":
        return SamplerState(0.0, x0, np.zeros(d))
    raise ValueError(f"unknown sampler kind {kind!r}")


def run_sampler(kind, model, cv, cfg, init_state):
    """Run ``kind`` from ``init_state`` until the horizon ``cfg.horizon`` is reached.

    Args:
        kind: one of ``"sgld"``, ``"sg-zz"``, ``"sg-bps"``, ``"sg-szz"``.
        model: the :class:`~sgpdmp.gradients.FactorModel` to sample.
        cv: control variate used by every gradient estimate.
        cfg: a :class:`SamplerConfig`; ``cfg.seed`` fixes the random stream.
        init_state: starting :class:`SamplerState` (see :func:`initial_state`).

    Returns:
        A :class:`Trajectory`.  Diverging SGLD runs are truncated at the
        first non-finite iterate and flagged with ``diverged=True``.
    """
    if kind not in SAMPLER_KINDS:
        raise ValueError(f"unknown sampler kind {kind!r}")
    init_state.validate(kind)
    _check_model_cv(model, cv, init_state)
    draws = RandomStream(np.random.default_rng(cfg.seed))
    s = init_state.copy()
    x, v = s.x, s.v
    eps, n = cfg.step_size, cfg.batch_size
    n_int = cfg.n_intervals
    t_start = s.t
    times, positions = [t_start], [x.copy()]
    log = _EventLog(cfg.record_events)
    draws_used = 0
    diverged = False
    speeds = None
    if kind == "sg-szz":
        if cfg.kappa is None:
            raise ValueError("sticky sampler needs cfg.kappa")
        kappa = np.array(np.broadcast_to(cfg.kappa, (model.dim,)))
    if kind == "sg-bps":
        speeds = []

    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        for k in range(1, n_int + 1):
            t0 = t_start + (k - 1) * eps
            if kind == "sg-zz":
                draws_used += _zz_interval(x, v, t0, eps, model, cv, n, draws, cfg.single_event_mode, log)
            elif kind == "sg-bps":
                held = [math.sqrt(v @ v)]
                draws_used += _bps_interval(
                    x, v, t0, eps, model, cv, n, cfg.refresh_rate, draws, cfg.single_event_mode, log, held
                )
                speeds.append(max(held))
            elif kind == "sg-szz":
                draws_used += _szz_interval(
                    x, v, s.frozen_velocity, s.active, t0, eps, model, cv, n, kappa, draws,
                    cfg.single_event_mode, log,
                )
            else:
                J = draws.integers(model.n_factors, n)
                g = _cv_grad(model, cv, J, x)
                draws_used += 1
                x[:] = x - 0.5 * eps * g + math.sqrt(eps) * draws.normal(len(x))
                if not np.all(np.isfinite(x)):
                    diverged = True
            t = t_start + k * eps
            if diverged:
                s.t = t
                if cfg.abort_on_divergence:
                    n_int = k
                    break
            if k % cfg.thin == 0 or k == n_int:
                times.append(t)
                positions.append(x.copy())
    s.t = times[-1]
    return _build_trajectory(kind, times, positions, log, s, diverged, draws_used * n, n_int, eps, speeds)


# ----------------------------------------------------------------------------
# exact Zig-Zag for Gaussian targets


def _first_event_times(a, b, E):
    """Solve ``int_0^tau max(a + b s, 0) ds = E`` elementwise, ``inf`` if no root."""
    tau = np.full(a.shape, math.inf)
    pos = a > 0
    disc = a * a + 2.0 * b * E
    ok = pos & (disc >= 0)
    # 2E / (a + sqrt(.)) avoids cancellation when a dominates
    tau[ok] = 2.0 * E[ok] / (a[ok] + np.sqrt(disc[ok]))
    rising = (~pos) & (b > 0)
    tau[rising] = (-a[rising] + np.sqrt(2.0 * b[rising] * E[rising])) / b[rising]
    return tau


def exact_zigzag_gaussian(posterior, cfg, x0=None, v0=None):
    """Exact (non-subsampled) Zig-Zag process for ``N(mean, precision^-1)``.

    Along a segment the rate of coordinate ``i`` is
    ``max(v_i [P (x + v s - mu)]_i, 0)``, linear in ``s`` before the max,
    so first-event times follow from inverting the integrated hazard in
    closed form.  Only ``cfg.horizon`` and ``cfg.seed`` are used.
    """
    P = np.asarray(posterior.precision, dtype=float)
    mu = np.asarray(posterior.mean, dtype=float)
    try:
        np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        raise ValueError("precision matrix is not positive definite") from None
    d = len(mu)
    draws = RandomStream(np.random.default_rng(cfg.seed))
    x = mu.copy() if x0 is None else np.array(x0, dtype=float, copy=True)
    if v0 is None:
        v = np.where(draws.rng.random(d) < 0.5, -1.0, 1.0)
    else:
        v = np.array(v0, dtype=float, copy=True)
    grad = P @ (x - mu)
    Pv = P @ v
    t, T = 0.0, cfg.horizon
    log = _EventLog(cfg.record_events)
    n_events = 0
    while True:
        tau = _first_event_times(v * grad, v * Pv, draws.exponential(d))
        i = int(tau.argmin())
        ti = tau[i]
        if t + ti >= T:
            x += v * (T - t)
            break
        x += v * ti
        t += ti
        v[i] = -v[i]
        n_events += 1
        if n_events % 1024 == 0:
            grad = P @ (x - mu)
        else:
            grad += ti * Pv
        Pv += 2.0 * v[i] * P[:, i]
        log.add(t, FLIP, i, -1, x)
    state = SamplerState(T, x, v)
    start = mu if x0 is None else np.asarray(x0, dtype=float)
    return _build_trajectory("exact-zz", [0.0, T], [start, x.copy()], log, state, False, 0, 0, math.nan)
