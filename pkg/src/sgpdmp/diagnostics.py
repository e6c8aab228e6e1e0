"""Trajectory summaries and sample-quality metrics.

Moments of a PDMP path are computed by integrating each linear segment
in closed form, not from a discretisation.  ``ksd`` is the
inverse-multiquadric kernel Stein discrepancy, summed over coordinates.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import expit

__all__ = [
    "SampleMatrix",
    "MetricsReport",
    "ClampWarning",
    "discretize_trajectory",
    "path_moments",
    "time_at_zero",
    "std_error_metric",
    "stein_kernel_terms",
    "ksd",
    "acf",
    "per_datum_loss",
    "predictive_loss",
    "loss_trace",
]


class ClampWarning(RuntimeWarning):
    """Predicted probabilities hit 0 or 1 and were clamped."""


@dataclass(frozen=True)
class SampleMatrix:
    values: np.ndarray
    interval: float
    times: np.ndarray | None = None

    def __post_init__(self):
        vals = np.atleast_2d(np.asarray(self.values, dtype=float))
        if vals.shape[0] < 1:
            raise ValueError("need at least one sample")
        if not np.all(np.isfinite(vals)):
            raise ValueError("samples must be finite")
        object.__setattr__(self, "values", vals)

    def __len__(self):
        return self.values.shape[0]


@dataclass
class MetricsReport:
    std_error: float = math.nan
    ksd: float | None = None
    acf: list = field(default_factory=list)
    predictive_loss: float | None = None
    divergence_flag: bool = False
    wall_time: float = 0.0
    gradient_evaluations: int = 0
    loss_clamped: bool = False

    def to_dict(self):
        return asdict(self)


def discretize_trajectory(traj, delta):
    """Evaluate the piecewise-linear path at ``t0, t0 + delta, ...`` and at its end."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    t, X = traj.knots()
    t0, t1 = float(t[0]), float(t[-1])
    n = int(math.floor((t1 - t0) / delta + 1e-9))
    grid = t0 + delta * np.arange(n + 1)
    if grid[-1] < t1 - 1e-12 * max(1.0, abs(t1)):
        grid = np.append(grid, t1)
    grid[-1] = min(grid[-1], t1)
    vals = np.column_stack([np.interp(grid, t, X[:, i]) for i in range(X.shape[1])])
    return SampleMatrix(vals, delta, grid)


def path_moments(traj):
    """Time-averaged mean and standard deviation of a trajectory.

    PDMP paths are integrated exactly segment by segment.  SGLD chains
    are discrete, so their saved iterates (after the starting point) are
    averaged instead.
    """
    if not traj.continuous:
        X = traj.positions[1:] if len(traj.positions) > 1 else traj.positions
        return X.mean(axis=0), X.std(axis=0)
    t, X = traj.knots()
    dt = np.diff(t)
    total = dt.sum()
    if not total > 0:
        raise ValueError("trajectory has zero duration")
    a, b = X[:-1], X[1:]
    m1 = (dt[:, None] * (a + b)).sum(axis=0) / (2 * total)
    m2 = (dt[:, None] * (a * a + a * b + b * b)).sum(axis=0) / (3 * total)
    return m1, np.sqrt(np.maximum(m2 - m1 * m1, 0.0))


def time_at_zero(traj):
    """Fraction of path time each coordinate spends exactly at zero."""
    t, X = traj.knots()
    dt = np.diff(t)
    flat = (X[:-1] == 0.0) & (X[1:] == 0.0)
    return (dt[:, None] * flat).sum(axis=0) / dt.sum()


def std_error_metric(est_std, true_std):
    """Mean squared relative error ``mean(((est - true) / true)^2)``."""
    est = np.asarray(est_std, dtype=float)
    true = np.asarray(true_std, dtype=float)
    if est.shape != true.shape:
        raise ValueError("standard deviation vectors differ in length")
    if np.any(true <= 0):
        raise ValueError("true standard deviations must be strictly positive")
    return float(np.mean(((est - true) / true) ** 2))


def _check_kernel(c, beta):
    if not c > 0:
        raise ValueError("c must be positive")
    if not -1.0 < beta < 0.0:
        raise ValueError("beta must lie in (-1, 0)")


def _stein_terms(X, S, c, beta):
    q = c * c + cdist(X, X, "sqeuclidean")
    k = q**beta
    dk = 2.0 * beta * q ** (beta - 1.0)  # d_x k = dk * u, d_y k = -dk * u
    d2 = 4.0 * beta * (beta - 1.0) * q ** (beta - 2.0)
    for m in range(X.shape[1]):
        u = X[:, m][:, None] - X[:, m][None, :]
        sx, sy = S[:, m][:, None], S[:, m][None, :]
        yield sx * sy * k + (sy - sx) * dk * u - dk - d2 * u * u


def stein_kernel_terms(X, grad_U, c=1.0, beta=-0.5):
    """Per-coordinate Stein kernel matrices, shape ``(d, K, K)``.

    With score ``s = -grad U`` and base kernel
    ``k(x, y) = (c^2 + |x - y|^2)^beta`` the ``k``-th term is
    ``s_k(x) s_k(y) k + s_k(x) d_{y_k} k + s_k(y) d_{x_k} k + d_{x_k} d_{y_k} k``.
    """
    _check_kernel(c, beta)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    S = -np.atleast_2d(np.asarray(grad_U, dtype=float))
    return np.stack(list(_stein_terms(X, S, c, beta)))


def ksd(samples, grad_U, c=1.0, beta=-0.5):
    """Kernel Stein discrepancy ``sum_k sqrt(mean_{i,j} kappa_k(x_i, x_j))``.

    Args:
        samples: ``(K, d)`` array or :class:`SampleMatrix`.
        grad_U: ``(K, d)`` array of ``grad U`` at the samples, or a
            callable ``x -> grad U(x)`` evaluated row by row.
        c, beta: inverse-multiquadric parameters, ``c > 0``,
            ``-1 < beta < 0``.
    """
    _check_kernel(c, beta)
    X = samples.values if isinstance(samples, SampleMatrix) else np.atleast_2d(np.asarray(samples, float))
    G = np.array([grad_U(x) for x in X]) if callable(grad_U) else np.atleast_2d(np.asarray(grad_U, float))
    if G.shape != X.shape:
        raise ValueError("gradients and samples differ in shape")
    K = X.shape[0]
    # per-coordinate means are nonnegative in exact arithmetic; clip rounding
    means = [t.sum() / (K * K) for t in _stein_terms(X, -G, c, beta)]
    return float(np.sqrt(np.maximum(means, 0.0)).sum())


def acf(series, max_lag):
    """Biased sample autocorrelation at lags ``0..max_lag``."""
    x = np.asarray(series, dtype=float)
    n = len(x)
    if max_lag >= n:
        raise ValueError("series must be longer than max_lag")
    x = x - x.mean()
    var = x @ x
    if var == 0:
        raise ValueError("series has zero variance")
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, size)
    r = np.fft.irfft(f * np.conj(f), size)[: max_lag + 1]
    return r / var


def per_datum_loss(kind, dataset, x, predict=None):
    """Per-datum loss and a flag telling whether probabilities were clamped.

    ``kind`` is ``"logistic-nll"`` (negative Bernoulli log-likelihood,
    probabilities clamped to ``[1e-12, 1 - 1e-12]``) or ``"mse"``.
    ``predict(X, x)`` defaults to the linear predictor ``X @ x``.
    """
    X, y = dataset.covariates, dataset.responses
    x = np.asarray(x, dtype=float)
    if kind == "logistic-nll":
        prob = expit(X @ x) if predict is None else predict(X, x)
        clipped = np.clip(prob, 1e-12, 1 - 1e-12)
        flag = bool(np.any(clipped != prob))
        return -(y * np.log(clipped) + (1 - y) * np.log(1 - clipped)), flag
    if kind == "mse":
        f = X @ x if predict is None else predict(X, x)
        return (y - f) ** 2, False
    raise ValueError(f"unknown loss kind {kind!r}")


def loss_trace(kind, dataset, samples, predict=None):
    """Average test loss for every row of ``samples``."""
    X = samples.values if isinstance(samples, SampleMatrix) else np.atleast_2d(samples)
    out = np.empty(len(X))
    clamped = False
    for i, x in enumerate(X):
        losses, flag = per_datum_loss(kind, dataset, x, predict)
        out[i] = losses.mean()
        clamped |= flag
    if clamped:
        warnings.warn("predicted probabilities clamped to [1e-12, 1 - 1e-12]", ClampWarning, stacklevel=2)
    return out


def predictive_loss(kind, dataset, params, predict=None):
    """Mean test loss at a point, or averaged along a set of samples."""
    P = params.values if isinstance(params, SampleMatrix) else np.asarray(params, dtype=float)
    if P.ndim == 1:
        P = P[None, :]
    return float(loss_trace(kind, dataset, P, predict).mean())
