"""Concrete factor models, synthetic data generators and dataset ingestion.

All synthetic generators draw from ``numpy.random.Generator(PCG64(seed))``
(what ``np.random.default_rng(seed)`` returns), so a given seed reproduces
a dataset bit for bit on the same numpy version.

The prior of every model is split evenly over the factors: factor ``j``
carries ``|x|^2 / (2 * prior_variance * N)`` in addition to its
likelihood term.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_expit

from .gradients import FactorModel

__all__ = [
    "Dataset",
    "GaussianPosterior",
    "SplitSpec",
    "LinearRegressionModel",
    "LogisticRegressionModel",
    "BNNModel",
    "synth_linear_regression",
    "synth_logistic",
    "synth_bnn_regression",
    "linear_posterior_analytic",
    "laplace_approximation",
    "logistic_factor_grad",
    "bnn_factor_grad",
    "sticky_kappa",
    "normal_density_at_zero",
    "load_and_split",
    "read_dataset",
    "write_dataset",
]


@dataclass(frozen=True)
class Dataset:
    covariates: np.ndarray
    responses: np.ndarray
    feature_names: tuple | None = None
    response_name: str = "y"

    def __post_init__(self):
        X = np.asarray(self.covariates, dtype=float)
        y = np.asarray(self.responses, dtype=float)
        if X.ndim != 2:
            raise ValueError("covariates must be a 2-d array")
        if y.shape != (X.shape[0],):
            raise ValueError(f"{X.shape[0]} covariate rows but {y.shape} responses")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("dataset contains non-finite entries")
        object.__setattr__(self, "covariates", X)
        object.__setattr__(self, "responses", y)

    @property
    def n(self):
        return self.covariates.shape[0]

    @property
    def p(self):
        return self.covariates.shape[1]

    def subset(self, rows):
        return Dataset(self.covariates[rows], self.responses[rows], self.feature_names, self.response_name)


@dataclass(frozen=True)
class GaussianPosterior:
    mean: np.ndarray
    covariance: np.ndarray
    precision: np.ndarray = field(default=None)

    def __post_init__(self):
        cov = np.asarray(self.covariance, dtype=float)
        cov = 0.5 * (cov + cov.T)
        prec = np.linalg.inv(cov) if self.precision is None else np.asarray(self.precision, float)
        prec = 0.5 * (prec + prec.T)
        if not np.allclose(cov @ prec, np.eye(len(cov)), atol=1e-8):
            raise ValueError("covariance and precision are not inverse to 1e-8")
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float))
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "precision", prec)

    @classmethod
    def from_precision(cls, mean, precision):
        prec = np.asarray(precision, dtype=float)
        prec = 0.5 * (prec + prec.T)
        try:
            L = np.linalg.cholesky(prec)
        except np.linalg.LinAlgError:
            raise ValueError("precision matrix is not positive definite") from None
        Linv = np.linalg.inv(L)
        return cls(mean, Linv.T @ Linv, prec)

    @property
    def dim(self):
        return len(self.mean)

    @property
    def std(self):
        return np.sqrt(np.diag(self.covariance))

    def sample(self, size, rng):
        return rng.multivariate_normal(self.mean, self.covariance, size=size)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.9
    seed: int = 0
    replicate: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")
        if self.replicate < 0:
            raise ValueError("replicate must be >= 0")


# ----------------------------------------------------------------------------
# models


class LinearRegressionModel(FactorModel):
    """``y = A x + noise`` with noise variance ``N c`` and prior ``N(0, s0^2 I)``.

    ``U_j(x) = (y_j - A_j x)^2 / (2 N c) + |x|^2 / (2 s0^2 N)``.
    """

    def __init__(self, dataset, c=1.0, prior_variance=100.0):
        self.data = dataset
        self.A = dataset.covariates
        self.y = dataset.responses
        self.n_factors, self.dim = self.A.shape
        self.c = float(c)
        self.prior_variance = float(prior_variance)
        self._noise_var = self.n_factors * self.c
        self._prior_share = 1.0 / (self.prior_variance * self.n_factors)

    def factor_grads(self, idx, x):
        A = self.A[idx]
        r = A @ x - self.y[idx]
        return A * (r / self._noise_var)[:, None] + self._prior_share * x

    def grad_sum(self, idx, x):
        A = self.A[idx]
        r = A @ x - self.y[idx]
        return A.T @ r / self._noise_var + (len(idx) * self._prior_share) * x

    def grad_diff_sum(self, idx, x, anchor):
        # factor gradients are affine in x, so the difference needs no y
        A = self.A[idx]
        dx = x - anchor
        return A.T @ (A @ dx) / self._noise_var + (len(idx) * self._prior_share) * dx

    def factor_potentials(self, idx, x):
        r = self.A[idx] @ x - self.y[idx]
        return r * r / (2 * self._noise_var) + 0.5 * self._prior_share * (x @ x)

    def posterior(self):
        return linear_posterior_analytic(self.data, self.c, self.prior_variance)

    def ols(self):
        return np.linalg.lstsq(self.A, self.y, rcond=None)[0]


class LogisticRegressionModel(FactorModel):
    """Bernoulli responses with ``P(y=1) = sigmoid(X_j . x)`` and a Gaussian prior."""

    def __init__(self, dataset, prior_variance=10.0):
        self.data = dataset
        self.X = dataset.covariates
        self.y = dataset.responses
        self.n_factors, self.dim = self.X.shape
        self.prior_variance = float(prior_variance)
        self._prior_share = 1.0 / (self.prior_variance * self.n_factors)

    def factor_grads(self, idx, x):
        X = self.X[idx]
        r = expit(X @ x) - self.y[idx]
        return X * r[:, None] + self._prior_share * x

    def grad_sum(self, idx, x):
        X = self.X[idx]
        r = expit(X @ x) - self.y[idx]
        return X.T @ r + (len(idx) * self._prior_share) * x

    def factor_potentials(self, idx, x):
        z = self.X[idx] @ x
        y = self.y[idx]
        nll = -(y * log_expit(z) + (1 - y) * log_expit(-z))
        return nll + 0.5 * self._prior_share * (x @ x)

    def hessian(self, x):
        s = expit(self.X @ x)
        w = s * (1 - s)
        return (self.X * w[:, None]).T @ self.X + np.eye(self.dim) / self.prior_variance

    def predict(self, X, x):
        return expit(X @ x)


class BNNModel(FactorModel):
    """One-hidden-layer ReLU regression network with unit observation noise.

    ``f(X) = W2 relu(W1 X + b1) + b2``.  The flat parameter vector is laid
    out as ``[W1 (row-major, hidden x p), b1 (hidden), W2 (hidden), b2]``,
    hence ``hidden * p + 2 * hidden + 1`` entries.  The ReLU subgradient
    at zero is taken to be 0.
    """

    def __init__(self, dataset, hidden=50, prior_variance=10.0):
        self.data = dataset
        self.X = dataset.covariates
        self.y = dataset.responses
        self.n_factors, self.p = self.X.shape
        self.hidden = int(hidden)
        self.dim = self.hidden * self.p + 2 * self.hidden + 1
        self.prior_variance = float(prior_variance)
        self._prior_share = 1.0 / (self.prior_variance * self.n_factors)

    def unpack(self, x):
        h, p = self.hidden, self.p
        W1 = x[: h * p].reshape(h, p)
        b1 = x[h * p : h * p + h]
        W2 = x[h * p + h : h * p + 2 * h]
        b2 = x[-1]
        return W1, b1, W2, b2

    def _forward(self, X, x):
        W1, b1, W2, b2 = self.unpack(x)
        Z = X @ W1.T + b1
        H = np.maximum(Z, 0.0)
        return Z, H, H @ W2 + b2

    def predict(self, X, x):
        return self._forward(X, x)[2]

    def _backward(self, idx, x):
        X = self.X[idx]
        Z, H, f = self._forward(X, x)
        W2 = self.unpack(x)[2]
        r = f - self.y[idx]
        dZ = (r[:, None] * W2) * (Z > 0)
        return X, H, r, dZ

    def factor_grads(self, idx, x):
        X, H, r, dZ = self._backward(idx, x)
        n = len(idx)
        dW1 = (dZ[:, :, None] * X[:, None, :]).reshape(n, -1)
        g = np.concatenate([dW1, dZ, r[:, None] * H, r[:, None]], axis=1)
        return g + self._prior_share * x

    def grad_sum(self, idx, x):
        X, H, r, dZ = self._backward(idx, x)
        g = np.concatenate([(dZ.T @ X).ravel(), dZ.sum(0), H.T @ r, [r.sum()]])
        return g + (len(idx) * self._prior_share) * x

    def factor_potentials(self, idx, x):
        r = self.predict(self.X[idx], x) - self.y[idx]
        return 0.5 * r * r + 0.5 * self._prior_share * (x @ x)

    def initial_point(self, rng=None):
        # He-style init; the all-zero point is a saddle the gradient never leaves
        rng = np.random.default_rng(rng)
        h, p = self.hidden, self.p
        W1 = rng.standard_normal((h, p)) * math.sqrt(2.0 / p)
        W2 = rng.standard_normal(h) * math.sqrt(1.0 / h)
        return np.concatenate([W1.ravel(), np.zeros(h), W2, [0.0]])


def logistic_factor_grad(dataset, prior_variance, j, x):
    """``grad U_j(x) = (sigmoid(x . X_j) - y_j) X_j + x / (prior_variance N)``."""
    Xj = dataset.covariates[j]
    r = expit(Xj @ x) - dataset.responses[j]
    return r * Xj + x / (prior_variance * dataset.n)


def bnn_factor_grad(dataset, prior_variance, j, x, hidden=50):
    """Single-factor gradient of :class:`BNNModel`."""
    model = BNNModel(dataset, hidden=hidden, prior_variance=prior_variance)
    return model.factor_grads(np.array([j]), np.asarray(x, dtype=float))[0]


# ----------------------------------------------------------------------------
# posteriors


def linear_posterior_analytic(dataset, c, prior_variance):
    """Conjugate posterior of :class:`LinearRegressionModel`."""
    A, y = dataset.covariates, dataset.responses
    noise_var = dataset.n * c
    prec = A.T @ A / noise_var + np.eye(A.shape[1]) / prior_variance
    try:
        L = np.linalg.cholesky(prec)
    except np.linalg.LinAlgError:
        raise ValueError("posterior precision is not positive definite") from None
    rhs = A.T @ y / noise_var
    mean = np.linalg.solve(L.T, np.linalg.solve(L, rhs))
    return GaussianPosterior.from_precision(mean, prec)


def laplace_approximation(model, mode):
    """Gaussian approximation from the Hessian of ``U`` at ``mode``."""
    return GaussianPosterior.from_precision(np.asarray(mode, float), model.hessian(mode))


# ----------------------------------------------------------------------------
# synthetic data


def _nearest_pd(S, floor=1e-6):
    S = 0.5 * (S + S.T)
    w, Q = np.linalg.eigh(S)
    return (Q * np.maximum(w, floor)) @ Q.T


def _banded_covariance(rng, k, low, high):
    # S_ij = u_ij^|i-j| with u_ij ~ Unif(low, high) drawn on the upper triangle
    S = np.eye(k)
    for i in range(k):
        for j in range(i + 1, k):
            S[i, j] = S[j, i] = rng.uniform(low, high) ** (j - i)
    return _nearest_pd(S)


def synth_linear_regression(n, d, c=1.0, seed=None):
    """Intercept plus correlated Gaussian covariates; noise variance ``n c``.

    Returns ``(dataset, true_params)`` with ``true_params[0] = 0``.
    """
    if n < 1 or d < 2 or not c > 0:
        raise ValueError("need n >= 1, d >= 2 and c > 0")
    rng = np.random.default_rng(seed)
    S = _banded_covariance(rng, d - 1, 0.4, 0.8)
    A = np.empty((n, d))
    A[:, 0] = 1.0
    A[:, 1:] = rng.multivariate_normal(np.zeros(d - 1), S, size=n)
    x = np.concatenate([[0.0], rng.standard_normal(d - 1)])
    y = A @ x + rng.standard_normal(n) * math.sqrt(n * c)
    return Dataset(A, y), x


def synth_logistic(n, p, rho=0.4, seed=None, sparse=False):
    """Correlated Gaussian covariates and Bernoulli responses.

    With ``sparse=True`` every true coefficient is independently set to
    zero with probability 1/2.
    """
    if n < 1 or p < 1 or not 0.0 <= rho < 1.0:
        raise ValueError("need n, p >= 1 and 0 <= rho < 1")
    rng = np.random.default_rng(seed)
    S = _banded_covariance(rng, p, -rho, rho)
    X = rng.multivariate_normal(np.zeros(p), S, size=n)
    x = rng.standard_normal(p)
    if sparse:
        x[rng.random(p) < 0.5] = 0.0
    y = (rng.random(n) < expit(X @ x)).astype(float)
    return Dataset(X, y), x


def synth_bnn_regression(n, p, hidden=50, noise=1.0, seed=None):
    """Regression data from a random ReLU teacher network of the same shape."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p))
    teacher = BNNModel(Dataset(X, np.zeros(n)), hidden=hidden)
    x = teacher.initial_point(rng)
    x[teacher.hidden * p : teacher.hidden * p + teacher.hidden] = 0.1 * rng.standard_normal(hidden)
    y = teacher.predict(X, x) + noise * rng.standard_normal(n)
    return Dataset(X, y), x


# ----------------------------------------------------------------------------
# sticky prior


def normal_density_at_zero(variance):
    return 1.0 / np.sqrt(2 * np.pi * np.asarray(variance, dtype=float))


def sticky_kappa(w, slab_density_at_zero):
    """Unsticking rates ``kappa_i = (1 - w_i) / w_i * pi_i(0)`` for a spike-and-slab prior.

    ``w_i`` is the prior weight of the point mass at zero and ``pi_i(0)``
    the slab density at zero.
    """
    w = np.atleast_1d(np.asarray(w, dtype=float))
    dens = np.atleast_1d(np.asarray(slab_density_at_zero, dtype=float))
    if np.any((w <= 0) | (w >= 1)):
        raise ValueError("spike weights must lie strictly inside (0, 1)")
    if np.any(dens <= 0):
        raise ValueError("slab densities at zero must be positive")
    w, dens = np.broadcast_arrays(w, dens)
    return (1.0 - w) / w * dens


# ----------------------------------------------------------------------------
# CSV ingestion


def read_dataset(path):
    """Read a numeric CSV with a header row; the last column is the response."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    if len(header) < 2:
        raise ValueError(f"{path}: need at least one covariate and a response column")
    if not body:
        raise ValueError(f"{path}: no data rows")
    values = np.empty((len(body), len(header)))
    for r, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise ValueError(f"{path}: row {r} has {len(row)} cells, header has {len(header)}")
        for c, cell in enumerate(row):
            try:
                values[r - 2, c] = float(cell)
            except ValueError:
                raise ValueError(
                    f"{path}: non-numeric cell {cell!r} at row {r}, column {c + 1} ({header[c]})"
                ) from None
    if not np.all(np.isfinite(values)):
        r, c = np.argwhere(~np.isfinite(values))[0]
        raise ValueError(f"{path}: non-finite cell at row {r + 2}, column {c + 1}")
    return Dataset(values[:, :-1], values[:, -1], tuple(header[:-1]), header[-1])


def write_dataset(path, dataset):
    names = dataset.feature_names
    if names is None or len(names) != dataset.p:
        names = tuple(f"x{i + 1}" for i in range(dataset.p))
    names = tuple(names) + (dataset.response_name,)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for xi, yi in zip(dataset.covariates, dataset.responses):
            w.writerow([repr(float(v)) for v in xi] + [repr(float(yi))])


def split_dataset(dataset, spec, standardize=False, standardize_response=False):
    """Permute rows with a replicate-specific stream and split train/test."""
    rng = np.random.default_rng([spec.seed, spec.replicate])
    perm = rng.permutation(dataset.n)
    n_train = int(round(spec.train_fraction * dataset.n))
    n_train = min(max(n_train, 1), dataset.n - 1) if dataset.n > 1 else dataset.n
    train, test = dataset.subset(perm[:n_train]), dataset.subset(perm[n_train:])
    if standardize:
        mu = train.covariates.mean(axis=0)
        sd = train.covariates.std(axis=0)
        const = sd == 0  # constant columns (e.g. an intercept) are left as is
        mu[const], sd[const] = 0.0, 1.0
        ty, sy = 0.0, 1.0
        if standardize_response:
            ty, sy = train.responses.mean(), train.responses.std() or 1.0
        names = dataset.feature_names, dataset.response_name
        train = Dataset((train.covariates - mu) / sd, (train.responses - ty) / sy, *names)
        test = Dataset((test.covariates - mu) / sd, (test.responses - ty) / sy, *names)
    return train, test


def load_and_split(path, spec, standardize=False, standardize_response=False):
    """Read ``path`` and split it per ``spec``; returns ``(train, test)``.

    Standardisation statistics are fitted on the training rows only.
    """
    return split_dataset(read_dataset(path), spec, standardize, standardize_response)
