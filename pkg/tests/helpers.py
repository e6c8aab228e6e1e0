"""Small synthetic models and independent reference implementations used by the tests."""
import numpy as np

from sgpdmp.gradients import FactorModel


class QuadraticFactors(FactorModel):
    """``U_j(x) = |x - a_j|^2 / (2N)``; the full gradient is ``x - mean(a)``."""

    def __init__(self, centers):
        self.a = np.atleast_2d(np.asarray(centers, dtype=float))
        self.n_factors, self.dim = self.a.shape

    def factor_grads(self, idx, x):
        return (x - self.a[idx]) / self.n_factors

    def factor_potentials(self, idx, x):
        r = x - self.a[idx]
        return (r * r).sum(axis=1) / (2 * self.n_factors)


class ConstantGradient(FactorModel):
    """Every factor has gradient ``g / N`` everywhere, so every estimate equals ``g``."""

    def __init__(self, g, n_factors=10):
        self.g = np.asarray(g, dtype=float)
        self.n_factors, self.dim = n_factors, len(self.g)

    def factor_grads(self, idx, x):
        return np.tile(self.g / self.n_factors, (len(idx), 1))


class CountingModel(FactorModel):
    """Wraps a model and counts single-factor gradient evaluations."""

    def __init__(self, inner):
        self.inner = inner
        self.n_factors, self.dim = inner.n_factors, inner.dim
        self.calls = 0

    def factor_grads(self, idx, x):
        return self.inner.factor_grads(idx, x)

    def grad_diff_sum(self, idx, x, anchor):
        # one evaluation of grad U_j(x) - grad U_j(anchor) per sampled factor
        self.calls += len(idx)
        return self.inner.grad_diff_sum(idx, x, anchor)


def fd_grad(f, x, h=1e-6):
    """Central finite differences of a scalar function."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def naive_ksd(X, G, c=1.0, beta=-0.5):
    """Kernel Stein discrepancy by explicit double loops over sample pairs.

    Written from the kernel definition without sharing code with the
    package: ``k = (c^2 + r^2)^beta`` and its partial derivatives are
    evaluated term by term for each pair and each coordinate.
    """
    X = np.asarray(X, dtype=float)
    S = -np.asarray(G, dtype=float)  # score of exp(-U)
    K, d = X.shape
    total = 0.0
    for k in range(d):
        acc = 0.0
        for i in range(K):
            for j in range(K):
                diff = X[i] - X[j]
                q = c * c + float(diff @ diff)
                base = q**beta
                dkx = beta * q ** (beta - 1) * 2 * diff[k]  # d/dx_k
                dky = -dkx  # d/dy_k
                dxy = -2 * beta * q ** (beta - 1) - 4 * beta * (beta - 1) * q ** (beta - 2) * diff[k] ** 2
                acc += S[i, k] * S[j, k] * base + S[i, k] * dky + S[j, k] * dkx + dxy
        total += np.sqrt(max(acc / K**2, 0.0))
    return total


def gaussian_1d_regression(n=1000, c=0.25, seed=0):
    """1-D linear regression without intercept; returns ``(model, posterior, cv)``.

    The control variate sits at the analytic posterior mean, so the
    only approximation left in SG-ZZ is the time discretisation and the
    factor subsampling.
    """
    from sgpdmp.gradients import ControlVariate
    from sgpdmp.targets import Dataset, LinearRegressionModel

    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, 1))
    y = 0.5 * A[:, 0] + rng.standard_normal(n) * np.sqrt(n * c)
    model = LinearRegressionModel(Dataset(A, y), c=c)
    post = model.posterior()
    return model, post, ControlVariate.from_anchor(model, post.mean)
