"""Factorised potentials, control-variate gradients and the ADAM anchor fit.

A target density ``pi(x) ~ exp(-U(x))`` is stored as a sum of ``N``
per-datum factors, ``U(x) = sum_j U_j(x)``.  Samplers only ever touch a
handful of factors per step, through :func:`cv_gradient`.

Factor indices are 0-based throughout the Python API.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "FactorModel",
    "ControlVariate",
    "AdamConfig",
    "DivergenceError",
    "full_gradient",
    "cv_gradient",
    "adam_step",
    "fit_control_variate",
]


class DivergenceError(RuntimeError):
    """Raised when an optimiser or sampler produces non-finite values."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class FactorModel:
    """Base class for a potential ``U(x) = sum_j U_j(x)``.

    Subclasses set ``n_factors`` and ``dim`` and implement
    :meth:`factor_grads`.  Implementing :meth:`factor_potentials` is
    optional but enables finite-difference self checks.
    """

    n_factors: int
    dim: int

    def factor_grads(self, idx, x):
        """Gradients ``grad U_j(x)`` for ``j in idx`` as an ``(len(idx), dim)`` array."""
        raise NotImplementedError

    def factor_potentials(self, idx, x):
        """Potentials ``U_j(x)`` for ``j in idx``; optional."""
        raise NotImplementedError

    @property
    def has_potential(self):
        return type(self).factor_potentials is not FactorModel.factor_potentials

    def grad_sum(self, idx, x):
        """Sum of factor gradients over ``idx``.  Overridden where cheaper."""
        return self.factor_grads(idx, x).sum(axis=0)

    def grad_diff_sum(self, idx, x, anchor):
        """``sum_{j in idx} grad U_j(x) - grad U_j(anchor)``.

        Models whose factor gradients are affine in ``x`` override this to
        avoid two evaluations.
        """
        return self.grad_sum(idx, x) - self.grad_sum(idx, anchor)

    def full_grad(self, x):
        return self.grad_sum(np.arange(self.n_factors), x)

    def potential(self, x):
        return float(self.factor_potentials(np.arange(self.n_factors), x).sum())

    def initial_point(self, rng=None):
        """Default starting point for optimisers."""
        return np.zeros(self.dim)


def _as_position(model, x):
    x = np.asarray(x, dtype=float)
    if x.shape != (model.dim,):
        raise ValueError(f"position has shape {x.shape}, expected ({model.dim},)")
    return x


def full_gradient(model, x):
    """Full-data gradient ``sum_j grad U_j(x)``."""
    return model.full_grad(_as_position(model, x))


@dataclass(frozen=True)
class ControlVariate:
    """Anchor point and the exact full gradient there.

    Build with :meth:`from_anchor`, which computes the gradient sum,
    or pass both fields explicitly and call :meth:`check`.
    """

    anchor: np.ndarray
    full_grad_at_anchor: np.ndarray

    @classmethod
    def from_anchor(cls, model, anchor):
        anchor = _as_position(model, anchor).copy()
        anchor.setflags(write=False)
        g = model.full_grad(anchor)
        g = np.array(g, dtype=float)
        g.setflags(write=False)
        return cls(anchor, g)

    def check(self, model, atol=1e-10):
        """Verify the stored gradient against a fresh full-data evaluation."""
        full = model.full_grad(np.asarray(self.anchor))
        if not np.allclose(full, self.full_grad_at_anchor, rtol=0.0, atol=atol):
            err = np.max(np.abs(full - self.full_grad_at_anchor))
            raise ValueError(f"full_grad_at_anchor is off by {err:.3g} (atol {atol})")
        return self


def _cv_grad(model, cv, idx, x):
    # no validation: hot path used by the samplers
    scale = model.n_factors / len(idx)
    return scale * model.grad_diff_sum(idx, x, cv.anchor) + cv.full_grad_at_anchor


def cv_gradient(model, cv, batch, x):
    """Control-variate estimate of the full gradient from a mini-batch.

    Returns the batch average of ``N (grad U_j(x) - grad U_j(xhat))``
    plus the full gradient at the anchor ``xhat``.  The estimate is
    unbiased for :func:`full_gradient` under uniform sampling of ``j``.

    Args:
        model: a :class:`FactorModel`.
        cv: a :class:`ControlVariate` for ``model``.
        batch: non-empty sequence of factor indices in ``[0, N)``,
            duplicates allowed.
        x: position, shape ``(d,)``.
    """
    idx = np.asarray(batch, dtype=np.intp).reshape(-1)
    if idx.size == 0:
        raise ValueError("batch must be non-empty")
    if idx.min() < 0 or idx.max() >= model.n_factors:
        raise ValueError(f"batch indices must lie in [0, {model.n_factors})")
    return _cv_grad(model, cv, idx, _as_position(model, x))


@dataclass(frozen=True)
class AdamConfig:
    step_size: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    iterations: int = 100_000
    batch_fraction: float = 0.01

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0.0 < b < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0.0 < self.batch_fraction <= 1.0:
            raise ValueError("batch_fraction must lie in (0, 1]")


def adam_step(x, m, v, grad, t, cfg):
    """One bias-corrected ADAM update (Kingma & Ba).

    Returns the new ``(x, m, v)``; inputs are not modified.
    """
    if t < 1:
        raise ValueError("t must be >= 1")
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad * grad
    m_hat = m / (1.0 - cfg.beta1**t)
    v_hat = v / (1.0 - cfg.beta2**t)
    x = x - cfg.step_size * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return x, m, v


def fit_control_variate(model, cfg=None, seed=None, x0=None):
    """Estimate the posterior mode with mini-batch ADAM and wrap it as a control variate.

    Each step uses ``(N / n) * sum_{j in batch} grad U_j(x)`` with the
    batch drawn uniformly without replacement, ``n = ceil(fraction * N)``.
    The returned anchor carries its exact full-data gradient.

    Raises:
        DivergenceError: if a non-finite gradient or iterate appears.
    """
    cfg = AdamConfig() if cfg is None else cfg
    rng = np.random.default_rng(seed)
    x = model.initial_point(rng) if x0 is None else _as_position(model, x0).copy()
    n = model.n_factors
    batch = max(1, int(np.ceil(cfg.batch_fraction * n)))
    scale = n / batch
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    for t in range(1, cfg.iterations + 1):
        idx = np.arange(n) if batch == n else rng.choice(n, size=batch, replace=False)
        g = scale * model.grad_sum(idx, x)
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient at ADAM iteration {t}", t)
        x, m, v = adam_step(x, m, v, g, t, cfg)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"non-finite iterate at ADAM iteration {t}", t)
    return ControlVariate.from_anchor(model, x)
