import math
import warnings

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from helpers import naive_ksd
from sgpdmp.diagnostics import (
    ClampWarning,
    MetricsReport,
    SampleMatrix,
    acf,
    discretize_trajectory,
    ksd,
    loss_trace,
    path_moments,
    per_datum_loss,
    predictive_loss,
    std_error_metric,
    stein_kernel_terms,
    time_at_zero,
)
from sgpdmp.gradients import ControlVariate
from sgpdmp.samplers import SamplerConfig, SamplerState, Trajectory, initial_state, run_sampler
from sgpdmp.targets import Dataset, synth_linear_regression, LinearRegressionModel, synth_logistic


def line_traj(times, xs, kind="sg-zz", events=()):
    times = np.asarray(times, float)
    X = np.asarray(xs, float).reshape(len(times), -1)
    ev_t = np.array([e[0] for e in events], float)
    ev_x = np.array([e[1] for e in events], float).reshape(len(events), X.shape[1])
    return Trajectory(kind, times, X, ev_t, np.zeros(len(events), np.int8), np.zeros(len(events), np.int64),
                      np.full(len(events), -1), ev_x, SamplerState(times[-1], X[-1], np.ones(X.shape[1])))


# discretisation and moments ----------------------------------------------


def test_discretize_single_segment():
    traj = line_traj([0.0, 2.0], [[1.0], [3.0]])
    S = discretize_trajectory(traj, 1.0)
    np.testing.assert_allclose(S.values[:, 0], [1.0, 2.0, 3.0])
    np.testing.assert_allclose(S.times, [0.0, 1.0, 2.0])


def test_discretize_coarse_grid_gives_endpoints():
    traj = line_traj([0.0, 2.0], [[1.0], [3.0]])
    S = discretize_trajectory(traj, 5.0)
    np.testing.assert_allclose(S.values[:, 0], [1.0, 3.0])


def test_discretize_uses_events():
    # skeleton at 0 and 1 only, turning point at t = 0.5
    traj = line_traj([0.0, 1.0], [[0.0], [0.0]], events=[(0.5, [0.5])])
    S = discretize_trajectory(traj, 0.25)
    np.testing.assert_allclose(S.values[:, 0], [0.0, 0.25, 0.5, 0.25, 0.0])


def test_discretize_rejects_bad_delta():
    with pytest.raises(ValueError):
        discretize_trajectory(line_traj([0.0, 1.0], [[0.0], [1.0]]), 0.0)


def test_path_moments_linear_ramp():
    m, sd = path_moments(line_traj([0.0, 1.0], [[0.0], [1.0]]))
    assert m[0] == pytest.approx(0.5)
    assert sd[0] == pytest.approx(math.sqrt(1 / 12))


def test_path_moments_constant_path():
    m, sd = path_moments(line_traj([0.0, 1.0, 4.0], [[2.5], [2.5], [2.5]]))
    assert m[0] == 2.5 and sd[0] == 0.0


def test_path_moments_zero_duration():
    with pytest.raises(ValueError):
        path_moments(line_traj([1.0, 1.0], [[0.0], [1.0]]))


@pytest.fixture(scope="module")
def zz_run():
    data, _ = synth_linear_regression(400, 3, seed=0)
    model = LinearRegressionModel(data)
    cv = ControlVariate.from_anchor(model, model.posterior().mean)
    return run_sampler("sg-zz", model, cv, SamplerConfig(0.05, 100.0, seed=1), initial_state("sg-zz", cv.anchor, 1))


def test_path_moments_match_fine_discretisation(zz_run):
    m, sd = path_moments(zz_run)
    S = discretize_trajectory(zz_run, 1e-4).values
    np.testing.assert_allclose(S.mean(axis=0), m, rtol=1e-3, atol=1e-3 * sd.min())
    np.testing.assert_allclose(S.std(axis=0), sd, rtol=1e-3)


def test_discretised_mean_converges(zz_run):
    m, _ = path_moments(zz_run)
    e1 = np.abs(discretize_trajectory(zz_run, 0.5).values.mean(axis=0) - m).max()
    e2 = np.abs(discretize_trajectory(zz_run, 0.05).values.mean(axis=0) - m).max()
    assert e2 < e1


def test_sgld_moments_use_iterates():
    traj = line_traj([0.0, 1.0, 2.0, 3.0], [[9.0], [1.0], [2.0], [3.0]], kind="sgld")
    m, sd = path_moments(traj)
    assert m[0] == pytest.approx(2.0)
    assert sd[0] == pytest.approx(np.std([1.0, 2.0, 3.0]))


def test_time_at_zero():
    traj = line_traj([0.0, 1.0, 3.0, 4.0], [[1.0, 0.0], [0.0, 0.0], [0.0, 0.0], [1.0, 0.0]])
    np.testing.assert_allclose(time_at_zero(traj), [0.5, 1.0])


# std error -----------------------------------------------------------------


def test_std_error_examples():
    s = np.array([1.0, 2.0])
    assert std_error_metric(s, s) == 0.0
    assert std_error_metric(2 * s, s) == pytest.approx(1.0)
    assert std_error_metric([1.1, 0.9], [1.0, 1.0]) == pytest.approx(0.01)
    with pytest.raises(ValueError):
        std_error_metric([1.0], [0.0])
    with pytest.raises(ValueError):
        std_error_metric([1.0, 1.0], [1.0])


@given(est=arrays(float, 5, elements=st.floats(0, 10)), true=arrays(float, 5, elements=st.floats(0.1, 10)),
       perm=st.permutations(range(5)))
def test_std_error_permutation_invariant(est, true, perm):
    p = list(perm)
    assert std_error_metric(est[p], true[p]) == pytest.approx(std_error_metric(est, true), rel=1e-12)
    assert std_error_metric(est, true) >= 0


# KSD -----------------------------------------------------------------------


def _sympy_stein_kernel(d, c, beta, score):
    """Stein kernel terms from symbolic differentiation of the IMQ kernel."""
    xs = sp.symbols(f"x0:{d}")
    ys = sp.symbols(f"y0:{d}")
    k = (c**2 + sum((a - b) ** 2 for a, b in zip(xs, ys))) ** beta
    terms = []
    for i in range(d):
        sx, sy = score(xs)[i], score(ys)[i]
        terms.append(sx * sy * k + sx * sp.diff(k, ys[i]) + sy * sp.diff(k, xs[i]) + sp.diff(k, xs[i], ys[i]))
    return xs, ys, terms


def test_ksd_single_point_standard_normal():
    xs, ys, terms = _sympy_stein_kernel(1, 1, sp.Rational(-1, 2), lambda z: [-z[0]])
    kappa = float(terms[0].subs({xs[0]: 0, ys[0]: 0}))
    assert kappa == pytest.approx(1.0)
    assert ksd(np.zeros((1, 1)), np.zeros((1, 1))) == pytest.approx(math.sqrt(kappa), abs=1e-15)


def test_stein_terms_match_symbolic():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((3, 2))
    c, beta = 1.5, -0.3
    # score of a correlated Gaussian, s(x) = -P x
    P = np.array([[2.0, 0.5], [0.5, 1.0]])
    xs, ys, terms = _sympy_stein_kernel(2, sp.Float(c), sp.Float(beta), lambda z: [-(P[i, 0] * z[0] + P[i, 1] * z[1]) for i in range(2)])
    fns = [sp.lambdify(xs + ys, t) for t in terms]
    T = stein_kernel_terms(X, X @ P, c, beta)  # grad U = P x
    for k in range(2):
        for i in range(3):
            for j in range(3):
                assert T[k, i, j] == pytest.approx(fns[k](*X[i], *X[j]), rel=1e-10, abs=1e-12)


def test_ksd_matches_naive_double_loop():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((50, 2))
    G = X * np.array([1.0, 0.5]) + 0.1 * rng.standard_normal((50, 2))
    assert ksd(X, G) == pytest.approx(naive_ksd(X, G), abs=1e-10)
    assert ksd(X, G, 0.7, -0.8) == pytest.approx(naive_ksd(X, G, 0.7, -0.8), abs=1e-10)


def test_ksd_row_permutation_invariant():
    rng = np.random.default_rng(2)
    X = rng.standard_normal((30, 3))
    G = X.copy()
    p = rng.permutation(30)
    assert ksd(X[p], G[p]) == pytest.approx(ksd(X, G), rel=1e-13)


def test_ksd_accepts_callable_and_sample_matrix():
    X = np.random.default_rng(3).standard_normal((10, 2))
    assert ksd(SampleMatrix(X, 1.0), lambda x: x) == ksd(X, X)


@settings(max_examples=30, deadline=None)
@given(c=st.floats(1e-2, 10), beta=st.floats(-0.99, -0.01))
def test_ksd_finite_and_nonnegative(c, beta):
    X = np.random.default_rng(4).standard_normal((20, 2))
    val = ksd(X, X, c, beta)
    assert math.isfinite(val) and val >= 0


@pytest.mark.parametrize("c, beta", [(0.0, -0.5), (1.0, 0.0), (1.0, -1.0), (-1.0, -0.5)])
def test_ksd_rejects_bad_kernel(c, beta):
    with pytest.raises(ValueError):
        ksd(np.zeros((2, 1)), np.zeros((2, 1)), c, beta)


def test_ksd_shape_mismatch():
    with pytest.raises(ValueError):
        ksd(np.zeros((3, 2)), np.zeros((3, 1)))


def test_ksd_prefers_exact_draws():
    data, _ = synth_linear_regression(1000, 3, seed=5)
    model = LinearRegressionModel(data)
    post = model.posterior()
    rng = np.random.default_rng(6)
    wins = 0
    for _ in range(10):
        good = post.sample(200, rng)
        bad = post.mean + 2 * (post.sample(200, rng) - post.mean)
        g = ksd(good, [model.full_grad(x) for x in good])
        b = ksd(bad, [model.full_grad(x) for x in bad])
        wins += g < b
    assert wins >= 6


# ACF -----------------------------------------------------------------------


def test_acf_lag_zero_and_alternating():
    r = acf(np.tile([1.0, -1.0], 500), 3)
    assert r[0] == pytest.approx(1.0)
    assert r[1] == pytest.approx(-1.0, abs=1e-2)


def test_acf_matches_direct_sum():
    x = np.random.default_rng(7).standard_normal(300).cumsum()
    r = acf(x, 10)
    y = x - x.mean()
    direct = [np.dot(y[: len(y) - k], y[k:]) / np.dot(y, y) for k in range(11)]
    np.testing.assert_allclose(r, direct, atol=1e-12)


def test_acf_white_noise_band():
    r = acf(np.random.default_rng(8).standard_normal(100_000), 20)
    assert np.all(np.abs(r[1:]) < 0.02)


def test_acf_errors():
    with pytest.raises(ValueError, match="zero variance"):
        acf(np.ones(10), 2)
    with pytest.raises(ValueError):
        acf(np.arange(5.0), 5)


# predictive loss -----------------------------------------------------------


def test_logistic_loss_at_origin_is_log2():
    data, _ = synth_logistic(50, 3, seed=0)
    assert predictive_loss("logistic-nll", data, np.zeros(3)) == pytest.approx(math.log(2))


def test_mse_perfect_prediction():
    X = np.random.default_rng(0).standard_normal((20, 2))
    x = np.array([1.0, -2.0])
    assert predictive_loss("mse", Dataset(X, X @ x), x) == 0.0


def test_logistic_loss_truth_beats_origin():
    data, truth = synth_logistic(50_000, 5, seed=1)
    assert predictive_loss("logistic-nll", data, truth) <= predictive_loss("logistic-nll", data, np.zeros(5))


def test_logistic_loss_clamps_and_flags():
    data = Dataset(np.array([[1.0], [1.0]]), np.array([1.0, 0.0]))
    losses, flag = per_datum_loss("logistic-nll", data, np.array([100.0]))
    assert flag
    assert losses[1] == pytest.approx(-math.log(1e-12))
    with pytest.warns(ClampWarning):
        loss_trace("logistic-nll", data, np.array([[100.0]]))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        loss_trace("logistic-nll", data, np.array([[0.1]]))


def test_predictive_loss_averages_along_samples():
    data = Dataset(np.ones((4, 1)), np.zeros(4))
    samples = SampleMatrix(np.array([[1.0], [3.0]]), 1.0)
    assert predictive_loss("mse", data, samples) == pytest.approx((1 + 9) / 2)


def test_unknown_loss_kind():
    with pytest.raises(ValueError):
        per_datum_loss("hinge", Dataset(np.ones((1, 1)), np.ones(1)), np.ones(1))


def test_sample_matrix_validation():
    with pytest.raises(ValueError):
        SampleMatrix(np.array([[np.inf]]), 1.0)
    assert len(SampleMatrix(np.zeros((3, 2)), 0.1)) == 3


def test_metrics_report_dict():
    d = MetricsReport(std_error=0.1, ksd=0.2).to_dict()
    assert d["std_error"] == 0.1 and d["ksd"] == 0.2 and d["divergence_flag"] is False
