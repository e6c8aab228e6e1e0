import math
import os

import numpy as np
import pytest
from scipy import integrate

from helpers import fd_grad
from sgpdmp.targets import (
    BNNModel,
    Dataset,
    GaussianPosterior,
    LinearRegressionModel,
    LogisticRegressionModel,
    SplitSpec,
    _banded_covariance,
    bnn_factor_grad,
    laplace_approximation,
    linear_posterior_analytic,
    load_and_split,
    logistic_factor_grad,
    normal_density_at_zero,
    read_dataset,
    split_dataset,
    sticky_kappa,
    synth_bnn_regression,
    synth_linear_regression,
    synth_logistic,
    write_dataset,
)

SAMPLE = os.path.join(os.path.dirname(__file__), "data", "sample.csv")


# datasets ------------------------------------------------------------------


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 2)), np.zeros(4))
    with pytest.raises(ValueError):
        Dataset(np.array([[np.nan]]), np.zeros(1))


def test_gaussian_posterior_inverse_invariant():
    P = np.array([[2.0, 0.3], [0.3, 1.0]])
    post = GaussianPosterior.from_precision([0.0, 1.0], P)
    np.testing.assert_allclose(post.covariance @ post.precision, np.eye(2), atol=1e-8)
    np.testing.assert_array_equal(post.covariance, post.covariance.T)
    with pytest.raises(ValueError):
        GaussianPosterior.from_precision([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]])


# linear regression ---------------------------------------------------------


def test_synth_linear_regression_layout():
    data, truth = synth_linear_regression(200, 4, c=0.5, seed=3)
    np.testing.assert_array_equal(data.covariates[:, 0], 1.0)
    assert truth[0] == 0.0
    assert data.covariates.shape == (200, 4)


def test_synth_linear_regression_reproducible():
    a, ta = synth_linear_regression(50, 3, seed=9)
    b, tb = synth_linear_regression(50, 3, seed=9)
    c, _ = synth_linear_regression(50, 3, seed=10)
    assert a.covariates.tobytes() == b.covariates.tobytes() and a.responses.tobytes() == b.responses.tobytes()
    assert ta.tobytes() == tb.tobytes()
    assert not np.array_equal(a.responses, c.responses)


def test_banded_covariance_is_positive_definite():
    rng = np.random.default_rng(0)
    for k in (1, 3, 8):
        S = _banded_covariance(rng, k, -0.8, 0.8)
        assert np.all(np.linalg.eigvalsh(S) >= 1e-6 - 1e-12)
        np.testing.assert_allclose(S, S.T)


def test_linear_posterior_one_point_conjugacy():
    post = linear_posterior_analytic(Dataset(np.ones((1, 1)), np.zeros(1)), 1.0, 100.0)
    assert post.precision[0, 0] == pytest.approx(1.01, abs=1e-15)
    assert post.mean[0] == 0.0


def test_linear_posterior_zero_response_zero_mean():
    data = Dataset(np.random.default_rng(1).standard_normal((30, 3)), np.zeros(30))
    np.testing.assert_array_equal(linear_posterior_analytic(data, 1.0, 100.0).mean, np.zeros(3))


def test_linear_posterior_matches_quadrature_1d():
    rng = np.random.default_rng(2)
    A = rng.standard_normal((40, 1))
    y = 1.3 * A[:, 0] + rng.standard_normal(40) * math.sqrt(40 * 0.05)
    data = Dataset(A, y)
    model = LinearRegressionModel(data, c=0.05, prior_variance=100.0)
    post = linear_posterior_analytic(data, 0.05, 100.0)
    u0 = model.potential(post.mean)
    dens = lambda t: math.exp(-(model.potential(np.array([t])) - u0))
    m, s = post.mean[0], post.std[0]
    lo, hi = m - 12 * s, m + 12 * s
    Z = integrate.quad(dens, lo, hi, epsabs=0, epsrel=1e-12)[0]
    mean = integrate.quad(lambda t: t * dens(t), lo, hi, epsabs=0, epsrel=1e-12)[0] / Z
    var = integrate.quad(lambda t: (t - mean) ** 2 * dens(t), lo, hi, epsabs=0, epsrel=1e-12)[0] / Z
    assert abs(mean - m) < 1e-6
    assert abs(math.sqrt(var) - s) < 1e-6


def test_linear_posterior_matches_dense_solve():
    data, _ = synth_linear_regression(300, 5, c=0.2, seed=4)
    A, y = data.covariates, data.responses
    Nc = 300 * 0.2
    cov = np.linalg.inv(A.T @ A / Nc + np.eye(5) / 100.0)
    post = linear_posterior_analytic(data, 0.2, 100.0)
    np.testing.assert_allclose(post.covariance, cov, rtol=1e-6, atol=1e-12)
    np.testing.assert_allclose(post.mean, cov @ A.T @ y / Nc, rtol=1e-6, atol=1e-9)


def test_linear_posterior_mean_is_stationary(linear_small):
    model, _ = linear_small
    post = model.posterior()
    np.testing.assert_allclose(model.full_grad(post.mean), 0.0, atol=1e-8)


# logistic regression -------------------------------------------------------


def test_synth_logistic_binary_and_reproducible():
    a, ta = synth_logistic(500, 5, seed=1)
    b, tb = synth_logistic(500, 5, seed=1)
    assert set(np.unique(a.responses)) <= {0.0, 1.0}
    assert a.covariates.tobytes() == b.covariates.tobytes() and ta.tobytes() == tb.tobytes()


def test_synth_logistic_rho_zero_is_uncorrelated():
    data, _ = synth_logistic(100_000, 3, rho=0.0, seed=5)
    R = np.corrcoef(data.covariates.T)
    assert np.all(np.abs(R[np.triu_indices(3, 1)]) < 0.02)
    np.testing.assert_allclose(data.covariates.std(axis=0), 1.0, atol=0.02)


def test_synth_logistic_sparse_truth():
    _, truth = synth_logistic(10, 400, seed=6, sparse=True)
    frac = np.mean(truth == 0)
    assert 0.4 < frac < 0.6


def test_logistic_factor_grad_hand_values():
    X = np.array([[1.0, -2.0, 0.5], [0.0, 0.0, 0.0]])
    data = Dataset(X, np.array([1.0, 0.0]))
    np.testing.assert_allclose(logistic_factor_grad(data, 10.0, 0, np.zeros(3)), -0.5 * X[0])
    x = np.array([0.3, -1.0, 2.0])
    np.testing.assert_allclose(logistic_factor_grad(data, 10.0, 1, x), x / (10.0 * 2))


def test_logistic_factor_grad_finite_differences():
    data, _ = synth_logistic(100, 6, seed=7)
    model = LogisticRegressionModel(data)
    rng = np.random.default_rng(8)
    for _ in range(20):
        x = 2 * rng.standard_normal(6)
        j = int(rng.integers(100))
        g = logistic_factor_grad(data, 10.0, j, x)
        fd = fd_grad(lambda z: model.factor_potentials(np.array([j]), z)[0], x)
        np.testing.assert_allclose(fd, g, rtol=1e-5, atol=1e-9)
        np.testing.assert_allclose(model.factor_grads(np.array([j]), x)[0], g, rtol=1e-14)


def test_logistic_hessian_matches_finite_differences(logistic_small):
    model, _ = logistic_small
    x = np.array([0.2, -0.4, 0.1, 0.3])
    H = np.array([fd_grad(lambda z: model.full_grad(z)[i], x) for i in range(4)])
    np.testing.assert_allclose(model.hessian(x), H, rtol=1e-6, atol=1e-6)
    post = laplace_approximation(model, x)
    np.testing.assert_allclose(post.precision, model.hessian(x))


# BNN -----------------------------------------------------------------------


def test_bnn_parameter_count():
    data, _ = synth_bnn_regression(20, 13, seed=0)
    model = BNNModel(data)
    assert model.dim == 50 * 13 + 50 + 50 + 1
    assert bnn_factor_grad(data, 10.0, 0, np.zeros(model.dim)).shape == (model.dim,)


def test_bnn_zero_weights_gradient_only_on_output_bias():
    data, _ = synth_bnn_regression(20, 4, hidden=6, seed=1)
    model = BNNModel(data, hidden=6)
    x = np.zeros(model.dim)
    assert np.all(model.predict(data.covariates, x) == 0.0)
    g = bnn_factor_grad(data, 10.0, 3, x, hidden=6)
    expect = np.zeros(model.dim)
    expect[-1] = -data.responses[3]  # d/d b2 of (y - f)^2 / 2 at f = 0
    np.testing.assert_array_equal(g, expect)


def test_bnn_flat_layout_roundtrip():
    data, _ = synth_bnn_regression(5, 3, hidden=4, seed=2)
    model = BNNModel(data, hidden=4)
    x = np.arange(model.dim, dtype=float)
    W1, b1, W2, b2 = model.unpack(x)
    assert W1.shape == (4, 3) and b1.shape == (4,) and W2.shape == (4,) and np.ndim(b2) == 0
    np.testing.assert_array_equal(W1.ravel(), x[:12])
    np.testing.assert_array_equal(b1, x[12:16])
    np.testing.assert_array_equal(W2, x[16:20])
    assert b2 == x[20]


def test_bnn_finite_differences_away_from_kinks():
    data, _ = synth_bnn_regression(30, 13, seed=3)
    model = BNNModel(data)
    rng = np.random.default_rng(4)
    checked = 0
    while checked < 10:
        x = model.initial_point(rng)
        x[650:700] = 0.5 * rng.standard_normal(50)
        j = int(rng.integers(30))
        W1, b1, _, _ = model.unpack(x)
        pre = W1 @ data.covariates[j] + b1
        if np.min(np.abs(pre)) < 1e-3:  # too close to a ReLU kink for central differences
            continue
        g = bnn_factor_grad(data, 10.0, j, x)
        fd = fd_grad(lambda z: model.factor_potentials(np.array([j]), z)[0], x, h=1e-6)
        np.testing.assert_allclose(fd, g, rtol=1e-4, atol=1e-7)
        checked += 1


# sticky prior --------------------------------------------------------------


def test_sticky_kappa_values():
    assert sticky_kappa(0.5, normal_density_at_zero(1.0))[0] == pytest.approx(0.398942, abs=1e-6)
    assert sticky_kappa(0.5, 2.0)[0] == 2.0
    dens = normal_density_at_zero(1.0)
    assert sticky_kappa(0.999, dens)[0] < 0.001 * dens / 0.999 + 1e-15
    np.testing.assert_allclose(sticky_kappa([0.2, 0.8], [1.0, 1.0]), [4.0, 0.25])


@pytest.mark.parametrize("w", [0.0, 1.0, -0.1])
def test_sticky_kappa_rejects_degenerate_weights(w):
    with pytest.raises(ValueError):
        sticky_kappa(w, 1.0)


def test_sticky_kappa_rejects_nonpositive_density():
    with pytest.raises(ValueError):
        sticky_kappa(0.5, 0.0)


# CSV ingestion -------------------------------------------------------------


def test_read_sample_csv():
    data = read_dataset(SAMPLE)
    assert data.covariates.shape == (10, 3)
    assert data.feature_names == ("age", "dose", "score")
    assert data.response_name == "outcome"


def test_split_ten_rows():
    train, test = load_and_split(SAMPLE, SplitSpec(0.9, seed=0, replicate=0))
    assert (train.n, test.n) == (9, 1)


def _all_rows(pair):
    tr, te = pair
    X = np.vstack([tr.covariates, te.covariates])
    y = np.concatenate([tr.responses, te.responses])
    return sorted(map(tuple, np.column_stack([X, y])))


def test_replicates_permute_differently():
    a = load_and_split(SAMPLE, SplitSpec(0.5, seed=0, replicate=0))
    b = load_and_split(SAMPLE, SplitSpec(0.5, seed=0, replicate=1))
    assert not np.array_equal(a[0].covariates, b[0].covariates)
    full = read_dataset(SAMPLE)
    ref = sorted(map(tuple, np.column_stack([full.covariates, full.responses])))
    assert _all_rows(a) == ref
    assert _all_rows(b) == ref


def test_standardised_train_columns():
    train, test = load_and_split(SAMPLE, SplitSpec(0.9, seed=3, replicate=0), standardize=True)
    np.testing.assert_allclose(train.covariates.mean(axis=0), 0.0, atol=1e-10)
    np.testing.assert_allclose(train.covariates.std(axis=0), 1.0, atol=1e-10)
    assert test.n == 1


def test_standardise_leaves_constant_column():
    data = Dataset(np.column_stack([np.ones(10), np.arange(10.0)]), np.arange(10.0))
    train, _ = split_dataset(data, SplitSpec(0.8), standardize=True)
    np.testing.assert_array_equal(train.covariates[:, 0], 1.0)


def test_split_spec_validation():
    with pytest.raises(ValueError):
        SplitSpec(1.0)
    with pytest.raises(ValueError):
        SplitSpec(0.0)


@pytest.mark.parametrize(
    "text, match",
    [
        ("", "empty file"),
        ("a,b\n", "no data rows"),
        ("a,b\n1,2\n3,x\n", "row 3, column 2"),
        ("a,b\n1,2\n3\n", "row 3 has 1 cells"),
        ("a,b\n1,nan\n", "non-finite cell at row 2, column 2"),
        ("a\n1\n", "at least one covariate"),
    ],
)
def test_read_dataset_errors(tmp_path, text, match):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    with pytest.raises(ValueError, match=match):
        read_dataset(p)


def test_dataset_write_read_roundtrip(tmp_path):
    data, _ = synth_linear_regression(25, 3, seed=11)
    p = tmp_path / "d.csv"
    write_dataset(p, data)
    back = read_dataset(p)
    assert back.covariates.tobytes() == data.covariates.tobytes()
    assert back.responses.tobytes() == data.responses.tobytes()
