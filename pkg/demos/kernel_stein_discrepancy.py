"""Kernel Stein discrepancy as a sample-quality check.

KSD only needs the gradient of the log target at the samples.  It grows
when the samples are too wide, too narrow or off-centre.
"""
import numpy as np

from sgpdmp.diagnostics import ksd
from sgpdmp.targets import GaussianPosterior

rng = np.random.default_rng(0)
post = GaussianPosterior(np.array([0.5, -1.0]), np.array([[1.0, 0.3], [0.3, 0.5]]))
L = np.linalg.cholesky(post.covariance)


def grad_U(X):
    return (X - post.mean) @ post.precision


print("scale  shift  KSD (500 draws)")
for scale, shift in [(1.0, 0.0), (0.5, 0.0), (2.0, 0.0), (1.0, 0.5)]:
    X = post.mean + shift + scale * rng.standard_normal((500, 2)) @ L.T
    print(f"{scale:<6} {shift:<6} {ksd(X, grad_U(X)):.4f}")
