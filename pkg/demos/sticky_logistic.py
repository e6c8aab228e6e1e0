"""Sparse logistic regression with the sticky Zig-Zag sampler.

Half of the true coefficients are exactly zero.  With a spike-and-slab
prior the sticky sampler parks coordinates at zero for random times,
which pulls the posterior median of the null coefficients to 0.
"""
import numpy as np

from sgpdmp.diagnostics import discretize_trajectory, time_at_zero
from sgpdmp.gradients import AdamConfig, fit_control_variate
from sgpdmp.samplers import SamplerConfig, initial_state, run_sampler
from sgpdmp.targets import LogisticRegressionModel, normal_density_at_zero, sticky_kappa, synth_logistic

data, truth = synth_logistic(100, 100, seed=0, sparse=True)
model = LogisticRegressionModel(data, prior_variance=10.0)
cv = fit_control_variate(model, AdamConfig(step_size=1e-2, iterations=5000, batch_fraction=0.1), seed=0)
zero = truth == 0
print(f"{zero.sum()} of {len(truth)} true coefficients are zero")

# %% spike weight 1/2, slab N(0, 10)
kappa = sticky_kappa(np.full(model.dim, 0.5), normal_density_at_zero(10.0))
horizon = 200.0
for kind in ("sg-zz", "sg-szz"):
    cfg = SamplerConfig(0.01, horizon, seed=0, kappa=kappa if kind == "sg-szz" else None, thin=10)
    traj = run_sampler(kind, model, cv, cfg, initial_state(kind, cv.anchor, 0))
    S = discretize_trajectory(traj, horizon / 2000).values[1000:]
    med = np.median(S, axis=0)
    print(f"{kind:<7} median MSE {np.mean((med - truth) ** 2):.3f}   "
          f"time at zero on null coefficients {time_at_zero(traj)[zero].mean():.2f}   "
          f"medians exactly 0: {np.sum(med == 0)}")
