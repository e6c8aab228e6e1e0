"""Stationary accuracy of SG-ZZ, SG-BPS and SGLD on Bayesian linear regression.

The posterior is Gaussian and known in closed form, so the error of the
estimated posterior standard deviations can be read off directly.
The horizon is fixed at 300 time units, so for the small steps the
Monte Carlo noise (a few hundredths) is larger than the bias.
Run with ``python3 demos/linear_regression.py``.
"""
import numpy as np

from sgpdmp.diagnostics import path_moments, std_error_metric
from sgpdmp.gradients import ControlVariate
from sgpdmp.samplers import SamplerConfig, initial_state, run_sampler
from sgpdmp.targets import LinearRegressionModel, synth_linear_regression

# %% data and exact posterior
data, truth = synth_linear_regression(10_000, 5, c=1.0, seed=0)
model = LinearRegressionModel(data)
post = model.posterior()
print("true parameters     ", np.round(truth, 3))
print("posterior mean      ", np.round(post.mean, 3))
print("posterior std       ", np.round(post.std, 3))

# %% anchor the control variate at the least-squares fit
cv = ControlVariate.from_anchor(model, model.ols())

# %% error against step size at a fixed horizon
print("\nstep    sampler  E(std)")
for h in (0.3, 0.1, 0.03, 0.01):
    for kind in ("sg-zz", "sg-bps", "sgld"):
        # SGLD steps are iterations, so give it the same number of steps
        cfg = SamplerConfig(h, 300.0 if kind != "sgld" else h * 30_000, seed=1, record_events=False)
        traj = run_sampler(kind, model, cv, cfg, initial_state(kind, cv.anchor, 1))
        if traj.diverged:
            print(f"{h:<7} {kind:<8} diverged")
            continue
        _, sd = path_moments(traj)
        print(f"{h:<7} {kind:<8} {std_error_metric(sd, post.std):.4f}")
