"""SG-ZZ on a one-hidden-layer Bayesian neural network.

The network starts from a random initialisation and the test mean
squared error is tracked along the chain.  The control variate is
anchored at an ADAM estimate of the mode.
"""
import numpy as np

from sgpdmp.diagnostics import loss_trace
from sgpdmp.gradients import AdamConfig, fit_control_variate
from sgpdmp.samplers import SamplerConfig, initial_state, run_sampler
from sgpdmp.targets import BNNModel, SplitSpec, split_dataset, synth_bnn_regression

data, _ = synth_bnn_regression(500, 13, seed=0)
train, test = split_dataset(data, SplitSpec(0.9, seed=0))
net = BNNModel(train, hidden=50)
print(f"{net.dim} parameters, {train.n} training rows, {test.n} test rows")

cv = fit_control_variate(net, AdamConfig(iterations=10_000), seed=0)
x0 = net.initial_point(np.random.default_rng(0))
print(f"test MSE at the start {loss_trace('mse', test, x0[None], predict=net.predict)[0]:.3f}, "
      f"at the ADAM anchor {loss_trace('mse', test, cv.anchor[None], predict=net.predict)[0]:.3f}")

# %% 10^4 intervals of length 1e-4, one saved point every 10
cfg = SamplerConfig(1e-4, 1.0, seed=0, thin=10, record_events=False)
traj = run_sampler("sg-zz", net, cv, cfg, initial_state("sg-zz", x0, 0))
trace = loss_trace("mse", test, traj.positions[1:], predict=net.predict)
for k, block in enumerate(np.array_split(trace, 10)):
    print(f"iterations {k * 1000:>5}-{(k + 1) * 1000:<5} median test MSE {np.median(block):.3f}")
