"""Stochastic-gradient piecewise deterministic Monte Carlo samplers."""
from .gradients import (
    AdamConfig,
    ControlVariate,
    DivergenceError,
    FactorModel,
    adam_step,
    cv_gradient,
    fit_control_variate,
    full_gradient,
)
from .samplers import (
    Event,
    SamplerConfig,
    SamplerState,
    Trajectory,
    bps_rate,
    bps_reflect,
    exact_zigzag_gaussian,
    initial_state,
    run_sampler,
    sgbps_interval,
    sgld_step,
    sgszz_interval,
    sgzz_interval,
    zz_flip,
    zz_rate,
)

__version__ = "0.1.0"
