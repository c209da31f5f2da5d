"""
Defaults and tolerances for stochastic computation graph estimators.
Environment variables override the few settings that are deployment-specific.
"""

import os

# Environment variable names
ENV = {
    "threads": "SCG_THREADS",
    "checked": "SCG_CHECKED",
    "log_level": "SCG_LOG_LEVEL",
    "port": "PORT",
}

DEFAULTS = {
    # Sampling
    "seed": 0,
    "samples": 1000,
    "method": "surrogate",
    "baseline": "none",

    # Moving-average baseline: b <- decay * b + (1 - decay) * Q
    "moving_average_decay": 0.9,
    "moving_average_init": 0.0,

    # Oracle
    "quadrature_order": 20,
    "max_configurations": 10**6,
    "max_continuous_dims": 2,

    # Acceptance band for Monte Carlo vs oracle comparisons (standard errors)
    "z_band": 4.0,

    # Central differences
    "fd_step": 1e-6,

    # NaN/Inf trapping at op outputs
    "checked": True,

    "port": 5001,
}

TOLERANCES = {
    "normalization": 1e-10,
    "categorical_sum": 1e-12,
    "method_equality": 1e-12,
    "unbiasedness": 1e-10,
    "bound": 1e-12,
    "vjp_rtol": 1e-5,
    "vjp_atol": 1e-7,
    "hvp_rtol": 1e-4,
    "quadrature_convergence": 1e-8,
}

ESTIMATOR_METHODS = ("surrogate", "algorithm1")


def thread_count(default=None):
    """Worker cap for estimate(); SCG_THREADS wins over the default."""
    raw = os.environ.get(ENV["threads"])
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    if default is not None:
        return max(1, int(default))
    return os.cpu_count() or 1


def checked_mode():
    raw = os.environ.get(ENV["checked"])
    if raw is None:
        return DEFAULTS["checked"]
    return raw.strip().lower() not in ("0", "false", "no", "off")
