"""PAC-Bayesian stochastic nonlinear optimal control.

Trains stabilizing feedback controllers by sampling from an optimal Gibbs
posterior over controller parameters and certifies their out-of-sample
closed-loop cost with high-probability upper and lower bounds.
"""

__version__ = "0.1.0"
