"""Sampling multimodal posteriors of Bayesian inverse problems.

Ensemble-smoother updates concentrate forward evaluations near the posterior
support, an adaptive Gaussian-process surrogate of the log density ratio
turns them into a cheap target, and Metropolis sampling with an adaptive
Gaussian-mixture proposal draws from it.  A brute-force grid-quadrature
posterior serves as the validation reference.
"""

__version__ = "0.1.0"
