"""Tiny forward models and problem builders shared across test modules."""

from __future__ import annotations

import numpy as np

from modalgp.problem import BoxPrior, ProblemSpec


class LinearModel:
    """Observation operator G(theta) = H theta."""

    def __init__(self, matrix):
        self.matrix = np.atleast_2d(np.asarray(matrix, dtype=float))

    def observe(self, theta):
        return self.matrix @ np.asarray(theta, dtype=float)


class ConstantModel:
    """Observation operator ignoring theta entirely."""

    def __init__(self, value):
        self.value = np.atleast_1d(np.asarray(value, dtype=float))

    def observe(self, theta):
        return self.value.copy()


def scalar_problem(
    g_matrix=((1.0,),),
    d_obs=(0.0,),
    noise_var=(1.0,),
    lower=(-10.0,),
    upper=(10.0,),
):
    """1-d-friendly Gaussian problem with a linear forward model."""
    return ProblemSpec(
        prior=BoxPrior(np.asarray(lower, float), np.asarray(upper, float)),
        forward=LinearModel(g_matrix),
        d_obs=np.asarray(d_obs, float),
        noise_cov=np.diag(np.asarray(noise_var, float)),
    )
