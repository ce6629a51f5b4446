"""Bayesian inverse problem assembly.

A problem couples a box-uniform prior, a forward model, observed data and a
Gaussian noise model into one object that evaluates the log unnormalized
posterior.  Every forward evaluation is tallied on a shared counter so that
the simulation budget of any algorithm built on top stays auditable.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Optional, Protocol

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import cho_factor, cho_solve

Array = NDArray[np.float64]


class InputError(ValueError):
    """An argument violates a documented precondition."""


class SolverError(RuntimeError):
    """A forward solver failed to produce a solution."""


class ForwardModel(Protocol):
    """Maps a parameter vector to the vector of predicted observations."""

    def observe(self, theta: Array) -> Array: ...


class ForwardCounter:
    """Thread-safe tally of forward-model evaluations."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._count = 0

    @property
    def count(self) -> int:
        return self._count

    def add(self, n: int = 1) -> None:
        with self._lock:
            self._count += n

    def reset(self) -> None:
        with self._lock:
            self._count = 0


@dataclass(frozen=True)
class BoxPrior:
    """Uniform prior on an axis-aligned box."""

    lower: Array
    upper: Array

    def __post_init__(self) -> None:
        lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lower.shape != upper.shape or lower.ndim != 1:
            raise InputError("prior bounds must be 1-d arrays of equal length")
        if not np.all(lower < upper):
            raise InputError("prior bounds must satisfy lower < upper coordinatewise")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def widths(self) -> Array:
        return self.upper - self.lower

    @property
    def log_volume(self) -> float:
        return float(np.sum(np.log(self.widths)))

    def contains(self, theta: Array) -> bool:
        theta = np.asarray(theta, dtype=float)
        return bool(np.all(theta >= self.lower) and np.all(theta <= self.upper))

    def log_density(self, theta: Array) -> float:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            raise InputError(f"theta must have shape ({self.dim},), got {theta.shape}")
        if not self.contains(theta):
            return -np.inf
        return -self.log_volume

    def sample(self, rng: np.random.Generator, n: Optional[int] = None) -> Array:
        size = (n, self.dim) if n is not None else self.dim
        u = rng.uniform(size=size)
        return self.lower + u * self.widths

    def clip(self, theta: Array) -> Array:
        return np.clip(theta, self.lower, self.upper)


@dataclass
class ProblemSpec:
    """A fully assembled inverse problem.

    With ``direct_loglik=False`` the log likelihood is the Gaussian misfit
    -0.5 (d_obs - G(theta))^T noise_cov^-1 (d_obs - G(theta)); the Gaussian
    normalization constant is omitted since only ratios are ever used.
    With ``direct_loglik=True`` the first component of the forward output is
    itself the log likelihood (used by analytic toy targets); ``d_obs`` and
    ``noise_cov`` then only serve the data-space machinery of ensemble
    updates.
    """

    prior: BoxPrior
    forward: ForwardModel
    d_obs: Array
    noise_cov: Array
    direct_loglik: bool = False
    counter: ForwardCounter = field(default_factory=ForwardCounter)

    def __post_init__(self) -> None:
        self.d_obs = np.atleast_1d(np.asarray(self.d_obs, dtype=float))
        self.noise_cov = np.atleast_2d(np.asarray(self.noise_cov, dtype=float))
        if self.noise_cov.shape != (self.dim_data, self.dim_data):
            raise InputError("noise_cov shape must match d_obs length")
        try:
            self._noise_cho = cho_factor(self.noise_cov, lower=True)
        except np.linalg.LinAlgError as exc:
            raise InputError("noise_cov must admit a Cholesky factorization") from exc
        self._noise_chol = np.linalg.cholesky(self.noise_cov)

    @property
    def dim_theta(self) -> int:
        return self.prior.dim

    @property
    def dim_data(self) -> int:
        return self.d_obs.size

    @property
    def noise_chol(self) -> Array:
        """Lower Cholesky factor of the noise covariance."""
        return self._noise_chol

    def noise_solve(self, residual: Array) -> Array:
        """Apply noise_cov^-1 to a residual vector (or a stack of them)."""
        return cho_solve(self._noise_cho, np.asarray(residual, dtype=float).T).T


def evaluate_forward(spec: ProblemSpec, theta: Array) -> Array:
    """Run the forward model at theta and record the call on the counter."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (spec.dim_theta,):
        raise InputError(
            f"theta must have shape ({spec.dim_theta},), got {theta.shape}"
        )
    spec.counter.add()
    return np.asarray(spec.forward.observe(theta), dtype=float)


def log_prior(spec: ProblemSpec, theta: Array) -> float:
    """Log prior density; -inf outside the box."""
    return spec.prior.log_density(theta)


def log_likelihood_from_prediction(spec: ProblemSpec, prediction: Array) -> float:
    """Log likelihood given an already-computed forward output."""
    prediction = np.asarray(prediction, dtype=float)
    if spec.direct_loglik:
        return float(prediction[0])
    residual = spec.d_obs - prediction
    return float(-0.5 * residual @ spec.noise_solve(residual))


def log_likelihood(spec: ProblemSpec, theta: Array) -> float:
    """Log likelihood at theta; costs exactly one forward evaluation."""
    return log_likelihood_from_prediction(spec, evaluate_forward(spec, theta))


def log_unnormalized_posterior(spec: ProblemSpec, theta: Array) -> float:
    """Log prior + log likelihood; -inf (no forward call) outside the prior box."""
    lp = log_prior(spec, theta)
    if lp == -np.inf:
        return -np.inf
    return lp + log_likelihood(spec, theta)


def synthesize_data(
    forward: ForwardModel,
    prior: BoxPrior,
    theta_true: Array,
    noise_fraction: float,
    rng: np.random.Generator,
    rule: str = "shared_mean",
) -> tuple[Array, Array]:
    """Generate noisy observations from a known truth.

    Returns ``(d_obs, noise_cov)`` where ``d_obs = G(theta_true) + eta`` with
    ``eta ~ N(0, noise_cov)`` and diagonal ``noise_cov`` built from one of two
    percentage rules:

    - ``"shared_mean"``: one shared standard deviation equal to
      ``noise_fraction * |mean(G(theta_true))|``.
    - ``"per_observation"``: per-component standard deviation equal to
      ``noise_fraction * |G(theta_true)_i|``.
    """
    theta_true = np.asarray(theta_true, dtype=float)
    if not prior.contains(theta_true):
        raise InputError("theta_true must lie inside the prior support")
    clean = np.asarray(forward.observe(theta_true), dtype=float)
    if rule == "shared_mean":
        std = np.full(clean.size, noise_fraction * abs(float(np.mean(clean))))
    elif rule == "per_observation":
        std = noise_fraction * np.abs(clean)
    else:
        raise InputError(f"unknown noise rule {rule!r}")
    noise_cov = np.diag(std**2)
    d_obs = clean + std * rng.standard_normal(clean.size)
    return d_obs, noise_cov


class EvaluationArchive:
    """Append-only ledger of every (theta, log unnormalized posterior) pair.

    Rows arrive in generations (one per ensemble update); each row must carry
    a finite log posterior, so the archive is always usable as surrogate
    training data without masking.
    """

    def __init__(self, dim_theta: int) -> None:
        self._dim = dim_theta
        self._thetas: list[Array] = []
        self._log_posts: list[float] = []
        self._generations: list[int] = []

    def __len__(self) -> int:
        return len(self._thetas)

    @property
    def dim_theta(self) -> int:
        return self._dim

    @property
    def thetas(self) -> Array:
        return np.asarray(self._thetas, dtype=float).reshape(len(self), self._dim)

    @property
    def log_posts(self) -> Array:
        return np.asarray(self._log_posts, dtype=float)

    @property
    def generations(self) -> NDArray[np.int64]:
        return np.asarray(self._generations, dtype=np.int64)

    def extend(self, thetas: Array, log_posts: Array, generation: int) -> None:
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        log_posts = np.atleast_1d(np.asarray(log_posts, dtype=float))
        if thetas.shape != (log_posts.size, self._dim):
            raise InputError("thetas and log_posts shapes do not agree")
        if not np.all(np.isfinite(log_posts)):
            raise InputError("archive rows must have finite log posterior")
        for row, lp in zip(thetas, log_posts):
            self._thetas.append(row.copy())
            self._log_posts.append(float(lp))
            self._generations.append(int(generation))
