"""Ensemble smoother and its locally-updating variant.

The global update moves every member by a Kalman-style gain built from
empirical cross-covariances.  The local variant scores, for each member, all
members by a combined data-misfit / parameter-distance metric, updates the
best-scoring neighborhood with the same gain construction, and draws the
replacement from it; this keeps distinct posterior modes alive where the
global update would average them away.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import cho_factor, cho_solve

from .problem import (
    EvaluationArchive,
    InputError,
    ProblemSpec,
    evaluate_forward,
    log_likelihood_from_prediction,
)

Array = NDArray[np.float64]

THETA_COV_REG = 1e-10


@dataclass(frozen=True)
class Ensemble:
    """Parameter members with their (already computed) forward predictions."""

    members: Array       # (Ne, M)
    predictions: Array   # (Ne, D)
    iteration: int = 0

    def __post_init__(self) -> None:
        if self.members.ndim != 2 or self.predictions.ndim != 2:
            raise InputError("members and predictions must be 2-d arrays")
        if self.members.shape[0] != self.predictions.shape[0]:
            raise InputError("members and predictions must have equal row counts")
        if self.members.shape[0] < 2:
            raise InputError("need at least 2 ensemble members")

    @property
    def size(self) -> int:
        return self.members.shape[0]


@dataclass(frozen=True)
class LocalUpdateConfig:
    """Fraction of the ensemble forming each member's local neighborhood."""

    alpha: float = 0.1

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha <= 1.0:
            raise InputError("alpha must lie in (0, 1]")

    def local_size(self, n_members: int) -> int:
        n_local = math.ceil(self.alpha * n_members)
        if n_local < 2:
            raise InputError(
                f"alpha={self.alpha} gives a local ensemble of {n_local} < 2 members"
            )
        return n_local


def evaluate_members(spec: ProblemSpec, members: Array) -> tuple[Array, Array]:
    """Forward-evaluate each member; returns (predictions, log posteriors)."""
    preds = np.stack([evaluate_forward(spec, m) for m in members])
    log_prior_value = -spec.prior.log_volume
    log_posts = np.array(
        [log_prior_value + log_likelihood_from_prediction(spec, p) for p in preds]
    )
    return preds, log_posts


def initial_ensemble(spec: ProblemSpec, n_members: int, rng: np.random.Generator) -> tuple[Ensemble, Array]:
    members = spec.prior.sample(rng, n_members)
    preds, log_posts = evaluate_members(spec, members)
    return Ensemble(members, preds, iteration=0), log_posts


def _cross_cov(a: Array, b: Array) -> Array:
    """Empirical cross-covariance with the 1/(N-1) convention."""
    ac = a - a.mean(axis=0)
    bc = b - b.mean(axis=0)
    return ac.T @ bc / (a.shape[0] - 1)


def _perturbed_observations(spec: ProblemSpec, n: int, rng: np.random.Generator) -> Array:
    z = rng.standard_normal((n, spec.dim_data))
    return spec.d_obs[None, :] + z @ spec.noise_chol.T


def _updated_members(
    members: Array, preds: Array, spec: ProblemSpec, dtilde: Array
) -> Array:
    """Kalman-style update of a member block against perturbed observations."""
    cov_td = _cross_cov(members, preds)                   # (M, D)
    cov_dd = _cross_cov(preds, preds)                     # (D, D)
    gain = np.linalg.solve(cov_dd + spec.noise_cov, cov_td.T).T   # (M, D)
    updated = members + (dtilde - preds) @ gain.T
    return np.clip(updated, spec.prior.lower, spec.prior.upper)


def es_update(e: Ensemble, spec: ProblemSpec, rng: np.random.Generator) -> Ensemble:
    """One global ensemble-smoother update of every member."""
    dtilde = _perturbed_observations(spec, e.size, rng)
    updated = _updated_members(e.members, e.predictions, spec, dtilde)
    preds, _ = evaluate_members(spec, updated)
    return Ensemble(updated, preds, e.iteration + 1)


def _theta_cov_factor(members: Array):
    cov = _cross_cov(members, members)
    trace = float(np.trace(cov))
    reg = THETA_COV_REG * (trace / members.shape[1] if trace > 0 else 1.0)
    return cho_factor(cov + reg * np.eye(members.shape[1]), lower=True)


def _misfit_scores(e: Ensemble, spec: ProblemSpec) -> Array:
    """Data misfit J1 of every member: residual quadratic form in the noise metric."""
    residuals = e.predictions - spec.d_obs[None, :]
    return np.einsum("ij,ij->i", residuals, spec.noise_solve(residuals))


def _distance_scores(e: Ensemble, theta_cho, j: int) -> Array:
    diffs = e.members - e.members[j]
    solved = cho_solve(theta_cho, diffs.T).T
    return np.einsum("ij,ij->i", diffs, solved)


def _combined_scores(j1: Array, j2: Array) -> Array:
    j1_max = float(j1.max())
    j2_max = float(j2.max())
    total = np.zeros_like(j1)
    if j1_max > 0:
        total += j1 / j1_max
    if j2_max > 0:
        total += j2 / j2_max
    return total


def j_scores(e: Ensemble, spec: ProblemSpec, j: int) -> Array:
    """Combined score J1/J1max + J2/J2max of every member, relative to member j.

    J1 is the data misfit, identical for every j; J2 is the Mahalanobis
    distance to member j in the (regularized) empirical parameter covariance.
    A zero maximum makes the corresponding term vanish for all members.
    """
    if not 0 <= j < e.size:
        raise InputError(f"member index {j} out of range")
    j1 = _misfit_scores(e, spec)
    j2 = _distance_scores(e, _theta_cov_factor(e.members), j)
    return _combined_scores(j1, j2)


def ilues_step(
    e: Ensemble, spec: ProblemSpec, cfg: LocalUpdateConfig, rng: np.random.Generator
) -> Ensemble:
    """One synchronous local-update sweep over all members.

    Every member's replacement is drawn uniformly from its updated local
    ensemble (the ``n_local`` members with smallest combined score, ties
    broken by member index); all neighborhoods are read from the incoming
    ensemble.  Only the returned ensemble is forward-evaluated.
    """
    n_local = cfg.local_size(e.size)
    j1 = _misfit_scores(e, spec)
    theta_cho = _theta_cov_factor(e.members)
    child_rngs = rng.spawn(e.size)

    new_members = np.empty_like(e.members)
    for j in range(e.size):
        scores = _combined_scores(j1, _distance_scores(e, theta_cho, j))
        local_idx = np.argsort(scores, kind="stable")[:n_local]
        dtilde = _perturbed_observations(spec, n_local, child_rngs[j])
        updated = _updated_members(
            e.members[local_idx], e.predictions[local_idx], spec, dtilde
        )
        pick = int(child_rngs[j].integers(n_local))
        new_members[j] = updated[pick]

    preds, _ = evaluate_members(spec, new_members)
    return Ensemble(new_members, preds, e.iteration + 1)


def ilues_run(
    spec: ProblemSpec,
    n_members: int,
    n_iters: int,
    cfg: LocalUpdateConfig,
    rng: np.random.Generator,
) -> tuple[Ensemble, EvaluationArchive]:
    """Draw an initial ensemble from the prior and apply n_iters local updates.

    The returned archive logs every evaluated generation, the initial
    ensemble included: those forward solves are paid for and feed the
    surrogate's training set.
    """
    if n_iters < 1:
        raise InputError("n_iters must be >= 1")
    archive = EvaluationArchive(spec.dim_theta)
    e, log_posts = initial_ensemble(spec, n_members, rng)
    archive.extend(e.members, log_posts, generation=0)
    for t in range(1, n_iters + 1):
        e = ilues_step(e, spec, cfg, rng)
        log_posts = np.array(
            [
                -spec.prior.log_volume + log_likelihood_from_prediction(spec, p)
                for p in e.predictions
            ]
        )
        archive.extend(e.members, log_posts, generation=t)
    return e, archive
