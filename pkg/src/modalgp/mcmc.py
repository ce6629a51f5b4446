"""Metropolis sampling with an adaptive Gaussian-mixture proposal.

The proposal depends only on the mixture parameters, not on the current
state, so both proposal terms in the acceptance ratio are evaluated under
the same (current) mixture.  Every realized state, accepted or repeated,
is folded back into the mixture during burn-in; adaptation then freezes so
the retained samples come from a fixed independence kernel.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Protocol

import numpy as np
from numpy.typing import NDArray

from .density import DensityEstimate, kde_log_pdf
from .gp import GpSurrogate
from .mixture import GaussianMixtureState, assign_mode, gm_adapt, gm_log_pdf, gm_sample
from .problem import BoxPrior, InputError

Array = NDArray[np.float64]


class ChainStateError(RuntimeError):
    """The chain reached (or was started at) a zero-density state."""


class LogTarget(Protocol):
    """Anything exposing a box-masked log target density."""

    box: BoxPrior

    def log_target(self, theta: Array) -> float: ...


@dataclass(frozen=True)
class TargetDensity:
    """Surrogate-corrected density: GP mean plus KDE log density, masked to the box."""

    surrogate: Optional[GpSurrogate]
    density: DensityEstimate
    box: BoxPrior

    def log_target(self, theta: Array) -> float:
        theta = np.asarray(theta, dtype=float)
        if not self.box.contains(theta):
            return -np.inf
        value = kde_log_pdf(self.density, theta)
        if self.surrogate is not None:
            value += self.surrogate.predict_mean(theta)
        return value


@dataclass(frozen=True)
class FunctionTarget:
    """Adapter turning a plain callable into a box-masked target."""

    fn: object
    box: BoxPrior

    def log_target(self, theta: Array) -> float:
        theta = np.asarray(theta, dtype=float)
        if not self.box.contains(theta):
            return -np.inf
        return float(self.fn(theta))


def log_target(td: LogTarget, theta: Array) -> float:
    """Log target density; exactly -inf outside the prior box."""
    return td.log_target(np.asarray(theta, dtype=float))


def acceptance_probability(
    td: LogTarget,
    gm: GaussianMixtureState,
    theta_star: Array,
    theta_prev: Array,
    log_target_star: Optional[float] = None,
    log_target_prev: Optional[float] = None,
) -> float:
    """Metropolis acceptance probability with the mixture as proposal.

    Computed in log space; the cached log-target values are accepted to avoid
    re-evaluating the target inside the chain loop.
    """
    lt_star = td.log_target(theta_star) if log_target_star is None else log_target_star
    lt_prev = td.log_target(theta_prev) if log_target_prev is None else log_target_prev
    if lt_prev == -np.inf:
        raise ChainStateError("current chain state has zero target density")
    if lt_star == -np.inf:
        return 0.0
    log_ratio = (
        lt_star
        - lt_prev
        + gm_log_pdf(gm, np.asarray(theta_prev, dtype=float))
        - gm_log_pdf(gm, np.asarray(theta_star, dtype=float))
    )
    return float(min(1.0, np.exp(min(log_ratio, 0.0))))


@dataclass
class McmcDiagnostics:
    acceptance_rate: float
    n_steps: int
    n_accepted: int
    mode_visits: NDArray[np.int64]
    final_proposal: GaussianMixtureState


@dataclass
class McmcResult:
    samples: Array        # post-burn-in chain states, (N_kept, M)
    log_targets: Array    # log target density of each retained sample
    diagnostics: McmcDiagnostics


def mcmc_run(
    td: LogTarget,
    gm_init: GaussianMixtureState,
    chain_length: int,
    burn_in_fraction: float,
    rng: np.random.Generator,
    theta_init: Array,
    adapt: bool = True,
) -> McmcResult:
    """Run one chain and return the post-burn-in samples with diagnostics.

    Per step: draw a candidate from the mixture, accept by the Metropolis
    ratio, then (during burn-in, if adapting) fold the realized state into
    the mixture.  The acceptance-rate diagnostic counts accepted moves over
    the whole chain.
    """
    if chain_length < 1:
        raise InputError("chain_length must be >= 1")
    if not 0.0 <= burn_in_fraction < 1.0:
        raise InputError("burn_in_fraction must lie in [0, 1)")
    theta = np.asarray(theta_init, dtype=float)
    lt = td.log_target(theta)
    if lt == -np.inf:
        raise ChainStateError("theta_init has zero target density")

    burn_in = int(burn_in_fraction * chain_length)
    gm = gm_init
    kept: list[Array] = []
    kept_lt: list[float] = []
    n_accepted = 0
    for step in range(1, chain_length + 1):
        theta_star = gm_sample(gm, rng)
        lt_star = td.log_target(theta_star)
        alpha = acceptance_probability(
            td, gm, theta_star, theta, log_target_star=lt_star, log_target_prev=lt
        )
        z = rng.uniform()
        if alpha >= z:
            theta, lt = theta_star, lt_star
            n_accepted += 1
        if adapt and step <= burn_in:
            gm = gm_adapt(gm, theta)
        if step > burn_in:
            kept.append(theta.copy())
            kept_lt.append(lt)

    samples = np.asarray(kept).reshape(len(kept), theta.size)
    visits = np.zeros(gm.k, dtype=np.int64)
    for s in kept:
        visits[assign_mode(gm, s)] += 1
    return McmcResult(
        samples=samples,
        log_targets=np.asarray(kept_lt),
        diagnostics=McmcDiagnostics(
            acceptance_rate=n_accepted / chain_length,
            n_steps=chain_length,
            n_accepted=n_accepted,
            mode_visits=visits,
            final_proposal=gm,
        ),
    )
