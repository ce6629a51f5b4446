"""End-to-end driver: ensemble seeding, surrogate refinement, mixture MCMC.

Each outer iteration fits a GP to the log-ratio between the exact
unnormalized posterior and the current density estimate over the full
evaluation archive, samples the corrected density with mixture-proposal
MCMC, re-estimates the density from those samples, and checks a KL-based
stopping rule before spending one more ensemble update on fresh training
points.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from numpy.typing import NDArray

from .density import DensityEstimate, kde_fit, kde_log_pdf_batch, kl_divergence_estimate
from .ensemble import Ensemble, LocalUpdateConfig, ilues_run, ilues_step
from .gp import GpHyperparameters, gp_fit, optimize_hyperparameters
from .mcmc import McmcResult, TargetDensity, mcmc_run
from .mixture import elbow_select_k, gm_from_clusters, kmeans
from .problem import EvaluationArchive, ProblemSpec, log_likelihood_from_prediction

Array = NDArray[np.float64]

START_LOG_TARGET_DROP = 100.0
START_MAX_TRIES = 100
TRAINING_SUPPORT_DROP = 20.0


@dataclass(frozen=True)
class PipelineSettings:
    """Numeric knobs of one full run (see the CLI schema for defaults)."""

    n_members: int = 80
    initial_iters: int = 1
    alpha: float = 0.1
    gp_jitter: float = 0.0
    gp_opt_iters: int = 60
    chain_length: int = 10_000
    burn_in_fraction: float = 0.2
    epsilon_scale: float = 1e-6
    delta_kl: float = 0.05
    n_kl_max: int = 2
    n_max: int = 10
    k_max: int = 6
    kmeans_restarts: int = 8


@dataclass
class IterationRecord:
    """Bookkeeping for one outer iteration."""

    n: int
    kl: float
    accept_rate: float
    k_clusters: int
    forward_calls: int
    wall_ms: float


@dataclass
class TrainingSet:
    inputs: Array
    targets: Array


@dataclass
class PipelineResult:
    samples: Array
    sample_log_targets: Array
    records: list[IterationRecord]
    archive: EvaluationArchive
    kl_history: list[float]
    converged: bool
    n_ensemble_updates: int
    final_density: DensityEstimate
    final_ensemble: Ensemble
    seed: int


def build_training_targets(archive: EvaluationArchive, p_hat: DensityEstimate) -> TrainingSet:
    """Log-ratio targets over the archive against the current density estimate.

    Every archived point contributes target log pi~(theta) - log p_hat(theta),
    recomputed each iteration so the surrogate stays consistent with the
    density it corrects.  Rows where the density estimate has essentially no
    mass (log density more than 20 below its support peak) are withheld from
    the regression: their log-ratio explodes with the estimator's tail decay
    rather than with anything the surrogate should learn, and fitting them
    destabilizes the whole correction loop.  If the filter would leave fewer
    than two rows, all rows are used.
    """
    if len(archive) == 0:
        raise ValueError("archive is empty")
    thetas = archive.thetas
    log_densities = kde_log_pdf_batch(p_hat, thetas)
    targets = archive.log_posts - log_densities
    support_peak = float(np.max(kde_log_pdf_batch(p_hat, p_hat.samples)))
    active = log_densities > support_peak - TRAINING_SUPPORT_DROP
    if active.sum() < 2:
        active = np.ones(len(archive), dtype=bool)
    return TrainingSet(inputs=thetas[active], targets=targets[active])


def convergence_check(
    kl_history: list[float], delta_kl: float, n_kl_max: int
) -> tuple[bool, int]:
    """Trailing streak of KL values below the threshold, and whether to stop."""
    streak = 0
    for value in reversed(kl_history):
        if value < delta_kl:
            streak += 1
        else:
            break
    return streak >= n_kl_max, streak


def substream(seed: int, *key: int) -> np.random.Generator:
    """Named, reproducible child stream of the root seed."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


_STREAM_ILUES_INIT = 1
_STREAM_ILUES = 2
_STREAM_KMEANS = 3
_STREAM_MCMC = 4
_STREAM_START = 5


def _draw_start(
    spec: ProblemSpec,
    target: TargetDensity,
    archive: EvaluationArchive,
    rng: np.random.Generator,
) -> Array:
    """Prior draw with a finite, not-absurdly-low log target.

    Redraws until the value clears (best archived log target - 100), falling
    back to the best archived point itself; this avoids starting the chain in
    the floor region of the density estimate.
    """
    archive_lt = np.array([target.log_target(t) for t in archive.thetas])
    best = int(np.argmax(archive_lt))
    threshold = float(archive_lt[best]) - START_LOG_TARGET_DROP
    for _ in range(START_MAX_TRIES):
        candidate = spec.prior.sample(rng)
        if target.log_target(candidate) > threshold:
            return candidate
    return archive.thetas[best]


def run_ilues_agpr(
    spec: ProblemSpec,
    settings: PipelineSettings,
    seed: int,
    checkpoint: Optional[Callable[[EvaluationArchive, list[IterationRecord]], None]] = None,
) -> PipelineResult:
    """Full run; any error triggers the checkpoint callback before propagating."""
    records: list[IterationRecord] = []
    archive = EvaluationArchive(spec.dim_theta)
    try:
        return _run(spec, settings, seed, records, archive)
    except BaseException:
        if checkpoint is not None:
            checkpoint(archive, records)
        raise


def _run(
    spec: ProblemSpec,
    settings: PipelineSettings,
    seed: int,
    records: list[IterationRecord],
    archive: EvaluationArchive,
) -> PipelineResult:
    cfg = LocalUpdateConfig(alpha=settings.alpha)
    ens, seeded_archive = ilues_run(
        spec,
        settings.n_members,
        settings.initial_iters,
        cfg,
        substream(seed, _STREAM_ILUES_INIT),
    )
    seeded_gens = seeded_archive.generations
    for g in np.unique(seeded_gens):
        mask = seeded_gens == g
        archive.extend(
            seeded_archive.thetas[mask], seeded_archive.log_posts[mask], generation=int(g)
        )

    box_widths = spec.prior.widths
    p_hat = kde_fit(ens.members, zero_variance_widths=box_widths)

    kl_history: list[float] = []
    hp = GpHyperparameters(jitter=settings.gp_jitter or 0.0)
    result_mcmc: Optional[McmcResult] = None
    converged = False
    n_updates = 0

    for n in range(settings.n_max + 1):
        tic = time.perf_counter()

        training = build_training_targets(archive, p_hat)
        init_hp = GpHyperparameters(
            signal_variance=max(float(np.var(training.targets)), 1e-6),
            lengthscale=hp.lengthscale,
            jitter=settings.gp_jitter,
        )
        fit_result = optimize_hyperparameters(
            training.inputs, training.targets, init_hp, iters=settings.gp_opt_iters
        )
        hp = fit_result.hp
        surrogate = gp_fit(training.inputs, training.targets, hp)

        rng_kmeans = substream(seed, _STREAM_KMEANS, n)
        k = elbow_select_k(
            ens.members, settings.k_max, rng_kmeans, settings.kmeans_restarts
        )
        clustering = kmeans(ens.members, k, rng_kmeans, settings.kmeans_restarts)
        gm0 = gm_from_clusters(ens.members, clustering, settings.epsilon_scale)

        target = TargetDensity(surrogate=surrogate, density=p_hat, box=spec.prior)
        theta0 = _draw_start(spec, target, archive, substream(seed, _STREAM_START, n))
        result_mcmc = mcmc_run(
            target,
            gm0,
            settings.chain_length,
            settings.burn_in_fraction,
            substream(seed, _STREAM_MCMC, n),
            theta0,
        )

        p_next = kde_fit(result_mcmc.samples, zero_variance_widths=box_widths)
        kl = kl_divergence_estimate(p_hat, p_next)
        kl_history.append(kl)
        p_hat = p_next

        stop, _ = convergence_check(kl_history, settings.delta_kl, settings.n_kl_max)
        if not stop:
            ens = ilues_step(ens, spec, cfg, substream(seed, _STREAM_ILUES, n))
            n_updates += 1
            log_posts = np.array(
                [
                    -spec.prior.log_volume + log_likelihood_from_prediction(spec, p)
                    for p in ens.predictions
                ]
            )
            archive.extend(
                ens.members, log_posts, generation=settings.initial_iters + n_updates
            )

        records.append(
            IterationRecord(
                n=n,
                kl=kl,
                accept_rate=result_mcmc.diagnostics.acceptance_rate,
                k_clusters=k,
                forward_calls=spec.counter.count,
                wall_ms=(time.perf_counter() - tic) * 1e3,
            )
        )
        if stop:
            converged = True
            break

    assert result_mcmc is not None
    return PipelineResult(
        samples=result_mcmc.samples,
        sample_log_targets=result_mcmc.log_targets,
        records=records,
        archive=archive,
        kl_history=kl_history,
        converged=converged,
        n_ensemble_updates=n_updates,
        final_density=p_hat,
        final_ensemble=ens,
        seed=seed,
    )
