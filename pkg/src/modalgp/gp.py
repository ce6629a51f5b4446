"""Gaussian-process regression with a squared-exponential kernel.

Fitting builds a Cholesky factorization of the kernel matrix (with escalating
diagonal jitter, since ensemble-generated training points cluster tightly),
prediction returns the posterior mean and variance under a constant prior
mean, and hyperparameters are tuned by gradient ascent on the log marginal
likelihood in (log signal variance, log lengthscale) coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .problem import InputError

Array = NDArray[np.float64]

JITTER_INIT_FACTOR = 1e-8
JITTER_MAX_FACTOR = 1e-2


class GpFitError(RuntimeError):
    """Kernel matrix stayed non positive definite after maximum jitter escalation."""


@dataclass(frozen=True)
class GpHyperparameters:
    """Isotropic squared-exponential kernel parameters."""

    signal_variance: float = 1.0
    lengthscale: float = 1.0
    jitter: float = 0.0

    def __post_init__(self) -> None:
        if self.signal_variance <= 0 or self.lengthscale <= 0 or self.jitter < 0:
            raise InputError("require signal_variance > 0, lengthscale > 0, jitter >= 0")


def _as_matrix(x: Array) -> Array:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    return x


def _sq_dists(a: Array, b: Array) -> Array:
    """Pairwise squared Euclidean distances between row sets."""
    aa = np.sum(a**2, axis=1)[:, None]
    bb = np.sum(b**2, axis=1)[None, :]
    return np.maximum(aa + bb - 2.0 * (a @ b.T), 0.0)


def kernel_eval(hp: GpHyperparameters, x: Array, x_other: Array) -> float:
    """Squared-exponential kernel value between two points."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x_other = np.atleast_1d(np.asarray(x_other, dtype=float))
    if x.shape != x_other.shape:
        raise InputError("kernel arguments must have equal dimension")
    d2 = float(np.sum((x - x_other) ** 2))
    return hp.signal_variance * np.exp(-d2 / (2.0 * hp.lengthscale**2))


def _kernel_matrix(hp: GpHyperparameters, a: Array, b: Array) -> Array:
    return hp.signal_variance * np.exp(-_sq_dists(a, b) / (2.0 * hp.lengthscale**2))


def _deduplicate(inputs: Array, targets: Array, tol: float = 1e-12) -> tuple[Array, Array]:
    """Drop near-duplicate rows, keeping the latest target for each location."""
    keep: list[int] = []
    for i in range(inputs.shape[0] - 1, -1, -1):
        if all(np.linalg.norm(inputs[i] - inputs[k]) > tol for k in keep):
            keep.append(i)
    keep.reverse()
    return inputs[keep], targets[keep]


@dataclass(frozen=True)
class GpSurrogate:
    """Fitted GP ready for O(N)-per-point mean/variance evaluation."""

    hp: GpHyperparameters
    inputs: Array              # standardized training rows
    mean_constant: float
    input_loc: Array
    input_scale: Array
    chol: Array                # lower factor of K + jitter I
    weights: Array             # (K + jitter I)^-1 (y - mean)
    targets: Array
    effective_jitter: float

    @property
    def n_training(self) -> int:
        return self.inputs.shape[0]

    def _standardize(self, x: Array) -> Array:
        return (_as_matrix(x) - self.input_loc) / self.input_scale

    def predict(self, x: Array) -> tuple[float, float]:
        mean, var = self.predict_batch(np.atleast_2d(np.asarray(x, dtype=float)))
        return float(mean[0]), float(var[0])

    def predict_mean(self, x: Array) -> float:
        """Posterior mean only; skips the variance solve."""
        z = (np.asarray(x, dtype=float) - self.input_loc) / self.input_scale
        d2 = np.maximum(
            np.sum(self.inputs**2, axis=1) - 2.0 * (self.inputs @ z) + z @ z, 0.0
        )
        k_star = self.hp.signal_variance * np.exp(-d2 / (2.0 * self.hp.lengthscale**2))
        return float(self.mean_constant + k_star @ self.weights)

    def predict_batch(self, x: Array) -> tuple[Array, Array]:
        """Posterior mean and (clamped nonnegative) variance at each row of x."""
        z = self._standardize(x)
        if z.shape[1] != self.inputs.shape[1]:
            raise InputError(
                f"prediction input dimension {z.shape[1]} != training dimension"
                f" {self.inputs.shape[1]}"
            )
        k_star = _kernel_matrix(self.hp, z, self.inputs)
        mean = self.mean_constant + k_star @ self.weights
        v = solve_triangular(self.chol, k_star.T, lower=True)
        var = self.hp.signal_variance - np.sum(v**2, axis=0)
        return mean, np.maximum(var, 0.0)


def gp_fit(
    inputs: Array,
    targets: Array,
    hp: GpHyperparameters,
    mean_constant: Optional[float] = None,
    standardize: bool = True,
) -> GpSurrogate:
    """Fit a GP to (inputs, targets).

    Inputs are standardized per coordinate by default (constant coordinates
    keep unit scale); the prior mean defaults to the mean of the targets.
    Diagonal jitter starts at max(hp.jitter, 1e-8 * signal variance) and is
    escalated tenfold until the Cholesky factorization succeeds, up to
    1e-2 * signal variance.
    """
    x = _as_matrix(inputs)
    y = np.atleast_1d(np.asarray(targets, dtype=float))
    if x.shape[0] != y.size or x.shape[0] < 1:
        raise InputError("need N >= 1 training rows with matching target count")
    x, y = _deduplicate(x, y)

    if standardize:
        loc = x.mean(axis=0)
        scale = x.std(axis=0)
        scale = np.where(scale > 1e-12, scale, 1.0)
    else:
        loc = np.zeros(x.shape[1])
        scale = np.ones(x.shape[1])
    z = (x - loc) / scale

    mu0 = float(np.mean(y)) if mean_constant is None else float(mean_constant)
    base = _kernel_matrix(hp, z, z)
    jitter = max(hp.jitter, JITTER_INIT_FACTOR * hp.signal_variance)
    jitter_cap = max(hp.jitter, JITTER_MAX_FACTOR * hp.signal_variance)
    while True:
        try:
            chol = np.linalg.cholesky(base + jitter * np.eye(z.shape[0]))
            break
        except np.linalg.LinAlgError:
            if jitter >= jitter_cap:
                raise GpFitError(
                    f"kernel matrix not positive definite at jitter {jitter:g}"
                ) from None
            jitter = min(jitter * 10.0, jitter_cap)

    resid = y - mu0
    weights = cho_solve((chol, True), resid)
    return GpSurrogate(
        hp=hp,
        inputs=z,
        mean_constant=mu0,
        input_loc=loc,
        input_scale=scale,
        chol=chol,
        weights=weights,
        targets=y,
        effective_jitter=jitter,
    )


def gp_predict(surrogate: GpSurrogate, x: Array) -> tuple[float, float]:
    """Posterior mean and variance at a single point."""
    return surrogate.predict(x)


def _prepare_lml(inputs: Array, targets: Array, standardize: bool):
    x = _as_matrix(inputs)
    y = np.atleast_1d(np.asarray(targets, dtype=float))
    x, y = _deduplicate(x, y)
    if standardize:
        loc = x.mean(axis=0)
        scale = x.std(axis=0)
        scale = np.where(scale > 1e-12, scale, 1.0)
        x = (x - loc) / scale
    return x, y, _sq_dists(x, x)


def _lml_value_grad(
    d2: Array, resid: Array, hp: GpHyperparameters
) -> tuple[float, Array]:
    """Log marginal likelihood and gradient wrt (log signal_variance, log lengthscale)."""
    n = resid.size
    corr = np.exp(-d2 / (2.0 * hp.lengthscale**2))
    k = hp.signal_variance * corr
    jitter = max(hp.jitter, JITTER_INIT_FACTOR * hp.signal_variance)
    cho = cho_factor(k + jitter * np.eye(n), lower=True)
    alpha = cho_solve(cho, resid)
    value = float(
        -0.5 * resid @ alpha
        - np.sum(np.log(np.diag(cho[0])))
        - 0.5 * n * np.log(2.0 * np.pi)
    )
    k_inv = cho_solve(cho, np.eye(n))
    outer = np.outer(alpha, alpha) - k_inv
    dk_dlog_sf2 = k.copy()
    if jitter > hp.jitter:  # relative-jitter branch scales with signal variance
        dk_dlog_sf2 += jitter * np.eye(n)
    dk_dlog_ell = k * (d2 / hp.lengthscale**2)
    grad = np.array(
        [
            0.5 * np.sum(outer * dk_dlog_sf2),
            0.5 * np.sum(outer * dk_dlog_ell),
        ]
    )
    return value, grad


def log_marginal_likelihood(
    inputs: Array,
    targets: Array,
    hp: GpHyperparameters,
    mean_constant: Optional[float] = None,
    standardize: bool = True,
) -> float:
    """Log marginal likelihood of the targets under the GP prior."""
    x, y, d2 = _prepare_lml(inputs, targets, standardize)
    mu0 = float(np.mean(y)) if mean_constant is None else float(mean_constant)
    value, _ = _lml_value_grad(d2, y - mu0, hp)
    return value


def log_marginal_likelihood_grad(
    inputs: Array,
    targets: Array,
    hp: GpHyperparameters,
    mean_constant: Optional[float] = None,
    standardize: bool = True,
) -> Array:
    """Gradient of the log marginal likelihood wrt (log sigma_f^2, log ell)."""
    x, y, d2 = _prepare_lml(inputs, targets, standardize)
    mu0 = float(np.mean(y)) if mean_constant is None else float(mean_constant)
    _, grad = _lml_value_grad(d2, y - mu0, hp)
    return grad


@dataclass(frozen=True)
class HyperparameterFit:
    """Result of hyperparameter optimization."""

    hp: GpHyperparameters
    log_marginal: float
    warned: bool
    n_steps: int


def optimize_hyperparameters(
    inputs: Array,
    targets: Array,
    init: GpHyperparameters,
    iters: int = 200,
    standardize: bool = True,
) -> HyperparameterFit:
    """Gradient ascent with backtracking on the log marginal likelihood.

    The returned hyperparameters never score below the initial ones.  If not
    a single candidate step evaluates to a positive-definite system the
    initial hyperparameters come back unchanged with ``warned=True``.
    """
    x, y, d2 = _prepare_lml(inputs, targets, standardize)
    if y.size < 2:
        raise InputError("hyperparameter optimization needs at least 2 training rows")
    resid = y - float(np.mean(y))

    def evaluate(log_params: Array):
        if np.any(np.abs(log_params) > 30.0):
            return None
        hp = replace(
            init,
            signal_variance=float(np.exp(log_params[0])),
            lengthscale=float(np.exp(log_params[1])),
        )
        try:
            value_grad = _lml_value_grad(d2, resid, hp)
        except np.linalg.LinAlgError:
            return None
        if not np.isfinite(value_grad[0]):
            return None
        return value_grad

    params = np.log([init.signal_variance, init.lengthscale])
    state = evaluate(params)
    if state is None:
        return HyperparameterFit(init, -np.inf, warned=True, n_steps=0)
    value, grad = state

    warned = False
    steps_taken = 0
    for _ in range(iters):
        grad_norm = np.linalg.norm(grad)
        if grad_norm < 1e-10:
            break
        step = min(1.0, 2.0 / grad_norm)  # at most 2 log-units per move
        moved = False
        n_tried = n_pd_failed = 0
        while step >= 1e-10:
            trial_params = params + step * grad
            trial = evaluate(trial_params)
            n_tried += 1
            if trial is None:
                n_pd_failed += 1
            elif trial[0] > value + 1e-12:
                params, (value, grad) = trial_params, trial
                moved = True
                break
            step *= 0.5
        steps_taken += 1
        if not moved:
            warned = steps_taken == 1 and n_pd_failed == n_tried
            break

    hp = replace(
        init,
        signal_variance=float(np.exp(params[0])),
        lengthscale=float(np.exp(params[1])),
    )
    return HyperparameterFit(hp, value, warned=warned, n_steps=steps_taken)
