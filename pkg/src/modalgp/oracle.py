"""Brute-force grid-quadrature reference posterior for low-dimensional problems.

Exhaustively evaluates the log unnormalized posterior at tensor-grid cell
centers over the prior box and normalizes by log-sum-exp.  The resulting cell
masses provide reference means, per-coordinate spreads and mode locations to
validate sampling output against.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.ndimage import maximum_filter

from .problem import InputError, ProblemSpec, log_unnormalized_posterior

Array = NDArray[np.float64]

MODE_MASS_THRESHOLD = 0.01
MODE_MIN_SEPARATION = 3


@dataclass(frozen=True)
class GridPosterior:
    """Cell-center coordinates, log posterior values and normalized masses."""

    axes: tuple[Array, ...]
    log_post: Array            # tensor, shape = per-axis resolutions
    masses: Array              # same shape, sums to 1
    lower: Array
    upper: Array

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def resolutions(self) -> tuple[int, ...]:
        return tuple(axis.size for axis in self.axes)

    def cell_center(self, index: tuple[int, ...]) -> Array:
        return np.array([self.axes[d][index[d]] for d in range(self.dim)])


@dataclass(frozen=True)
class GridMoments:
    mean: Array
    mse: Array                   # per-coordinate spread about the mean
    modes: list[dict]            # descending mass: {"index", "theta", "mass"}


def _cell_centers(lower: float, upper: float, resolution: int) -> Array:
    width = (upper - lower) / resolution
    return lower + width * (np.arange(resolution) + 0.5)


def _normalize(log_post: Array) -> Array:
    flat = log_post.ravel()
    m = float(np.max(flat))
    weights = np.exp(flat - m)
    return (weights / weights.sum()).reshape(log_post.shape)


def grid_posterior(
    spec: ProblemSpec,
    resolutions: Sequence[int] | int,
    mirror_axis: Optional[int] = None,
) -> GridPosterior:
    """Evaluate the posterior on a cell-centered tensor grid over the prior box.

    ``mirror_axis`` marks a coordinate the forward model depends on only
    through its absolute value (grid symmetric about 0); its negative half is
    then filled by reflection, halving the forward-call count.
    """
    dim = spec.dim_theta
    if dim > 3:
        raise InputError("grid oracle supports at most 3 parameters")
    if isinstance(resolutions, int):
        resolutions = (resolutions,) * dim
    if len(resolutions) != dim or any(r < 11 for r in resolutions):
        raise InputError("need one resolution >= 11 per axis")
    axes = tuple(
        _cell_centers(spec.prior.lower[d], spec.prior.upper[d], resolutions[d])
        for d in range(dim)
    )
    if mirror_axis is not None:
        centers = axes[mirror_axis]
        if not np.allclose(centers + centers[::-1], 0.0, atol=1e-12):
            raise InputError("mirror axis grid must be symmetric about 0")

    log_post = np.empty(tuple(resolutions))
    for index in np.ndindex(*resolutions):
        if mirror_axis is not None and axes[mirror_axis][index[mirror_axis]] < 0.0:
            continue
        theta = np.array([axes[d][index[d]] for d in range(dim)])
        log_post[index] = log_unnormalized_posterior(spec, theta)
    if mirror_axis is not None:
        n_axis = resolutions[mirror_axis]
        for i in range(n_axis // 2):
            src = [slice(None)] * dim
            dst = [slice(None)] * dim
            src[mirror_axis] = n_axis - 1 - i
            dst[mirror_axis] = i
            log_post[tuple(dst)] = log_post[tuple(src)]

    return GridPosterior(
        axes=axes,
        log_post=log_post,
        masses=_normalize(log_post),
        lower=spec.prior.lower.copy(),
        upper=spec.prior.upper.copy(),
    )


def _find_modes(masses: Array) -> list[tuple[tuple[int, ...], float]]:
    """Local maxima above threshold, deduplicated to a minimum cell separation."""
    local_max = masses >= maximum_filter(masses, size=3, mode="nearest")
    candidates = np.argwhere(local_max & (masses > MODE_MASS_THRESHOLD * masses.max()))
    ordered = sorted(map(tuple, candidates), key=lambda idx: -masses[idx])
    kept: list[tuple[int, ...]] = []
    for idx in ordered:
        separation = min(
            (max(abs(a - b) for a, b in zip(idx, k)) for k in kept), default=np.inf
        )
        if separation >= MODE_MIN_SEPARATION:
            kept.append(idx)
    return [(idx, float(masses[idx])) for idx in kept]


def grid_moments(gp: GridPosterior) -> GridMoments:
    """Mass-weighted mean, per-coordinate spread, and mode list of the grid."""
    mean = np.empty(gp.dim)
    mse = np.empty(gp.dim)
    for d in range(gp.dim):
        marginal_axes = tuple(i for i in range(gp.dim) if i != d)
        marginal = gp.masses.sum(axis=marginal_axes)
        mean[d] = float(marginal @ gp.axes[d])
        mse[d] = float(marginal @ (gp.axes[d] - mean[d]) ** 2)
    modes = [
        {"index": idx, "theta": gp.cell_center(idx), "mass": mass}
        for idx, mass in _find_modes(gp.masses)
    ]
    return GridMoments(mean=mean, mse=mse, modes=modes)


def forward_discrepancy(model_a, model_b, points: Array) -> float:
    """Scale-weighted relative difference between two forward models.

    Aggregates over the test points so that near-zero observations do not
    dominate: sqrt(sum ||Ga - Gb||^2 / sum ||Ga||^2).
    """
    num = 0.0
    den = 0.0
    for p in np.atleast_2d(np.asarray(points, dtype=float)):
        ga = np.asarray(model_a.observe(p), dtype=float)
        gb = np.asarray(model_b.observe(p), dtype=float)
        num += float(np.sum((ga - gb) ** 2))
        den += float(np.sum(ga**2))
    if den == 0.0:
        return 0.0
    return float(np.sqrt(num / den))
