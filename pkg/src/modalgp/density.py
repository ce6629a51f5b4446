"""Gaussian product-kernel density estimation and Monte-Carlo KL divergence.

Density estimates stand in for the evolving auxiliary distribution: each
iteration's sample set becomes a KDE whose log density feeds both the
surrogate's training targets and the next sampling target.  The log density
is floored a fixed distance below its own peak so far-field evaluations stay
bounded instead of exploding the surrogate's dynamic range.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.typing import NDArray

from .problem import InputError

Array = NDArray[np.float64]

LOG_FLOOR_DROP = 50.0
_CHUNK = 512


@dataclass(frozen=True)
class DensityEstimate:
    """Fitted KDE: support samples, per-coordinate bandwidths, cached floor."""

    samples: Array        # (N, M)
    bandwidths: Array     # (M,)
    floor: float          # lower bound on the log density

    def __post_init__(self) -> None:
        scaled = self.samples / self.bandwidths
        object.__setattr__(self, "_scaled", scaled)
        object.__setattr__(self, "_scaled_sq", np.sum(scaled**2, axis=1))
        log_norm = (
            -np.log(self.n_samples)
            - np.sum(np.log(self.bandwidths))
            - 0.5 * self.dim * np.log(2.0 * np.pi)
        )
        object.__setattr__(self, "_log_norm", float(log_norm))

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def _raw_log_pdf(self, thetas: Array) -> Array:
        """Unfloored KDE log density at each row of thetas, chunked log-sum-exp."""
        scaled = self._scaled
        out = np.empty(thetas.shape[0])
        for start in range(0, thetas.shape[0], _CHUNK):
            block = thetas[start : start + _CHUNK] / self.bandwidths
            d2 = (
                np.sum(block**2, axis=1)[:, None]
                + self._scaled_sq[None, :]
                - 2.0 * block @ scaled.T
            )
            d2 = np.maximum(d2, 0.0)
            m = -0.5 * d2.min(axis=1)
            out[start : start + _CHUNK] = (
                m + np.log(np.sum(np.exp(-0.5 * d2 - m[:, None]), axis=1)) + self._log_norm
            )
        return out

    def _raw_log_pdf_single(self, theta: Array) -> float:
        z = theta / self.bandwidths
        d2 = np.maximum(self._scaled_sq - 2.0 * (self._scaled @ z) + z @ z, 0.0)
        m = -0.5 * float(d2.min())
        return m + float(np.log(np.sum(np.exp(-0.5 * d2 - m)))) + self._log_norm


def kde_fit(samples: Array, zero_variance_widths: Optional[Array] = None) -> DensityEstimate:
    """Fit a Gaussian product-kernel KDE with per-coordinate Silverman bandwidths.

    ``h_d = sigma_d * (4 / ((M + 2) N)) ** (1 / (M + 4))``.  A coordinate with
    no spread gets 1e-6 times the corresponding entry of
    ``zero_variance_widths`` (typically the prior box widths).
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    n, dim = samples.shape
    if n < 2:
        raise InputError("kde_fit needs at least 2 samples")
    sigma = samples.std(axis=0, ddof=1)
    if np.all(sigma <= 0.0):
        raise InputError("kde_fit needs at least one coordinate with nonzero variance")
    factor = (4.0 / ((dim + 2) * n)) ** (1.0 / (dim + 4))
    bandwidths = sigma * factor
    degenerate = bandwidths <= 0.0
    if np.any(degenerate):
        if zero_variance_widths is None:
            raise InputError(
                "zero-variance coordinate present; supply zero_variance_widths"
            )
        widths = np.atleast_1d(np.asarray(zero_variance_widths, dtype=float))
        bandwidths = np.where(degenerate, 1e-6 * widths, bandwidths)

    de = DensityEstimate(samples=samples, bandwidths=bandwidths, floor=-np.inf)
    support_logs = de._raw_log_pdf(samples)
    floor = float(np.max(support_logs) - LOG_FLOOR_DROP)
    return DensityEstimate(samples=samples, bandwidths=bandwidths, floor=floor)


def kde_log_pdf(de: DensityEstimate, theta: Array) -> float:
    """Floored KDE log density at one point."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (de.dim,):
        raise InputError(f"theta must have shape ({de.dim},), got {theta.shape}")
    return max(de._raw_log_pdf_single(theta), de.floor)


def kde_log_pdf_batch(de: DensityEstimate, thetas: Array) -> Array:
    """Floored KDE log density at each row of thetas."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    return np.maximum(de._raw_log_pdf(thetas), de.floor)


def kl_divergence_estimate(
    p: DensityEstimate, q: DensityEstimate, eval_samples: Optional[Array] = None
) -> float:
    """Monte-Carlo KL(p || q), clamped nonnegative.

    Averages log p - log q over ``eval_samples`` (p's own support samples by
    default, which should be draws from p).
    """
    pts = p.samples if eval_samples is None else np.atleast_2d(np.asarray(eval_samples, float))
    gap = kde_log_pdf_batch(p, pts) - kde_log_pdf_batch(q, pts)
    return max(0.0, float(np.mean(gap)))
