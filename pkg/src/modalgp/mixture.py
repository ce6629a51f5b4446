"""K-means clustering, elbow-based K selection, and the adaptive Gaussian mixture.

The mixture doubles as the MCMC proposal: cluster structure of an ensemble
initializes it, and every realized chain state folds into the component that
claims it (counts, weights, mean, covariance) through a recursive update.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from numpy.typing import NDArray

from .problem import InputError

Array = NDArray[np.float64]

KMEANS_MAX_ITER = 100


@dataclass(frozen=True)
class ClusteringResult:
    assignments: NDArray[np.int64]
    centroids: Array
    wcss: float

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    def sizes(self) -> NDArray[np.int64]:
        return np.bincount(self.assignments, minlength=self.k).astype(np.int64)


def _lloyd(
    points: Array, centroids: Array, trace: list[float] | None = None
) -> tuple[NDArray[np.int64], Array, float]:
    """Lloyd iteration to an assignment fixpoint (or the iteration cap)."""
    k = centroids.shape[0]
    assignments = np.full(points.shape[0], -1, dtype=np.int64)
    for _ in range(KMEANS_MAX_ITER):
        d2 = np.sum((points[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
        new_assignments = np.argmin(d2, axis=1)
        for c in range(k):
            if not np.any(new_assignments == c):
                # reseed an empty cluster from the farthest point
                far = int(np.argmax(d2[np.arange(points.shape[0]), new_assignments]))
                centroids[c] = points[far]
                new_assignments[far] = c
        if trace is not None:
            trace.append(
                float(np.sum(d2[np.arange(points.shape[0]), new_assignments]))
            )
        if np.array_equal(new_assignments, assignments):
            break
        assignments = new_assignments
        for c in range(k):
            centroids[c] = points[assignments == c].mean(axis=0)
    d2 = np.sum((points[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
    wcss = float(np.sum(d2[np.arange(points.shape[0]), assignments]))
    return assignments, centroids, wcss


def kmeans(
    points: Array, k: int, rng: np.random.Generator, restarts: int = 8
) -> ClusteringResult:
    """Best-of-restarts Lloyd's algorithm; empty clusters reseed from the farthest point."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n = points.shape[0]
    if not 1 <= k <= n:
        raise InputError(f"need 1 <= k <= {n} points, got k={k}")
    best: ClusteringResult | None = None
    for _ in range(max(1, restarts)):
        seeds = rng.choice(n, size=k, replace=False)
        assignments, centroids, wcss = _lloyd(points, points[seeds].copy())
        if best is None or wcss < best.wcss:
            best = ClusteringResult(assignments, centroids, wcss)
    assert best is not None
    return best


def elbow_select_k(
    points: Array, k_max: int, rng: np.random.Generator, restarts: int = 8
) -> int:
    """Pick K by the largest perpendicular distance from the WCSS chord.

    Runs k-means for K = 1..k_max and measures how far each (K, WCSS_K)
    point falls from the straight line joining the endpoints; a flat curve
    (WCSS at K=1 already ~0) short-circuits to 1.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if k_max < 1:
        raise InputError("k_max must be >= 1")
    k_max = min(k_max, points.shape[0])
    wcss = np.array(
        [kmeans(points, k, rng, restarts).wcss for k in range(1, k_max + 1)]
    )
    scatter_scale = points.shape[0] * (1.0 + float(np.mean(points**2)))
    if wcss[0] <= 1e-12 * scatter_scale or k_max == 1:
        return 1
    p0 = np.array([1.0, wcss[0]])
    p1 = np.array([float(k_max), wcss[-1]])
    chord = p1 - p0
    norm = float(np.linalg.norm(chord))
    ks = np.arange(1, k_max + 1, dtype=float)
    cross = chord[0] * (wcss - p0[1]) - chord[1] * (ks - p0[0])
    distances = np.abs(cross) / norm
    return int(np.argmax(distances)) + 1


@dataclass(frozen=True)
class GaussianMixtureState:
    """Weights, means, covariances and assimilation counts of a K-component mixture."""

    weights: Array
    means: Array        # (K, M)
    covs: Array         # (K, M, M)
    counts: NDArray[np.int64]
    total: int
    epsilon: float
    degraded: bool = False

    def __post_init__(self) -> None:
        if abs(float(np.sum(self.weights)) - 1.0) > 1e-9:
            raise InputError("mixture weights must sum to 1")
        chols = np.linalg.cholesky(self.covs)  # raises if any not positive definite
        object.__setattr__(self, "_chols", chols)
        log_dets = np.sum(np.log(np.diagonal(chols, axis1=1, axis2=2)), axis=1)
        object.__setattr__(self, "_half_log_dets", log_dets)

    @property
    def k(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def cov_chols(self) -> Array:
        """Lower Cholesky factor of each component covariance, (K, M, M)."""
        return self._chols


def gm_from_clusters(
    points: Array, clustering: ClusteringResult, epsilon_scale: float = 1e-6
) -> GaussianMixtureState:
    """Initialize a mixture from k-means output.

    Component covariances are the per-cluster empirical covariances plus
    epsilon times the identity, with epsilon = ``epsilon_scale`` times the
    mean diagonal of those covariances; singleton clusters fall back to
    epsilon times the global per-coordinate variance.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    k, dim = clustering.centroids.shape
    sizes = clustering.sizes()
    raw_covs: list[Array | None] = []
    for c in range(k):
        members = points[clustering.assignments == c]
        raw_covs.append(np.cov(members.T).reshape(dim, dim) if sizes[c] >= 2 else None)
    diag_means = [float(np.mean(np.diag(cov))) for cov in raw_covs if cov is not None]
    global_var = float(np.mean(np.var(points, axis=0)))
    epsilon = epsilon_scale * (np.mean(diag_means) if diag_means else max(global_var, 1.0))
    covs = np.empty((k, dim, dim))
    for c in range(k):
        if raw_covs[c] is None:
            covs[c] = epsilon * max(global_var, epsilon) * np.eye(dim)
        else:
            covs[c] = raw_covs[c] + epsilon * np.eye(dim)
    total = int(sizes.sum())
    return GaussianMixtureState(
        weights=sizes / total,
        means=clustering.centroids.copy(),
        covs=covs,
        counts=sizes,
        total=total,
        epsilon=float(epsilon),
    )


def _component_log_pdfs(gm: GaussianMixtureState, theta: Array) -> Array:
    theta = np.asarray(theta, dtype=float)
    diffs = theta[None, :] - gm.means                       # (K, M)
    z = solve_triangular_batch(gm.cov_chols, diffs)
    return (
        -0.5 * np.sum(z**2, axis=1)
        - gm._half_log_dets
        - 0.5 * gm.dim * np.log(2.0 * np.pi)
    )


def solve_triangular_batch(chols: Array, rhs: Array) -> Array:
    """Forward-substitute each lower factor against its own right-hand side row."""
    k, m, _ = chols.shape
    out = np.empty((k, m))
    for i in range(m):
        out[:, i] = (rhs[:, i] - np.einsum("kj,kj->k", chols[:, i, :i], out[:, :i])) / chols[:, i, i]
    return out


def gm_log_pdf(gm: GaussianMixtureState, theta: Array) -> float:
    """Mixture log density via log-sum-exp."""
    logs = _component_log_pdfs(gm, theta) + np.log(gm.weights)
    m = float(np.max(logs))
    return m + float(np.log(np.sum(np.exp(logs - m))))


def gm_sample(gm: GaussianMixtureState, rng: np.random.Generator) -> Array:
    """Draw one point: component by weight, then its Gaussian."""
    c = int(rng.choice(gm.k, p=gm.weights))
    return gm.means[c] + gm.cov_chols[c] @ rng.standard_normal(gm.dim)


def assign_mode(gm: GaussianMixtureState, theta: Array) -> int:
    """Index of the maximum-responsibility component (ties to the lowest index)."""
    return int(np.argmax(_component_log_pdfs(gm, theta) + np.log(gm.weights)))


def gm_adapt(gm: GaussianMixtureState, theta_new: Array) -> GaussianMixtureState:
    """Fold one realized sample into the mixture.

    The owning component i (by responsibility) gets its count, mean and
    covariance updated; all other components stay bit-identical and the
    weights are refreshed to counts/total.  The covariance recursion needs an
    existing sample covariance, so a component seen for the first time keeps
    its covariance until its count reaches 2.
    """
    theta_new = np.asarray(theta_new, dtype=float)
    if theta_new.shape != (gm.dim,):
        raise InputError(f"theta_new must have shape ({gm.dim},)")
    i = assign_mode(gm, theta_new)

    counts = gm.counts.copy()
    counts[i] += 1
    m_i = int(counts[i])
    total = gm.total + 1
    weights = counts / total

    means = gm.means.copy()
    means[i] = theta_new / m_i + (m_i - 1) / m_i * gm.means[i]

    covs = gm.covs.copy()
    degraded = gm.degraded
    if m_i >= 2:
        diff = theta_new - means[i]
        updated = (
            (np.outer(diff, diff) / m_i + gm.epsilon * np.eye(gm.dim)) / m_i
            + (m_i - 2) / (m_i - 1) * gm.covs[i]
        )
        try:
            np.linalg.cholesky(updated)
            covs[i] = updated
        except np.linalg.LinAlgError:
            degraded = True

    return replace(
        gm,
        weights=weights,
        means=means,
        covs=covs,
        counts=counts,
        total=total,
        degraded=degraded,
    )
