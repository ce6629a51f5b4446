"""Forward models: 2-d heat release, 2-d Poisson source, analytic bimodal toy.

The two PDE models read a handful of sensors off finite-difference solutions;
the toy model maps parameters straight to a known two-component Gaussian
mixture log density and is the cheap end-to-end test target.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sparse
import scipy.sparse.linalg as sparse_linalg
from numpy.typing import NDArray

from .problem import BoxPrior, ForwardCounter, InputError, ProblemSpec, SolverError

Array = NDArray[np.float64]


def _bilinear(field_vals: Array, xs: Array, ys: Array, point: Array) -> float:
    """Bilinear interpolation of a nodal field at one point.

    ``field_vals`` is indexed [ix, iy] on the tensor grid (xs, ys).
    """
    x, y = float(point[0]), float(point[1])
    ix = int(np.clip(np.searchsorted(xs, x) - 1, 0, xs.size - 2))
    iy = int(np.clip(np.searchsorted(ys, y) - 1, 0, ys.size - 2))
    tx = (x - xs[ix]) / (xs[ix + 1] - xs[ix])
    ty = (y - ys[iy]) / (ys[iy + 1] - ys[iy])
    f = field_vals
    return float(
        f[ix, iy] * (1 - tx) * (1 - ty)
        + f[ix + 1, iy] * tx * (1 - ty)
        + f[ix, iy + 1] * (1 - tx) * ty
        + f[ix + 1, iy + 1] * tx * ty
    )


def gaussian_blob(xs: Array, ys: Array, center: Array, width: float, mass: float) -> Array:
    """Pointwise nodal values of mass/(2 pi w^2) exp(-|x-c|^2 / (2 w^2))."""
    dx2 = (xs[:, None] - center[0]) ** 2 + (ys[None, :] - center[1]) ** 2
    return mass / (2.0 * np.pi * width**2) * np.exp(-dx2 / (2.0 * width**2))


@dataclass(frozen=True)
class Heat2dModel:
    """Diffusion of a Gaussian contaminant release on [-1,1]^2.

    Explicit forward-Euler finite differences with zero Dirichlet walls; the
    unknown parameter is the release location, read out at sensor positions
    at the final time.
    """

    diffusion: float = 1.0
    mass: float = 15.0
    source_radius: float = 0.1
    dx: float = 0.025
    dt: float = 1.25e-4
    final_time: float = 0.04
    sensors: tuple[tuple[float, float], ...] = ((-0.4, -0.4), (0.0, 0.4))

    def __post_init__(self) -> None:
        if self.diffusion * self.dt / self.dx**2 > 0.25 + 1e-12:
            raise InputError("explicit scheme unstable: need D*dt/dx^2 <= 1/4")
        for s in self.sensors:
            if not (abs(s[0]) < 1.0 and abs(s[1]) < 1.0):
                raise InputError(f"sensor {s} must lie strictly inside [-1,1]^2")

    @cached_property
    def _grid(self) -> Array:
        n = int(round(2.0 / self.dx)) + 1
        return np.linspace(-1.0, 1.0, n)

    @property
    def n_steps(self) -> int:
        return int(round(self.final_time / self.dt))

    def solve_field(self, xi: Array) -> Array:
        """Concentration field at the final time for a release at xi.

        Releases exactly on the wall are admitted (box-clipped ensemble
        members land there); the Dirichlet condition immediately absorbs the
        on-wall share of the source.
        """
        xi = np.asarray(xi, dtype=float)
        if not (abs(xi[0]) <= 1.0 and abs(xi[1]) <= 1.0):
            raise InputError(f"release location {xi} must lie inside [-1,1]^2")
        g = self._grid
        u = gaussian_blob(g, g, xi, self.source_radius, self.mass)
        u[0, :] = u[-1, :] = u[:, 0] = u[:, -1] = 0.0
        r = self.diffusion * self.dt / self.dx**2
        for _ in range(self.n_steps):
            u[1:-1, 1:-1] += r * (
                u[2:, 1:-1]
                + u[:-2, 1:-1]
                + u[1:-1, 2:]
                + u[1:-1, :-2]
                - 4.0 * u[1:-1, 1:-1]
            )
        return u

    def observe(self, theta: Array) -> Array:
        u = self.solve_field(theta)
        g = self._grid
        return np.array([_bilinear(u, g, g, np.asarray(s, dtype=float)) for s in self.sensors])

    def total_mass(self, u: Array) -> float:
        return float(np.sum(u) * self.dx**2)

    def free_space_solution(self, xi: Array, point: Array) -> float:
        """Unbounded-domain closed form; accurate while boundaries stay cold."""
        w2 = self.source_radius**2 + 2.0 * self.diffusion * self.final_time
        r2 = float(np.sum((np.asarray(point, float) - np.asarray(xi, float)) ** 2))
        return self.mass / (2.0 * np.pi * w2) * np.exp(-r2 / (2.0 * w2))


def heat2d_observe(model: Heat2dModel, xi: Array) -> Array:
    """Sensor readings at the final time for a release at xi."""
    return model.observe(np.asarray(xi, dtype=float))


def _poisson_sensor_grid() -> tuple[tuple[float, float], ...]:
    pts = np.linspace(0.2, 0.8, 3)
    return tuple((float(x), float(y)) for y in pts for x in pts)


@dataclass(frozen=True)
class Poisson2dModel:
    """Steady diffusion on [0,1]^2 driven by a Gaussian source of signed strength.

    Zero Dirichlet on the left/right walls, zero flux on top/bottom (ghost
    nodes, rows half-weighted so the eliminated system stays symmetric
    positive definite).  The system matrix is factorized once; each call only
    assembles a right-hand side.  The source carries |s|, so observations are
    even in the strength parameter.
    """

    permeability: float = 0.2
    source_width: float = 0.05
    n_nodes: int = 33
    sensors: tuple[tuple[float, float], ...] = field(default_factory=_poisson_sensor_grid)

    @cached_property
    def _grid(self) -> Array:
        return np.linspace(0.0, 1.0, self.n_nodes)

    @cached_property
    def _system(self):
        """Sparse SPD system for unknowns u[1:-1, :] (columns x, rows y)."""
        n = self.n_nodes
        h = 1.0 / (n - 1)
        nx, ny = n - 2, n
        a = self.permeability

        def idx(i: int, j: int) -> int:
            return i * ny + j

        rows, cols, vals = [], [], []
        weights = np.ones(ny)
        weights[0] = weights[-1] = 0.5
        for i in range(nx):
            for j in range(ny):
                w = weights[j]
                rows.append(idx(i, j))
                cols.append(idx(i, j))
                vals.append(w * 4.0 * a / h**2)
                for di in (-1, 1):
                    if 0 <= i + di < nx:
                        rows.append(idx(i, j))
                        cols.append(idx(i + di, j))
                        vals.append(-w * a / h**2)
                for dj in (-1, 1):
                    jj = j + dj
                    if jj < 0 or jj >= ny:
                        jj = j - dj  # ghost node reflection
                    rows.append(idx(i, j))
                    cols.append(idx(i, jj))
                    vals.append(-w * a / h**2)
        mat = sparse.csc_matrix(
            sparse.coo_matrix((vals, (rows, cols)), shape=(nx * ny, nx * ny))
        )
        asym = abs(mat - mat.T).max()
        if asym > 1e-12:
            raise SolverError("assembled Poisson system is not symmetric")
        return mat, sparse_linalg.factorized(mat), weights, h

    def source_field(self, xi: Array, strength: float) -> Array:
        g = self._grid
        return gaussian_blob(g, g, np.asarray(xi, dtype=float), self.source_width, abs(strength))

    def solve_field(self, xi: Array, strength: float) -> Array:
        xi = np.asarray(xi, dtype=float)
        if not (0.0 <= xi[0] <= 1.0 and 0.0 <= xi[1] <= 1.0):
            raise InputError(f"source location {xi} must lie in [0,1]^2")
        _, solve, weights, _ = self._system
        f = self.source_field(xi, strength)
        rhs = (f[1:-1, :] * weights[None, :]).ravel()
        interior = solve(rhs)
        u = np.zeros((self.n_nodes, self.n_nodes))
        u[1:-1, :] = interior.reshape(self.n_nodes - 2, self.n_nodes)
        return u

    def residual_norm(self, xi: Array, strength: float) -> float:
        """Relative residual of the linear system at the computed solution."""
        mat, _, weights, _ = self._system
        f = self.source_field(xi, strength)
        rhs = (f[1:-1, :] * weights[None, :]).ravel()
        u = self.solve_field(xi, strength)[1:-1, :].ravel()
        denom = float(np.linalg.norm(rhs))
        if denom == 0.0:
            return 0.0
        return float(np.linalg.norm(mat @ u - rhs) / denom)

    def observe(self, theta: Array) -> Array:
        theta = np.asarray(theta, dtype=float)
        u = self.solve_field(theta[:2], float(theta[2]))
        g = self._grid
        return np.array([_bilinear(u, g, g, np.asarray(s, dtype=float)) for s in self.sensors])


def poisson2d_observe(model: Poisson2dModel, xi: Array, strength: float) -> Array:
    """Sensor readings for a source at xi with signed strength."""
    xi = np.asarray(xi, dtype=float)
    return model.observe(np.array([xi[0], xi[1], strength]))


@dataclass(frozen=True)
class BimodalToyModel:
    """Equal-weight two-component Gaussian mixture used as a drop-in log likelihood."""

    center_a: Array
    center_b: Array
    cov: Array

    def __post_init__(self) -> None:
        a = np.atleast_1d(np.asarray(self.center_a, dtype=float))
        b = np.atleast_1d(np.asarray(self.center_b, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if a.shape != b.shape or cov.shape != (a.size, a.size):
            raise InputError("mode centers and covariance have incompatible shapes")
        object.__setattr__(self, "center_a", a)
        object.__setattr__(self, "center_b", b)
        object.__setattr__(self, "cov", cov)

    @cached_property
    def _chol(self) -> Array:
        return np.linalg.cholesky(self.cov)

    def _component_log_pdf(self, theta: Array, center: Array) -> float:
        z = np.linalg.solve(self._chol, np.asarray(theta, float) - center)
        log_det = 2.0 * np.sum(np.log(np.diag(self._chol)))
        d = center.size
        return float(-0.5 * (z @ z) - 0.5 * log_det - 0.5 * d * np.log(2.0 * np.pi))

    def log_density(self, theta: Array) -> float:
        la = self._component_log_pdf(theta, self.center_a)
        lb = self._component_log_pdf(theta, self.center_b)
        m = max(la, lb)
        return float(m + np.log(0.5 * np.exp(la - m) + 0.5 * np.exp(lb - m)))

    def peak_log_density(self) -> float:
        """Mixture log density at either center (equal by shared covariance)."""
        return self.log_density(self.center_a)

    def observe(self, theta: Array) -> Array:
        return np.array([self.log_density(theta)])

    def sample(self, rng: np.random.Generator, n: int) -> Array:
        picks = rng.integers(0, 2, size=n)
        centers = np.where(picks[:, None] == 0, self.center_a, self.center_b)
        return centers + rng.standard_normal((n, self.center_a.size)) @ self._chol.T

    def problem_spec(self, prior: BoxPrior, counter: ForwardCounter | None = None) -> ProblemSpec:
        """Wrap the mixture as an inverse problem whose posterior is the mixture itself.

        The pseudo data space is the scalar log density with unit noise, which
        gives ensemble updates a meaningful misfit to work with.
        """
        return ProblemSpec(
            prior=prior,
            forward=self,
            d_obs=np.array([self.peak_log_density()]),
            noise_cov=np.array([[1.0]]),
            direct_loglik=True,
            counter=counter or ForwardCounter(),
        )


def toy_observe(model: BimodalToyModel, theta: Array) -> float:
    """Exact mixture log density at theta."""
    return model.log_density(np.asarray(theta, dtype=float))
