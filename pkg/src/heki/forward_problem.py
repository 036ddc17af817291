"""1D elliptic forward model ``-p'' + p = f`` with point observations."""

from dataclasses import dataclass

import numpy as np

from heki.gaussian_field import Grid1D
from heki.kernels import thomas_solve


def _elliptic_bands(grid):
    n = grid.n_points
    off = -1.0 / grid.h**2
    return np.full(n - 1, off), np.full(n, 2.0 / grid.h**2 + 1.0), np.full(n - 1, off)


def solve_elliptic(f, grid):
    """Centred finite-difference solve of ``-p'' + p = f``, ``p = 0`` on the boundary.

    ``f`` may be a single field or a ``(m, n)`` stack of fields.
    """
    f = np.asarray(f, dtype=float)
    if f.shape[-1] != grid.n_points:
        raise ValueError(f"source has length {f.shape[-1]}, grid has {grid.n_points} nodes")
    sub, diag, sup = _elliptic_bands(grid)
    return thomas_solve(sub, diag, sup, f)


def default_obs_points(n_points, n_obs=16):
    """Equispaced interior node indices (0-based) ``round(I j / (K+1)) - 1``."""
    idx = np.floor(n_points * np.arange(1, n_obs + 1) / (n_obs + 1) + 0.5).astype(int) - 1
    return np.clip(idx, 0, n_points - 1)


@dataclass(frozen=True)
class LinearForwardOp:
    """``G(f) = A f``: observed nodal values of the elliptic solution."""

    matrix: np.ndarray
    obs_points: np.ndarray
    grid: Grid1D

    @property
    def n_obs(self):
        return self.matrix.shape[0]

    def __call__(self, u):
        return np.asarray(u, dtype=float) @ self.matrix.T


def assemble_forward_matrix(grid, obs_points=None):
    obs = default_obs_points(grid.n_points) if obs_points is None else np.asarray(obs_points)
    obs = obs.astype(int)
    if obs.ndim != 1 or obs.size == 0:
        raise ValueError("obs_points must be a non-empty 1D index array")
    if obs.min() < 0 or obs.max() >= grid.n_points:
        raise IndexError(f"observation index out of range [0, {grid.n_points})")
    if np.unique(obs).size != obs.size:
        raise ValueError("observation indices must be distinct")
    # the discrete operator is symmetric, so rows of its inverse are solves of unit vectors
    A = solve_elliptic(np.eye(grid.n_points)[obs], grid)
    return LinearForwardOp(matrix=A, obs_points=obs, grid=grid)


def check_covariance(gamma, strict=False):
    gamma = np.atleast_2d(np.asarray(gamma, dtype=float))
    if gamma.shape[0] != gamma.shape[1] or not np.allclose(gamma, gamma.T, atol=1e-14):
        raise ValueError("noise covariance must be a symmetric square matrix")
    w = np.linalg.eigvalsh(gamma)
    bad = w.min() <= 0.0 if strict else w.min() < -1e-12 * max(1.0, np.abs(w).max())
    if bad:
        kind = "positive definite" if strict else "positive semidefinite"
        raise ValueError(f"noise covariance is not {kind} (min eigenvalue {w.min():.3g})")
    return gamma


def covariance_sqrt(gamma):
    """Symmetric square root of a PSD matrix (zero allowed)."""
    w, v = np.linalg.eigh(gamma)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


@dataclass
class ObservationData:
    y: np.ndarray
    gamma: np.ndarray
    truth: np.ndarray | None = None


def generate_data(forward, truth, gamma, rng):
    """``y = G(truth) + eta`` with ``eta ~ N(0, gamma)``.

    ``gamma`` may be singular (``0`` gives noise-free data) but must be
    symmetric PSD.
    """
    truth = np.asarray(truth, dtype=float)
    clean = np.asarray(forward(truth), dtype=float)
    gamma = check_covariance(gamma)
    if gamma.shape[0] != clean.shape[-1]:
        raise ValueError("noise covariance does not match the number of observations")
    eta = covariance_sqrt(gamma) @ rng.standard_normal(clean.shape[-1])
    return ObservationData(y=clean + eta, gamma=gamma, truth=truth.copy())


@dataclass
class InverseProblem:
    """Forward map, data and noise covariance. ``forward`` maps ``(J, n) -> (J, K)``."""

    forward: object
    y: np.ndarray
    gamma: np.ndarray
    grid: Grid1D | None = None
    truth: np.ndarray | None = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.gamma = check_covariance(self.gamma, strict=True)
        if self.gamma.shape[0] != self.y.size:
            raise ValueError("gamma and y sizes differ")
        self._gamma_inv = np.linalg.inv(self.gamma)
        self._gamma_inv = 0.5 * (self._gamma_inv + self._gamma_inv.T)

    @classmethod
    def from_data(cls, forward, data, grid=None):
        return cls(forward=forward, y=data.y, gamma=data.gamma, grid=grid, truth=data.truth)

    @property
    def gamma_inv(self):
        return self._gamma_inv

    @property
    def is_linear(self):
        return isinstance(self.forward, LinearForwardOp)

    @property
    def matrix(self):
        if not self.is_linear:
            raise TypeError("forward map is not a LinearForwardOp")
        return self.forward.matrix

    def misfit(self, u):
        """``Phi(u) = 1/2 |y - G(u)|_Gamma^2`` per row of ``u``."""
        r = self.y - np.asarray(self.forward(np.atleast_2d(u)))
        phi = 0.5 * np.einsum("jk,kl,jl->j", r, self._gamma_inv, r)
        return phi if np.ndim(u) > 1 else float(phi[0])

    def misfit_gradient(self, u):
        """``grad Phi(u) = -A^T Gamma^-1 (y - A u)`` (linear forward maps only)."""
        A = self.matrix
        r = self.y - np.atleast_2d(u) @ A.T
        g = -(r @ self._gamma_inv) @ A
        return g if np.ndim(u) > 1 else g[0]


def section5_problem(grid=None, obs_points=None, noise_std=0.01):
    """Forward operator and noise covariance of the default elliptic experiment."""
    grid = grid or Grid1D()
    op = assemble_forward_matrix(grid, obs_points)
    return op, noise_std**2 * np.eye(op.n_obs)
