"""Whittle-Matern Gaussian random fields on a 1D Dirichlet grid.

Conventions
-----------
Lengthscales in :class:`HyperParams` are measured in grid cells, so a field
with ``ell=37`` on a 50-node grid decorrelates over most of the domain.
The physical lengthscale is ``ell * grid.h``.

White noise ``xi`` is unit-variance per node (white noise on the cell grid).
The whitening map is

    T(xi, theta) = ell^(d/2) sqrt(beta) (I + ell^2 L)^(-alpha/2) xi

with ``L = tridiag(-1, 2, -1)`` the Dirichlet Laplacian in cell units.  The
fractional power is applied in the discrete sine basis, where ``L`` is
diagonal.  With this scaling the interior marginal variance approaches
``sigma^2`` and the covariance approaches the Matern kernel with smoothness
``nu = alpha - d/2``.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.fft import dst
from scipy.special import gamma as gamma_fn
from scipy.special import kv

from heki.kernels import thomas_solve


@dataclass(frozen=True)
class HyperParams:
    sigma: float = 1.0
    alpha: float = 0.8
    ell: float = 37.0
    dim: int = 1

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not self.ell > 0:
            raise ValueError(f"ell must be positive, got {self.ell}")
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")

    @property
    def nu(self):
        """Matern smoothness of the SPDE solution, ``alpha - d/2``."""
        return self.alpha - self.dim / 2

    @property
    def beta(self):
        return matern_beta(self.sigma, self.alpha, self.dim)

    def replace(self, **changes):
        values = {"sigma": self.sigma, "alpha": self.alpha, "ell": self.ell, "dim": self.dim}
        values.update(changes)
        return HyperParams(**values)


def matern_beta(sigma, alpha, dim=1):
    """Normaliser making ``sigma^2`` the marginal variance; needs ``alpha > d/2``."""
    alpha = np.asarray(alpha, dtype=float)
    if np.any(alpha <= dim / 2):
        raise ValueError(f"beta requires alpha > d/2 = {dim / 2}, got {alpha}")
    sigma = np.asarray(sigma, dtype=float)
    out = sigma**2 * 2.0**dim * np.pi ** (dim / 2) * gamma_fn(alpha) / gamma_fn(alpha - dim / 2)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class Grid1D:
    """``n_points`` interior nodes of ``domain`` with zero Dirichlet ends."""

    n_points: int = 50
    domain: tuple = (0.0, np.pi)
    _x: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        a, b = (float(v) for v in self.domain)
        if self.n_points < 1:
            raise ValueError("grid needs at least one interior node")
        if not b > a:
            raise ValueError(f"empty domain {self.domain}")
        object.__setattr__(self, "domain", (a, b))
        object.__setattr__(self, "_x", a + self.h * np.arange(1, self.n_points + 1))

    @property
    def h(self):
        a, b = self.domain
        return (b - a) / (self.n_points + 1)

    @property
    def x(self):
        return self._x.copy()

    @property
    def length(self):
        return self.domain[1] - self.domain[0]


def matern_cov(x, x_prime, theta, spacing=1.0):
    """Whittle-Matern covariance between points ``x`` and ``x_prime``.

    Distances are divided by ``spacing`` before comparison with
    ``theta.ell``; pass ``grid.h`` when ``x`` are physical coordinates.
    Broadcasts over array inputs.
    """
    r = np.abs(np.asarray(x, dtype=float) - np.asarray(x_prime, dtype=float)) / spacing
    nu = theta.nu
    s = r / theta.ell
    with np.errstate(invalid="ignore", over="ignore"):
        body = 2.0 ** (1 - nu) / gamma_fn(nu) * s**nu * kv(nu, s)
    # below 1e-150 the deviation from the r -> 0 limit is far below rounding, and
    # kv overflows for subnormal arguments
    out = np.where(s < 1e-150, 1.0, body) * theta.sigma**2
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"non-finite Matern value for nu={nu}")
    return float(out) if out.ndim == 0 else out


def assemble_spde_matrix(ell, grid):
    """Finite-difference matrix ``I - ell^2 Delta_h`` with Dirichlet ends.

    ``ell`` here is a physical length (same units as ``grid.h``); for a
    :class:`HyperParams` lengthscale pass ``theta.ell * grid.h``.
    """
    if ell < 0:
        raise ValueError("ell must be non-negative")
    n = grid.n_points
    r = ell**2 / grid.h**2
    return (
        np.diag(np.full(n, 1.0 + 2.0 * r))
        + np.diag(np.full(n - 1, -r), 1)
        + np.diag(np.full(n - 1, -r), -1)
    )


def laplacian_eigenvalues(n):
    """Eigenvalues of ``tridiag(-1, 2, -1)`` of size ``n``, modes k = 1..n."""
    k = np.arange(1, n + 1)
    return 4.0 * np.sin(np.pi * k / (2 * (n + 1))) ** 2


def sine_transform(v):
    """Orthonormal DST-I along the last axis; it is its own inverse."""
    return dst(v, type=1, norm="ortho", axis=-1)


def _spectral_factor(n, alpha, ell):
    # (1 + ell^2 mu_k)^(-alpha/2) with per-particle alpha/ell broadcast on axis 0
    mu = laplacian_eigenvalues(n)
    alpha = np.asarray(alpha, dtype=float)[..., None]
    ell = np.asarray(ell, dtype=float)[..., None]
    return (1.0 + ell**2 * mu) ** (-alpha / 2)


def fractional_smoother(xi, ell, power, grid):
    """Apply ``(I + ell^2 L)^(-power)`` to ``xi`` (last axis), ell in cells."""
    xi = np.asarray(xi, dtype=float)
    _check_length(xi, grid)
    fac = _spectral_factor(grid.n_points, 2.0 * np.asarray(power), ell)
    return sine_transform(sine_transform(xi) * fac)


def whiten_scale(sigma, alpha, ell, dim=1):
    return np.asarray(ell, dtype=float) ** (dim / 2) * np.sqrt(matern_beta(sigma, alpha, dim))


def transform_batch(xi, sigma, alpha, ell, grid):
    """``T(xi_j, theta_j)`` for rows of ``xi`` with per-row hyperparameters.

    ``sigma``, ``alpha`` and ``ell`` broadcast against the leading axis of
    ``xi``; scalars apply to every row.
    """
    xi = np.asarray(xi, dtype=float)
    _check_length(xi, grid)
    lead = xi.shape[:-1]
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), lead)
    alpha = np.broadcast_to(np.asarray(alpha, dtype=float), lead)
    ell = np.broadcast_to(np.asarray(ell, dtype=float), lead)
    scale = whiten_scale(sigma, alpha, ell)
    fac = _spectral_factor(grid.n_points, alpha, ell) * np.asarray(scale)[..., None]
    return sine_transform(sine_transform(xi) * fac)


def whiten_transform(xi, theta, grid):
    """The whitening map ``u = T(xi, theta)`` for one hyperparameter set."""
    return transform_batch(xi, theta.sigma, theta.alpha, theta.ell, grid)


def transform_ell_derivative(xi, sigma, alpha, ell, grid):
    """``dT/d ell`` at fixed ``sigma``, ``alpha`` (per-row like :func:`transform_batch`)."""
    xi = np.asarray(xi, dtype=float)
    lead = xi.shape[:-1]
    alpha_b = np.broadcast_to(np.asarray(alpha, dtype=float), lead)[..., None]
    ell_b = np.broadcast_to(np.asarray(ell, dtype=float), lead)[..., None]
    mu = laplacian_eigenvalues(grid.n_points)
    # d/dl log(l^(1/2) (1 + l^2 mu)^(-a/2)) = 1/(2l) - a l mu / (1 + l^2 mu)
    dlog = 0.5 / ell_b - alpha_b * ell_b * mu / (1.0 + ell_b**2 * mu)
    sigma_b = np.broadcast_to(np.asarray(sigma, dtype=float), lead)
    scale = whiten_scale(sigma_b, alpha_b[..., 0], ell_b[..., 0])
    fac = _spectral_factor(grid.n_points, alpha_b[..., 0], ell_b[..., 0]) * np.asarray(scale)[..., None]
    return sine_transform(sine_transform(xi) * fac * dlog)


def transform_matrix(theta, grid):
    """Dense matrix ``M`` with ``T(xi, theta) = M @ xi``."""
    return whiten_transform(np.eye(grid.n_points), theta, grid).T


def prior_covariance(theta, grid):
    """Exact covariance of ``T(xi, theta)`` for unit white noise ``xi``."""
    mu = laplacian_eigenvalues(grid.n_points)
    lam = theta.ell**theta.dim * theta.beta * (1.0 + theta.ell**2 * mu) ** (-theta.alpha)
    v = sine_transform(np.eye(grid.n_points))
    return (v * lam) @ v.T


def white_noise(grid, rng, size=None):
    """Unit-variance nodal white noise, shape ``(size, n)`` or ``(n,)``."""
    shape = (grid.n_points,) if size is None else (size, grid.n_points)
    return rng.standard_normal(shape)


def sample_white_noise(grid, theta, rng, size=None):
    """Nodal noise with variance ``alpha * ell / h`` (finite-difference sampler input)."""
    var = theta.alpha * theta.ell / grid.h
    return np.sqrt(var) * white_noise(grid, rng, size)


def spde_sample(theta, grid, rng, size=None):
    """Draw from ``N(0, C_theta)`` by whitening unit white noise."""
    return whiten_transform(white_noise(grid, rng, size), theta, grid)


def fd_sample(theta, grid, rng, size=None):
    """Finite-difference sampler: solve ``(I - ell^2 Delta_h) u = xi``.

    Uses a single (integer) power of the operator and noise variance
    ``alpha * ell / h`` with a physical lengthscale ``ell * h``.  This is a
    different law from :func:`spde_sample` and is kept for comparison.
    """
    xi = sample_white_noise(grid, theta, rng, size)
    r = theta.ell**2  # (ell h)^2 / h^2
    n = grid.n_points
    return thomas_solve(np.full(n - 1, -r), np.full(n, 1.0 + 2.0 * r), np.full(n - 1, -r), xi)


def kl_eigenvalues(theta, grid, n_modes=None):
    """``(1 + ell^2 k^2)^(-alpha)`` for the continuum Dirichlet modes.

    ``k`` is the physical wavenumber ``pi m / L`` of mode ``m`` and ``ell``
    is converted to physical units with ``grid.h``.
    """
    m = np.arange(1, (n_modes or grid.n_points) + 1)
    k = np.pi * m / grid.length
    ell_phys = theta.ell * grid.h
    return (1.0 + ell_phys**2 * k**2) ** (-theta.alpha)


def kl_basis(grid, n_modes=None):
    """Sine modes evaluated at the nodes, normalised to unit Euclidean norm.

    Returned as ``(n_modes, n_points)``.
    """
    m = np.arange(1, (n_modes or grid.n_points) + 1)
    xs = (grid.x - grid.domain[0]) / grid.length * np.pi
    return np.sqrt(2.0 / (grid.n_points + 1)) * np.sin(np.outer(m, xs))


def kl_sample(theta, grid, rng, size=None, n_modes=None):
    """Karhunen-Loeve draw ``ell^(d/2) sqrt(beta) sum_k lambda_k xi_k phi_k``."""
    lam2 = kl_eigenvalues(theta, grid, n_modes)
    phi = kl_basis(grid, n_modes)
    shape = (lam2.size,) if size is None else (size, lam2.size)
    coef = rng.standard_normal(shape) * np.sqrt(lam2)
    scale = theta.ell ** (theta.dim / 2) * np.sqrt(theta.beta)
    return scale * (coef @ phi)


def _check_length(v, grid):
    if v.shape[-1] != grid.n_points:
        raise ValueError(f"field has length {v.shape[-1]}, grid has {grid.n_points} nodes")
