"""Ensemble Kalman inversion with perturbed observations.

Ensembles are stored row-wise: ``particles[j]`` is member ``j``.
Covariances use the ``1/J`` normalisation throughout.
"""

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from heki.forward_problem import covariance_sqrt
from heki.kernels import cross_covariance


class DegenerateEnsembleError(ValueError):
    """Raised when an ensemble is too small to form covariances."""


@dataclass
class EnsembleState:
    particles: np.ndarray
    hyper: np.ndarray | None = None
    iteration: int = 0

    def __post_init__(self):
        self.particles = np.atleast_2d(np.asarray(self.particles, dtype=float))
        if self.hyper is not None:
            self.hyper = np.asarray(self.hyper, dtype=float)
            if self.hyper.shape[0] != self.particles.shape[0]:
                raise ValueError("hyper and particles disagree on ensemble size")
        if not np.all(np.isfinite(self.particles)):
            raise ValueError("ensemble contains non-finite values")

    @property
    def size(self):
        return self.particles.shape[0]

    @property
    def mean(self):
        return self.particles.mean(axis=0)


@dataclass
class EmpiricalCovariances:
    c_up: np.ndarray
    c_pp: np.ndarray
    c_theta_p: np.ndarray | None = None


def field_covariance(particles):
    """``C(u) = (1/J) sum (u_k - ubar)(u_k - ubar)^T``."""
    particles = np.atleast_2d(particles)
    return cross_covariance(particles, particles)


def _require_ensemble(n):
    if n < 2:
        raise DegenerateEnsembleError(f"need at least 2 particles, got {n}")


def ensemble_stats(ens, g_evals, theta=None):
    """Means of particles and predictions plus the empirical covariances."""
    u = ens.particles if isinstance(ens, EnsembleState) else np.atleast_2d(ens)
    g = np.atleast_2d(np.asarray(g_evals, dtype=float))
    _require_ensemble(u.shape[0])
    if g.shape[0] != u.shape[0]:
        raise ValueError("one forward evaluation per particle is required")
    covs = EmpiricalCovariances(c_up=cross_covariance(u, g), c_pp=cross_covariance(g, g))
    if theta is not None:
        covs.c_theta_p = cross_covariance(np.asarray(theta, dtype=float).reshape(u.shape[0], -1), g)
    return u.mean(axis=0), g.mean(axis=0), covs


@dataclass
class PerturbedData:
    y_pert: np.ndarray
    step: float = 1.0


def perturb_data(y, gamma, h, J, rng):
    """``y_j = y + iota_j`` with ``iota_j ~ N(0, gamma / h)``."""
    if not h > 0:
        raise ValueError(f"step h must be positive, got {h}")
    y = np.asarray(y, dtype=float)
    root = covariance_sqrt(np.atleast_2d(gamma)) / np.sqrt(h)
    iota = rng.standard_normal((J, y.size)) @ root.T
    return PerturbedData(y_pert=y + iota, step=h)


def solve_gain(c_pp, gamma, rhs):
    """Rows of ``(c_pp + gamma)^-1 rhs_j`` via a Cholesky factorisation."""
    try:
        factor = cho_factor(c_pp + gamma, check_finite=False)
    except LinAlgError as exc:
        raise LinAlgError("C^pp + Gamma is singular; check the noise covariance") from exc
    return cho_solve(factor, np.atleast_2d(rhs).T, check_finite=False).T


def gain_increments(blocks, g_evals, targets, gamma, adjust=None):
    """Kalman increments for each state block against shared innovations.

    ``blocks`` are ``(J, p_i)`` arrays updated with the gains
    ``C^{i,p} (C^pp + gamma)^-1`` on innovations ``targets - g_evals``.
    ``adjust(covs, c_pp) -> (covs, c_pp)`` lets localisation or inflation
    modify the covariances before the solve.
    """
    g = np.atleast_2d(g_evals)
    _require_ensemble(g.shape[0])
    covs = [cross_covariance(b, g) for b in blocks]
    c_pp = cross_covariance(g, g)
    if adjust is not None:
        covs, c_pp = adjust(covs, c_pp)
    d = solve_gain(c_pp, gamma, targets - g)
    return [d @ c.T for c in covs]


def kalman_update(ens, g_evals, y_pert, gamma):
    """``u_j <- u_j + C^up (C^pp + gamma)^-1 (y_j - G(u_j))``.

    For a step ``h`` pass ``gamma / h`` together with data perturbed at the
    same step.
    """
    targets = y_pert.y_pert if isinstance(y_pert, PerturbedData) else np.asarray(y_pert)
    (du,) = gain_increments([ens.particles], g_evals, targets, np.atleast_2d(gamma))
    return replace(ens, particles=ens.particles + du, iteration=ens.iteration + 1)


def span_basis(initial, rtol=None):
    """Orthonormal basis (rows) of the span of the rows of ``initial``."""
    m = np.atleast_2d(np.asarray(initial, dtype=float))
    if m.ndim > 2:
        m = m.reshape(m.shape[0], -1)
    _, s, vt = np.linalg.svd(m, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        return vt[:0]
    rtol = max(m.shape) * np.finfo(float).eps if rtol is None else rtol
    return vt[s > rtol * s[0]]


def projection_residuals(particles, basis):
    p = np.atleast_2d(np.asarray(particles, dtype=float))
    resid = p - (p @ basis.T) @ basis
    norms = np.linalg.norm(p, axis=1)
    out = np.zeros(p.shape[0])
    nz = norms > 0
    out[nz] = np.linalg.norm(resid[nz], axis=1) / norms[nz]
    return out


def subspace_residual(ens, initial):
    """Largest relative distance of a particle from the span of ``initial``.

    Accepts :class:`EnsembleState` objects or row arrays. Zero particles
    count as residual 0.
    """
    cur = ens.particles if isinstance(ens, EnsembleState) else ens
    ini = initial.particles if isinstance(initial, EnsembleState) else initial
    cur = np.atleast_2d(np.asarray(cur, dtype=float))
    ini = np.atleast_2d(np.asarray(ini, dtype=float))
    if cur.shape[1] != ini.shape[1]:
        raise ValueError("particle dimensions differ")
    return float(projection_residuals(cur, span_basis(ini)).max())


@dataclass
class RunDiagnostics:
    """Per-iteration series (length ``n_iters + 1``) and final reconstruction."""

    phi_mean: list = field(default_factory=list)
    phi_particles: list = field(default_factory=list)
    ell_mean: list = field(default_factory=list)
    spread: list = field(default_factory=list)
    residual_field: list = field(default_factory=list)
    residual_theta: list = field(default_factory=list)
    residual_joint: list = field(default_factory=list)
    residual_physical: list = field(default_factory=list)
    reconstruction: np.ndarray | None = None
    truth: np.ndarray | None = None
    clamp_events: int = 0

    SERIES = (
        "phi_mean",
        "phi_particles",
        "ell_mean",
        "spread",
        "residual_field",
        "residual_theta",
        "residual_joint",
        "residual_physical",
    )

    @property
    def n_records(self):
        return len(self.phi_mean)

    @property
    def rel_error(self):
        if self.reconstruction is None or self.truth is None:
            return None
        return float(np.linalg.norm(self.reconstruction - self.truth) / np.linalg.norm(self.truth))

    def rows(self):
        for i in range(self.n_records):
            row = {"iteration": i}
            for name in self.SERIES:
                series = getattr(self, name)
                row[name] = series[i] if series else float("nan")
            yield row


def ensemble_spread(particles):
    p = np.atleast_2d(particles)
    return float(np.sqrt(np.mean(np.sum((p - p.mean(axis=0)) ** 2, axis=1))))


def _record(diag, problem, u, basis):
    diag.phi_mean.append(float(problem.misfit(u.mean(axis=0))))
    diag.phi_particles.append(float(np.mean(problem.misfit(u))))
    diag.spread.append(ensemble_spread(u))
    r = float(projection_residuals(u, basis).max())
    diag.residual_field.append(r)
    diag.residual_physical.append(r)


def run_eki(problem, ens0, n_iters, h=1.0, rng=None, perturb=True):
    """Iterate prediction and update ``n_iters`` times with step ``h``.

    ``perturb=False`` uses the unperturbed data for every particle (the
    noise-free scheme used in limit studies).
    """
    if n_iters < 0:
        raise ValueError("n_iters must be non-negative")
    if perturb and rng is None:
        raise ValueError("an rng is required for perturbed observations")
    gamma_h = problem.gamma / h
    basis = span_basis(ens0.particles)
    diag = RunDiagnostics(truth=problem.truth)
    ens = ens0
    if ens.hyper is not None and ens.hyper.ndim == 1:
        diag.ell_mean.append(float(ens.hyper.mean()))
    _record(diag, problem, ens.particles, basis)
    for _ in range(n_iters):
        g = problem.forward(ens.particles)
        if perturb:
            targets = perturb_data(problem.y, problem.gamma, h, ens.size, rng)
        else:
            targets = np.broadcast_to(problem.y, g.shape)
        ens = kalman_update(ens, g, targets, gamma_h)
        if ens.hyper is not None and ens.hyper.ndim == 1:
            diag.ell_mean.append(float(ens.hyper.mean()))
        _record(diag, problem, ens.particles, basis)
    diag.reconstruction = ens.mean
    return ens, diag
