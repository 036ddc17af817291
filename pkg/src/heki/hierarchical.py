"""Centred and non-centred hierarchical EKI.

Centred: the state is ``(u, theta)`` and the data only see ``u``.
Non-centred: the state is ``(xi, theta)`` with ``u = T(xi, theta)``, so the
hyperparameters enter the forward map and the physical particles are no
longer confined to the span of the initial transformed ensemble.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from heki.eki_core import (
    RunDiagnostics,
    ensemble_spread,
    gain_increments,
    perturb_data,
    projection_residuals,
    span_basis,
)
from heki.gaussian_field import (
    HyperParams,
    prior_covariance,
    transform_batch,
    transform_ell_derivative,
    transform_matrix,
    white_noise,
)
from heki.variants import build_taper, chain, inflation_adjuster, localization_adjuster

MODES = ("centred", "noncentred")
_PARAM_NAMES = ("sigma", "alpha", "ell")


@dataclass
class HierEnsemble:
    field: np.ndarray
    theta: np.ndarray
    mode: str
    iteration: int = 0
    clamp_events: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        self.field = np.atleast_2d(np.asarray(self.field, dtype=float))
        theta = np.asarray(self.theta, dtype=float)
        self.theta = theta.reshape(self.field.shape[0], -1)

    @property
    def size(self):
        return self.field.shape[0]


@dataclass(frozen=True)
class HierPriorSpec:
    """Uniform hyperpriors on ``names`` with the remaining parameters fixed."""

    names: tuple = ("ell",)
    bounds: dict = field(default_factory=lambda: {"ell": (10.0, 40.0)})
    fixed: HyperParams = field(default_factory=lambda: HyperParams(sigma=1.0, alpha=0.8, ell=25.0))

    def __post_init__(self):
        for name in self.names:
            if name not in _PARAM_NAMES:
                raise ValueError(f"unknown hyperparameter {name!r}")
            lo, hi = self.bounds[name]
            if not lo < hi:
                raise ValueError(f"bounds for {name} must satisfy lo < hi, got {(lo, hi)}")

    @property
    def dim(self):
        return len(self.names)

    def index(self, name):
        return self.names.index(name)

    def sample_theta(self, rng, J):
        lo = np.array([self.bounds[n][0] for n in self.names])
        hi = np.array([self.bounds[n][1] for n in self.names])
        return lo + (hi - lo) * rng.random((J, self.dim))

    def admissible(self):
        """Clamp box ``[0.1 lo, 10 hi]`` for each hierarchical parameter."""
        lo = np.array([0.1 * self.bounds[n][0] for n in self.names])
        hi = np.array([10.0 * self.bounds[n][1] for n in self.names])
        return lo, hi

    def prior_mean(self):
        return np.array([0.5 * sum(self.bounds[n]) for n in self.names])

    def prior_variance(self):
        return np.array([(self.bounds[n][1] - self.bounds[n][0]) ** 2 / 12.0 for n in self.names])

    def params(self, theta):
        """Per-particle ``(sigma, alpha, ell)`` arrays from a ``(J, p)`` theta."""
        theta = np.atleast_2d(theta)
        out = {n: np.full(theta.shape[0], getattr(self.fixed, n)) for n in _PARAM_NAMES}
        for i, n in enumerate(self.names):
            out[n] = theta[:, i]
        return out["sigma"], out["alpha"], out["ell"]

    def hyperparams(self, theta_row):
        s, a, l = self.params(np.atleast_2d(theta_row))
        return self.fixed.replace(sigma=float(s[0]), alpha=float(a[0]), ell=float(l[0]))

    def transform(self, xi, theta, grid):
        s, a, l = self.params(theta)
        return transform_batch(np.atleast_2d(xi), s, a, l, grid)


def physical_particles(ens, prior, grid):
    if ens.mode == "centred":
        return ens.field
    return prior.transform(ens.field, ens.theta, grid)


def forward_evals(ens, problem, prior):
    return problem.forward(physical_particles(ens, prior, problem.grid))


def potential_centred(u, problem):
    return problem.misfit(u)


def potential_noncentred(xi, theta, problem, prior):
    u = prior.transform(xi, np.atleast_2d(theta), problem.grid)
    phi = problem.misfit(u)
    return phi if np.ndim(xi) > 1 else float(np.atleast_1d(phi)[0])


def _clamp(theta, bounds):
    if bounds is None:
        return theta, 0
    lo, hi = bounds
    clipped = np.clip(theta, lo, hi)
    return clipped, int(np.count_nonzero(clipped != theta))


def _hier_update(ens, g_evals, y_pert, gamma, adjust, bounds):
    targets = getattr(y_pert, "y_pert", y_pert)
    d_field, d_theta = gain_increments([ens.field, ens.theta], g_evals, targets, gamma, adjust)
    theta, n_clamped = _clamp(ens.theta + d_theta, bounds)
    return replace(
        ens,
        field=ens.field + d_field,
        theta=theta,
        iteration=ens.iteration + 1,
        clamp_events=ens.clamp_events + n_clamped,
    )


def centred_update(ens, g_evals, y_pert, gamma, adjust=None, bounds=None):
    """Update ``(u, theta)`` with gains ``C^{up}``, ``C^{theta p}`` on ``y_j - G(u_j)``."""
    if ens.mode != "centred":
        raise ValueError("centred_update needs a centred ensemble")
    return _hier_update(ens, g_evals, y_pert, gamma, adjust, bounds)


def noncentred_update(ens, gT_evals, y_pert, gamma, adjust=None, bounds=None):
    """Update ``(xi, theta)`` with gains built from ``G(T(xi_j, theta_j))``."""
    if ens.mode != "noncentred":
        raise ValueError("noncentred_update needs a non-centred ensemble")
    return _hier_update(ens, gT_evals, y_pert, gamma, adjust, bounds)


def initial_ensemble(mode, prior, grid, J, rng):
    """``xi_0`` white noise and ``theta_0`` from the hyperprior.

    The centred field is ``u_0 = T(xi_0, theta_0) ~ N(0, C_theta0)``; the
    same draws are used for both modes so runs with one seed are paired.
    """
    xi0 = white_noise(grid, rng, J)
    theta0 = prior.sample_theta(rng, J)
    f0 = prior.transform(xi0, theta0, grid) if mode == "centred" else xi0
    return HierEnsemble(field=f0, theta=theta0, mode=mode)


def _theta_jacobian(xi_mean, theta_mean, problem, prior):
    grid = problem.grid
    A = problem.matrix
    cols = []
    s, a, l = prior.params(theta_mean[None, :])
    for i, name in enumerate(prior.names):
        if name == "ell":
            d = transform_ell_derivative(xi_mean[None, :], s, a, l, grid)[0]
        else:
            step = 1e-6 * max(1.0, abs(theta_mean[i]))
            up, dn = theta_mean.copy(), theta_mean.copy()
            up[i] += step
            dn[i] -= step
            d = (prior.transform(xi_mean, up[None], grid) - prior.transform(xi_mean, dn[None], grid))[0]
            d /= 2 * step
        cols.append(A @ d)
    return np.column_stack(cols)


def default_field_base(mode, prior, grid):
    """Base covariance for field inflation: identity for ``xi``, prior at the mean theta for ``u``."""
    if mode == "noncentred":
        return np.eye(grid.n_points)
    return prior_covariance(prior.hyperparams(prior.prior_mean()), grid)


def _inflation_for(ens, problem, prior, spec):
    if not problem.is_linear:
        raise TypeError("inflation in the discrete update needs a linear forward operator")
    grid = problem.grid
    A = problem.matrix
    c0_field = spec.c0_field if spec.c0_field is not None else default_field_base(ens.mode, prior, grid)
    c0_theta = spec.c0_theta if spec.c0_theta is not None else np.diag(prior.prior_variance())
    theta_mean = ens.theta.mean(axis=0)
    if ens.mode == "centred":
        jac = [A, None]
    else:
        M = transform_matrix(prior.hyperparams(theta_mean), grid)
        jac = [A @ M, _theta_jacobian(ens.field.mean(axis=0), theta_mean, problem, prior)]
    return inflation_adjuster(spec.gamma, [c0_field, np.atleast_2d(c0_theta)], jac)


def run_hier_eki(
    mode,
    problem,
    prior,
    J,
    n_iters,
    rng,
    h=1.0,
    inflation=None,
    localization=None,
    init=None,
    clamp=True,
):
    """Hierarchical EKI with optional inflation or localisation.

    ``rng`` drives the perturbed observations (and the initial ensemble when
    ``init`` is not given).  Returns the final ensemble and diagnostics.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    grid = problem.grid
    ens = init if init is not None else initial_ensemble(mode, prior, grid, J, rng)
    if ens.mode != mode:
        raise ValueError("initial ensemble mode does not match")
    bounds = prior.admissible() if clamp else None
    update = centred_update if mode == "centred" else noncentred_update
    loc = None
    if localization is not None:
        rho = build_taper(grid, localization)
        loc = localization_adjuster(rho, problem.forward.obs_points)

    phys0 = physical_particles(ens, prior, grid)
    bases = {
        "field": span_basis(ens.field),
        "theta": span_basis(ens.theta),
        "joint": span_basis(np.hstack([ens.field, ens.theta])),
        "physical": span_basis(phys0),
    }
    diag = RunDiagnostics(truth=problem.truth)
    ell_col = prior.index("ell") if "ell" in prior.names else None

    def record(e, u):
        diag.phi_mean.append(float(problem.misfit(u.mean(axis=0))))
        diag.phi_particles.append(float(np.mean(problem.misfit(u))))
        diag.spread.append(ensemble_spread(u))
        diag.ell_mean.append(float(e.theta[:, ell_col].mean()) if ell_col is not None else float("nan"))
        diag.residual_field.append(float(projection_residuals(e.field, bases["field"]).max()))
        diag.residual_theta.append(float(projection_residuals(e.theta, bases["theta"]).max()))
        joint = np.hstack([e.field, e.theta])
        diag.residual_joint.append(float(projection_residuals(joint, bases["joint"]).max()))
        diag.residual_physical.append(float(projection_residuals(u, bases["physical"]).max()))

    u = phys0
    record(ens, u)
    gamma_h = problem.gamma / h
    for _ in range(n_iters):
        g = problem.forward(u)
        y_pert = perturb_data(problem.y, problem.gamma, h, ens.size, rng)
        infl = _inflation_for(ens, problem, prior, inflation) if inflation is not None else None
        ens = update(ens, g, y_pert, gamma_h, adjust=chain(loc, infl), bounds=bounds)
        u = physical_particles(ens, prior, grid)
        record(ens, u)
    diag.reconstruction = u.mean(axis=0)
    diag.clamp_events = ens.clamp_events
    return ens, diag
