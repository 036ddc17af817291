"""Continuous-time limits of EKI: tamed Euler-Maruyama, gradient flows, limit studies.

Sign convention: every flow descends the misfit, ``du/dt = -P(u) grad Phi``.
"""

from dataclasses import dataclass, field

import numpy as np

from heki.eki_core import EnsembleState, field_covariance, gain_increments
from heki.forward_problem import covariance_sqrt
from heki.hierarchical import HierEnsemble, physical_particles
from heki.kernels import cross_covariance, linear_flow
from heki.variants import LocalizationSpec, build_taper, inflation_adjuster, localization_adjuster

VARIANTS = ("plain", "centred", "noncentred", "inflated", "localized")


@dataclass(frozen=True)
class FlowConfig:
    dt: float
    t_end: float
    noise: bool = False
    variant: str = "plain"
    gamma: float = 0.1
    c0: np.ndarray | None = None
    taper_radius: float = 10.0
    tamed: bool = True

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not self.t_end >= self.dt:
            raise ValueError("t_end must be at least dt")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")

    @property
    def n_steps(self):
        # small slack so t_end = 1, dt = 0.1 gives 10 steps despite rounding
        return int(np.floor(self.t_end / self.dt + 1e-9))


@dataclass
class FlowTrajectory:
    """Snapshots ``ensembles[m]`` at ``times[m]``; ``theta`` only for hierarchical flows."""

    times: np.ndarray
    ensembles: np.ndarray
    phi_series: np.ndarray
    theta: np.ndarray | None = None
    noise: bool = False
    variant: str = "plain"
    dt: float = field(default=float("nan"))

    @property
    def final(self):
        return self.ensembles[-1]


def _particles(ens):
    if isinstance(ens, EnsembleState):
        return ens.particles
    return np.atleast_2d(np.asarray(ens, dtype=float))


def _innovation_weights(g, y, gamma_inv):
    # w[j, k] = <G_k - Gbar, y - G_j>_Gamma / J
    J = g.shape[0]
    dg = g - g.mean(axis=0)
    return ((y - g) @ gamma_inv @ dg.T) / J


def drift_plain(ens, problem):
    """``(1/J) sum_k <G(u_k) - Gbar, y - G(u_j)>_Gamma (u_k - ubar)`` for each ``j``."""
    u = _particles(ens)
    if u.shape[0] < 2:
        raise ValueError("drift needs at least 2 particles")
    g = problem.forward(u)
    w = _innovation_weights(g, problem.y, problem.gamma_inv)
    return w @ (u - u.mean(axis=0))


def drift_hier(ens, problem, prior, mode=None):
    """Field and theta drifts of the centred or non-centred coupled system."""
    if mode is not None and mode != ens.mode:
        raise ValueError(f"ensemble mode {ens.mode!r} does not match {mode!r}")
    if ens.size < 2:
        raise ValueError("drift needs at least 2 particles")
    g = problem.forward(physical_particles(ens, prior, problem.grid))
    w = _innovation_weights(g, problem.y, problem.gamma_inv)
    d_field = w @ (ens.field - ens.field.mean(axis=0))
    d_theta = w @ (ens.theta - ens.theta.mean(axis=0))
    return d_field, d_theta


def _plain_adjuster(problem, cfg):
    if cfg.variant == "inflated":
        c0 = np.eye(problem.grid.n_points) if cfg.c0 is None else cfg.c0
        return inflation_adjuster(cfg.gamma, [c0], [problem.matrix])
    if cfg.variant == "localized":
        rho = build_taper(problem.grid, LocalizationSpec(cfg.taper_radius))
        return localization_adjuster(rho, problem.forward.obs_points)
    return None


def em_integrate(ens0, problem, cfg, rng=None, prior=None, brownian=None):
    """Tamed Euler-Maruyama for the EKI limit SDE.

    One step is ``u_j += C^{up} (dt C^pp + Gamma)^-1 (dt (y - G(u_j)) + sqrt(Gamma) dW_j)``,
    the perturbed-observation update with ``h = dt``.  ``tamed=False`` uses
    the raw ``C^{up} Gamma^-1`` drift and diffusion instead.  ``brownian``
    may supply the increments ``dW`` as ``(n_steps, J, K)`` (variance ``dt``)
    for common-random-number comparisons.
    """
    hier = isinstance(ens0, HierEnsemble)
    if hier and prior is None:
        raise ValueError("hierarchical flows need the prior spec")
    if cfg.variant in ("centred", "noncentred") and (not hier or ens0.mode != cfg.variant):
        raise ValueError(f"variant {cfg.variant!r} needs a matching HierEnsemble")
    if cfg.noise and brownian is None and rng is None:
        raise ValueError("an rng or Brownian increments are required when noise is on")
    n, dt = cfg.n_steps, cfg.dt
    root = covariance_sqrt(problem.gamma)
    J = ens0.size if hier else _particles(ens0).shape[0]
    K = problem.y.size
    if brownian is not None:
        brownian = np.asarray(brownian, dtype=float)
        if brownian.shape != (n, J, K):
            raise ValueError(f"brownian increments must have shape {(n, J, K)}")

    fields = [ens0.field if hier else _particles(ens0)]
    thetas = [ens0.theta] if hier else None
    state = ens0 if hier else _particles(ens0).copy()
    phys = physical_particles(state, prior, problem.grid) if hier else state
    phis = [problem.misfit(phys)]
    for m in range(n):
        g = problem.forward(phys)
        if cfg.noise:
            dW = brownian[m] if brownian is not None else np.sqrt(dt) * rng.standard_normal((J, K))
            noise = dW @ root.T
        else:
            noise = np.zeros((J, K))
        blocks = [state.field, state.theta] if hier else [state]
        adjust = None if hier else _plain_adjuster(problem, cfg)
        if cfg.tamed:
            targets = problem.y + noise / dt
            incs = gain_increments(blocks, g, targets, problem.gamma / dt, adjust)
        else:
            incs = _untamed_increments(blocks, g, problem, noise, dt, adjust)
        if hier:
            state = HierEnsemble(
                field=state.field + incs[0],
                theta=state.theta + incs[1],
                mode=state.mode,
                iteration=state.iteration + 1,
            )
            phys = physical_particles(state, prior, problem.grid)
            fields.append(state.field)
            thetas.append(state.theta)
        else:
            state = state + incs[0]
            phys = state
            fields.append(state)
        phis.append(problem.misfit(phys))
    return FlowTrajectory(
        times=dt * np.arange(n + 1),
        ensembles=np.array(fields),
        phi_series=np.array(phis),
        theta=None if thetas is None else np.array(thetas),
        noise=cfg.noise,
        variant=cfg.variant,
        dt=dt,
    )


def _untamed_increments(blocks, g, problem, noise, dt, adjust):
    covs = [cross_covariance(b, g) for b in blocks]
    c_pp = cross_covariance(g, g)
    if adjust is not None:
        covs, c_pp = adjust(covs, c_pp)
    innov = dt * (problem.y - g) + noise
    d = innov @ problem.gamma_inv
    return [d @ c.T for c in covs]


def preconditioner(u, variant="plain", gamma=0.1, c0=None, rho=None):
    """``C(u)``, ``gamma C0 + C(u)`` or ``C(u) * rho``."""
    C = field_covariance(u)
    if variant == "plain":
        return C
    if variant == "inflated":
        if c0 is None:
            raise ValueError("inflated preconditioner needs c0")
        return gamma * c0 + C
    if variant == "localized":
        if rho is None:
            raise ValueError("localized preconditioner needs rho")
        return C * rho
    raise ValueError(f"unsupported gradient-flow variant {variant!r}")


def _flow_args(u, variant, gamma, c0, rho):
    n = u.shape[1]
    infl = gamma if variant == "inflated" else 0.0
    if variant == "inflated" and c0 is None:
        raise ValueError("inflated flow needs c0")
    c0_arr = np.zeros((n, n)) if c0 is None or variant != "inflated" else c0
    rho_arr = rho if variant == "localized" else np.ones((n, n))
    if variant == "localized" and rho is None:
        raise ValueError("localized flow needs rho")
    if variant not in ("plain", "inflated", "localized"):
        raise ValueError(f"unsupported gradient-flow variant {variant!r}")
    return c0_arr, infl, rho_arr


def gradient_flow_step(ens, problem, dt, variant="plain", gamma=0.1, c0=None, rho=None):
    """``u_j <- u_j - dt P(u) grad Phi(u_j)`` for a linear forward map."""
    u = _particles(ens)
    P = preconditioner(u, variant, gamma, c0, rho)
    out = u - dt * problem.misfit_gradient(u) @ P.T
    return EnsembleState(out) if isinstance(ens, EnsembleState) else out


def run_gradient_flow(ens0, problem, dt, n_steps, variant="plain", gamma=0.1, c0=None, rho=None):
    """Many explicit steps of the noise-free flow (compiled kernel when available)."""
    u0 = _particles(ens0)
    c0_arr, infl, rho_arr = _flow_args(u0, variant, gamma, c0, rho)
    snaps, phi = linear_flow(u0, problem.matrix, problem.gamma_inv, problem.y, c0_arr, infl, rho_arr, dt, n_steps)
    return FlowTrajectory(
        times=dt * np.arange(n_steps + 1),
        ensembles=snaps,
        phi_series=phi,
        noise=False,
        variant=variant,
        dt=dt,
    )


def default_dt(ens0, problem, variant="plain", gamma=0.1, c0=None, rho=None, factor=0.5):
    """``factor / lambda_max(A^T Gamma^-1 A P(u_0))``."""
    u = _particles(ens0)
    A = problem.matrix
    H = A.T @ problem.gamma_inv @ A
    P = preconditioner(u, variant, gamma, c0, rho)
    # HP is similar to P^1/2 H P^1/2, so its spectrum is real and non-negative
    lam = float(np.max(np.linalg.eigvals(H @ P).real))
    if not lam > 0:
        raise ValueError("preconditioned Hessian is zero; the flow does not move")
    return factor / lam


@dataclass
class PhiMonitorReport:
    applicable: bool
    violations: int | None
    n_steps: int
    max_increase: float

    def __int__(self):
        if not self.applicable:
            raise ValueError("monitor is not applicable to noisy trajectories")
        return self.violations


def phi_monitor(traj, tol=1e-12):
    """Count per-particle steps where Phi grows by more than ``tol (1 + |Phi|)``."""
    phi = np.asarray(traj.phi_series, dtype=float)
    n_steps = phi.shape[0] - 1
    if traj.noise:
        return PhiMonitorReport(applicable=False, violations=None, n_steps=n_steps, max_increase=float("nan"))
    inc = phi[1:] - phi[:-1]
    bad = inc > tol * (1.0 + np.abs(phi[:-1]))
    max_inc = float(inc.max()) if inc.size else 0.0
    return PhiMonitorReport(applicable=True, violations=int(bad.sum()), n_steps=n_steps, max_increase=max_inc)


@dataclass
class DissipationReport:
    fraction_ok: float
    c_bound: float
    n_checks: int
    margins: np.ndarray


def inflation_dissipation_check(traj, problem, gamma, c0, c_bound=None):
    """Test ``Phi_m - Phi_{m+1} >= gamma dt |C0^1/2 grad Phi|^2 - c dt^2`` per particle and step.

    ``c`` defaults to the second-order remainder ``max_j 1/2 |H^1/2 P g_j|^2``
    measured at the initial ensemble, with ``H = A^T Gamma^-1 A``.
    """
    dt = traj.dt
    snaps = traj.ensembles
    A = problem.matrix
    H = A.T @ problem.gamma_inv @ A
    if c_bound is None:
        u0 = snaps[0]
        step = problem.misfit_gradient(u0) @ (gamma * c0 + field_covariance(u0)).T
        c_bound = 0.5 * float(np.max(np.einsum("ji,ik,jk->j", step, H, step)))
    phi = traj.phi_series
    margins = []
    for m in range(snaps.shape[0] - 1):
        g = problem.misfit_gradient(snaps[m])
        bound = gamma * dt * np.einsum("ji,ik,jk->j", g, c0, g) - c_bound * dt**2
        margins.append((phi[m] - phi[m + 1]) - bound)
    margins = np.array(margins)
    return DissipationReport(
        fraction_ok=float(np.mean(margins >= 0.0)),
        c_bound=c_bound,
        n_checks=int(margins.size),
        margins=margins,
    )


def discrete_eki_path(u0, problem, h, n_steps, brownian=None):
    """Discrete EKI with step ``h``; noise-free unless ``brownian`` increments are given.

    ``brownian[m]`` is a ``(J, K)`` increment over ``[mh, (m+1)h]``; the
    perturbation is then ``sqrt(Gamma) dW / h`` with covariance ``Gamma / h``.
    """
    u = _particles(u0).copy()
    root = covariance_sqrt(problem.gamma)
    for m in range(n_steps):
        g = problem.forward(u)
        targets = problem.y if brownian is None else problem.y + (brownian[m] @ root.T) / h
        targets = np.broadcast_to(targets, g.shape)
        (du,) = gain_increments([u], g, targets, problem.gamma / h)
        u = u + du
    return u


@dataclass
class LimitStudyResult:
    h_list: np.ndarray
    errors: np.ndarray
    order: float | None
    dt_ref: float
    t_end: float

    @property
    def strictly_decreasing(self):
        return bool(np.all(np.diff(self.errors) < 0))


def fit_order(h_list, errors):
    """Least-squares slope of ``log error`` against ``log h``; ``None`` for one point."""
    h = np.asarray(h_list, dtype=float)
    e = np.asarray(errors, dtype=float)
    if h.size < 2 or np.any(e <= 0):
        return None
    return float(np.polyfit(np.log(h), np.log(e), 1)[0])


def limit_convergence_study(problem, ens0, h_list, t_end, dt_ref=None, noise=False, rng=None, refine=64):
    """Discrete EKI at each ``h`` against a fine tamed Euler-Maruyama reference.

    The error is the largest particle-wise Euclidean distance at ``t_end``.
    With ``noise=True`` both schemes share one Brownian path sampled at the
    reference resolution.
    """
    h_arr = np.asarray(h_list, dtype=float)
    if h_arr.size == 0:
        raise ValueError("h_list is empty")
    if np.any(np.diff(h_arr) >= 0):
        raise ValueError("h_list must be strictly decreasing")
    dt_ref = float(h_arr.min()) / refine if dt_ref is None else float(dt_ref)
    u0 = _particles(ens0)
    J, K = u0.shape[0], problem.y.size
    n_ref = int(round(t_end / dt_ref))
    path = None
    if noise:
        if rng is None:
            raise ValueError("noisy limit studies need an rng")
        path = np.sqrt(dt_ref) * rng.standard_normal((n_ref, J, K))
    ref_cfg = FlowConfig(dt=dt_ref, t_end=n_ref * dt_ref, noise=noise)
    ref = em_integrate(u0, problem, ref_cfg, brownian=path).final
    errors = []
    for h in h_arr:
        n = int(round(t_end / h))
        coarse = None
        if noise:
            per = int(round(h / dt_ref))
            if per * n != n_ref:
                raise ValueError("each h must be a multiple of dt_ref covering t_end")
            coarse = path.reshape(n, per, J, K).sum(axis=1)
        u_h = discrete_eki_path(u0, problem, h, n, brownian=coarse)
        errors.append(float(np.max(np.linalg.norm(u_h - ref, axis=1))))
    errors = np.array(errors)
    return LimitStudyResult(h_list=h_arr, errors=errors, order=fit_order(h_arr, errors), dt_ref=dt_ref, t_end=t_end)


def matching_step_gap(problem, ens0, h, n_steps):
    """Largest gap between discrete noise-free EKI and tamed EM run with ``dt = h``."""
    u0 = _particles(ens0)
    disc = discrete_eki_path(u0, problem, h, n_steps)
    em = em_integrate(u0, problem, FlowConfig(dt=h, t_end=h * n_steps)).ensembles[n_steps]
    return float(np.max(np.abs(disc - em)))
