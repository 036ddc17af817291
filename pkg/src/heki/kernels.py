"""Inner-loop kernels with a numba path and a pure-numpy path.

Each kernel is registered under both backends; the module-level names are
bound to the backend picked in :mod:`heki._accel` (``HEKI_BACKEND``).
``get_kernel(name, backend)`` returns a specific implementation, which the
tests and ``benchmarks/bench_kernels.py`` use to compare the two.
"""

import numpy as np
from scipy.linalg import solve_banded

from heki._accel import AVAILABLE_BACKENDS, BACKEND, njit

# ---------------------------------------------------------------- tridiagonal


@njit
def _thomas_numba(sub, diag, sup, rhs):
    m, n = rhs.shape
    out = np.empty((m, n))
    cp = np.empty(n)
    denom = np.empty(n)
    # factorisation is shared by every right-hand side
    denom[0] = diag[0]
    cp[0] = sup[0] / diag[0] if n > 1 else 0.0
    for i in range(1, n):
        denom[i] = diag[i] - sub[i - 1] * cp[i - 1]
        if i < n - 1:
            cp[i] = sup[i] / denom[i]
    for r in range(m):
        d = out[r]
        d[0] = rhs[r, 0] / denom[0]
        for i in range(1, n):
            d[i] = (rhs[r, i] - sub[i - 1] * d[i - 1]) / denom[i]
        for i in range(n - 2, -1, -1):
            d[i] -= cp[i] * d[i + 1]
    return out


def _thomas_numpy(sub, diag, sup, rhs):
    n = diag.shape[0]
    ab = np.zeros((3, n))
    ab[0, 1:] = sup
    ab[1] = diag
    ab[2, :-1] = sub
    return solve_banded((1, 1), ab, rhs.T, check_finite=False).T


# ---------------------------------------------------------------- covariance


@njit
def _cross_cov_numba(x, y):
    J, p = x.shape
    q = y.shape[1]
    xm = np.zeros(p)
    ym = np.zeros(q)
    for j in range(J):
        xm += x[j]
        ym += y[j]
    xm /= J
    ym /= J
    out = np.zeros((p, q))
    for j in range(J):
        for a in range(p):
            dx = x[j, a] - xm[a]
            for b in range(q):
                out[a, b] += dx * (y[j, b] - ym[b])
    return out / J


def _cross_cov_numpy(x, y):
    dx = x - x.mean(axis=0)
    dy = y - y.mean(axis=0)
    return dx.T @ dy / x.shape[0]


# ---------------------------------------------------------------- taper


@njit
def _taper_numba(n, radius):
    out = np.empty((n, n))
    s = 2.0 * radius * radius
    for i in range(n):
        for j in range(n):
            d = i - j
            out[i, j] = np.exp(-(d * d) / s)
    return out


def _taper_numpy(n, radius):
    idx = np.arange(n, dtype=np.float64)
    d = idx[:, None] - idx[None, :]
    return np.exp(-(d * d) / (2.0 * radius * radius))


# ---------------------------------------------------------------- gradient flow


@njit
def _linear_flow_numba(u0, A, gamma_inv, y, c0, infl, rho, dt, n_steps):
    J, n = u0.shape
    u = u0.copy()
    snaps = np.empty((n_steps + 1, J, n))
    phi = np.empty((n_steps + 1, J))
    AtG = A.T @ gamma_inv
    for step in range(n_steps + 1):
        resid = y - u @ A.T
        snaps[step] = u
        for j in range(J):
            phi[step, j] = 0.5 * resid[j] @ (gamma_inv @ resid[j])
        if step == n_steps:
            break
        mean = np.zeros(n)
        for j in range(J):
            mean += u[j]
        mean /= J
        du = u - mean
        prec = (du.T @ du) / J * rho + infl * c0
        # u_j <- u_j - dt P grad(j),  grad(j) = -A^T Gamma^-1 resid_j
        neg_grad = resid @ AtG.T
        u = u + dt * (neg_grad @ prec.T)
    return snaps, phi


def _linear_flow_numpy(u0, A, gamma_inv, y, c0, infl, rho, dt, n_steps):
    J, n = u0.shape
    u = u0.copy()
    snaps = np.empty((n_steps + 1, J, n))
    phi = np.empty((n_steps + 1, J))
    AtG = A.T @ gamma_inv
    for step in range(n_steps + 1):
        resid = y - u @ A.T
        snaps[step] = u
        phi[step] = 0.5 * np.einsum("jk,kl,jl->j", resid, gamma_inv, resid)
        if step == n_steps:
            break
        du = u - u.mean(axis=0)
        prec = (du.T @ du) / J * rho + infl * c0
        u = u + dt * ((resid @ AtG.T) @ prec.T)
    return snaps, phi


_REGISTRY = {
    "thomas_solve": {"numba": _thomas_numba, "numpy": _thomas_numpy},
    "cross_covariance": {"numba": _cross_cov_numba, "numpy": _cross_cov_numpy},
    "gaussian_taper": {"numba": _taper_numba, "numpy": _taper_numpy},
    "linear_flow": {"numba": _linear_flow_numba, "numpy": _linear_flow_numpy},
}


def get_kernel(name, backend=None):
    backend = backend or BACKEND
    if backend not in AVAILABLE_BACKENDS:
        raise ValueError(f"backend {backend!r} unavailable; have {AVAILABLE_BACKENDS}")
    return _REGISTRY[name][backend]


def thomas_solve(sub, diag, sup, rhs):
    """Solve a tridiagonal system for each row of ``rhs``.

    ``sub`` and ``sup`` have length ``n-1``; ``rhs`` is ``(m, n)`` or ``(n,)``.
    No pivoting, so the matrix should be diagonally dominant.
    """
    rhs = np.asarray(rhs, dtype=np.float64)
    squeeze = rhs.ndim == 1
    rhs2 = np.ascontiguousarray(np.atleast_2d(rhs))
    out = get_kernel("thomas_solve")(
        np.ascontiguousarray(sub, dtype=np.float64),
        np.ascontiguousarray(diag, dtype=np.float64),
        np.ascontiguousarray(sup, dtype=np.float64),
        rhs2,
    )
    return out[0] if squeeze else out


def cross_covariance(x, y):
    """``(1/J) sum_j (x_j - xbar) (y_j - ybar)^T`` for row ensembles ``x``, ``y``."""
    x = np.ascontiguousarray(np.atleast_2d(x.T).T, dtype=np.float64)
    y = np.ascontiguousarray(np.atleast_2d(y.T).T, dtype=np.float64)
    return get_kernel("cross_covariance")(x, y)


def gaussian_taper(n, radius):
    return get_kernel("gaussian_taper")(int(n), float(radius))


def linear_flow(u0, A, gamma_inv, y, c0, infl, rho, dt, n_steps):
    """Explicit Euler steps of ``du_j/dt = -P(u) grad Phi(u_j)`` for ``G = A``.

    ``P = C(u) * rho + infl * c0`` (entrywise taper, additive inflation).
    Returns the ensemble snapshots ``(n_steps+1, J, n)`` and the per-particle
    misfit series ``(n_steps+1, J)``.
    """
    args = [np.ascontiguousarray(a, dtype=np.float64) for a in (u0, A, gamma_inv, y, c0)]
    rho = np.ascontiguousarray(rho, dtype=np.float64)
    return get_kernel("linear_flow")(*args, float(infl), rho, float(dt), int(n_steps))
