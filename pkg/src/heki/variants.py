"""Covariance inflation and localisation.

The matrix transforms act on field-space covariances and are what the
continuous-time flows use directly.  The discrete updates only see the
cross-covariances ``C^{x p}`` and ``C^pp``, so the adjusters below carry
the same modifications into that form:

* inflation ``C -> gamma C0 + C`` becomes ``C^{xp} + gamma C0 B^T`` and
  ``C^pp + gamma B C0 B^T`` with ``B`` the Jacobian of the forward map in
  that block (exact for linear maps);
* localisation tapers ``C^{up}`` with ``rho[:, obs]`` and ``C^pp`` with
  ``rho[obs, obs]``; scalar hyperparameters are global and left untapered.
"""

from dataclasses import dataclass

import numpy as np

from heki.kernels import gaussian_taper


@dataclass(frozen=True)
class InflationSpec:
    gamma: float = 0.1
    c0_field: np.ndarray | None = None
    c0_theta: np.ndarray | None = None

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("inflation factor must be non-negative")


@dataclass(frozen=True)
class LocalizationSpec:
    radius: float = 10.0
    kind: str = "gaussian"

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("taper radius must be positive")
        if self.kind != "gaussian":
            raise ValueError(f"unsupported taper {self.kind!r}; only 'gaussian'")


def inflate(C, C0, gamma):
    C = np.asarray(C, dtype=float)
    C0 = np.asarray(C0, dtype=float)
    if C.shape != C0.shape:
        raise ValueError(f"shape mismatch {C.shape} vs {C0.shape}")
    return gamma * C0 + C


def build_taper(grid, spec):
    """``rho_ij = exp(-(i - j)^2 / (2 r^2))`` with distances in grid cells."""
    n = grid if isinstance(grid, (int, np.integer)) else grid.n_points
    return gaussian_taper(n, spec.radius)


def localize(C, rho):
    C = np.asarray(C, dtype=float)
    rho = np.asarray(rho, dtype=float)
    if C.shape != rho.shape:
        raise ValueError(f"shape mismatch {C.shape} vs {rho.shape}")
    return C * rho


def localization_adjuster(rho, obs_points, field_blocks=(0,)):
    """Adjuster for :func:`heki.eki_core.gain_increments`."""
    obs = np.asarray(obs_points, dtype=int)
    rho_fp = rho[:, obs]
    rho_pp = rho[np.ix_(obs, obs)]

    def adjust(covs, c_pp):
        out = [c * rho_fp if i in field_blocks else c for i, c in enumerate(covs)]
        return out, c_pp * rho_pp

    return adjust


def inflation_adjuster(gamma, c0_blocks, jacobians):
    """``C^{ip} += gamma C0_i B_i^T`` and ``C^pp += gamma sum_i B_i C0_i B_i^T``.

    ``jacobians[i]`` is the ``(K, p_i)`` Jacobian of the forward map with
    respect to block ``i``; ``None`` marks a block that does not enter it.
    """

    def adjust(covs, c_pp):
        out = []
        c_pp = c_pp.copy()
        for c, c0, B in zip(covs, c0_blocks, jacobians):
            if B is None or c0 is None:
                out.append(c)
                continue
            c0B = c0 @ B.T
            out.append(c + gamma * c0B)
            c_pp += gamma * (B @ c0B)
        return out, c_pp

    return adjust


def chain(*adjusters):
    live = [a for a in adjusters if a is not None]
    if not live:
        return None

    def adjust(covs, c_pp):
        for a in live:
            covs, c_pp = a(covs, c_pp)
        return covs, c_pp

    return adjust
