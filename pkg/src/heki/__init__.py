"""Hierarchical ensemble Kalman inversion with Matern priors."""

from heki._accel import BACKEND, HAVE_NUMBA
from heki.eki_core import EnsembleState, RunDiagnostics, kalman_update, run_eki
from heki.forward_problem import InverseProblem, assemble_forward_matrix, generate_data
from heki.gaussian_field import Grid1D, HyperParams, matern_cov, spde_sample, whiten_transform
from heki.hierarchical import HierEnsemble, HierPriorSpec, run_hier_eki
from heki.variants import InflationSpec, LocalizationSpec

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "HAVE_NUMBA",
    "EnsembleState",
    "RunDiagnostics",
    "kalman_update",
    "run_eki",
    "InverseProblem",
    "assemble_forward_matrix",
    "generate_data",
    "Grid1D",
    "HyperParams",
    "matern_cov",
    "spde_sample",
    "whiten_transform",
    "HierEnsemble",
    "HierPriorSpec",
    "run_hier_eki",
    "InflationSpec",
    "LocalizationSpec",
]
