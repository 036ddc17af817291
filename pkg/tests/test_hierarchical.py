import numpy as np
import pytest

from heki.eki_core import projection_residuals, span_basis
from heki.forward_problem import InverseProblem, LinearForwardOp
from heki.gaussian_field import Grid1D, HyperParams, transform_batch
from heki.hierarchical import (
    HierEnsemble,
    HierPriorSpec,
    centred_update,
    initial_ensemble,
    noncentred_update,
    physical_particles,
    potential_centred,
    potential_noncentred,
    run_hier_eki,
)


@pytest.fixture
def prior():
    return HierPriorSpec()


def test_prior_spec_validation():
    assert HierPriorSpec().dim == 1
    with pytest.raises(ValueError):
        HierPriorSpec(bounds={"ell": (40.0, 10.0)})
    with pytest.raises(ValueError):
        HierPriorSpec(names=("kappa",), bounds={"kappa": (1.0, 2.0)})
    lo, hi = HierPriorSpec().admissible()
    assert lo[0] == 1.0 and hi[0] == 400.0
    assert HierPriorSpec().prior_variance()[0] == pytest.approx(75.0)


def test_prior_samples_in_bounds(prior):
    th = prior.sample_theta(np.random.default_rng(0), 1000)
    assert th.shape == (1000, 1)
    assert th.min() >= 10.0 and th.max() <= 40.0
    assert abs(th.mean() - 25.0) < 3 * np.sqrt(75.0 / 1000)


def test_ensemble_shape_checks():
    with pytest.raises(ValueError):
        HierEnsemble(np.ones((3, 2)), np.ones(3), mode="sideways")
    e = HierEnsemble(np.ones((3, 2)), np.ones(3), mode="centred")
    assert e.theta.shape == (3, 1)
    with pytest.raises(ValueError):
        HierEnsemble(np.ones((3, 2)), np.ones(4), mode="centred")


def test_equal_theta_unchanged_centred(prior):
    rng = np.random.default_rng(1)
    ens = HierEnsemble(rng.standard_normal((4, 3)), np.full(4, 20.0), "centred")
    out = centred_update(ens, ens.field[:, :2], rng.standard_normal((4, 2)), np.eye(2))
    np.testing.assert_array_equal(out.theta, ens.theta)
    assert not np.allclose(out.field, ens.field)


def test_scalar_hand_gains():
    ens = HierEnsemble(np.array([[0.0], [2.0]]), np.array([1.0, 3.0]), "centred")
    # C^up = C^pp = C^thp = 1, gain 1/2, innovations (1, -1)
    out = centred_update(ens, ens.field, np.array([[1.0], [1.0]]), np.eye(1))
    np.testing.assert_allclose(out.field[:, 0], [0.5, 1.5], rtol=1e-14)
    np.testing.assert_allclose(out.theta[:, 0], [1.5, 2.5], rtol=1e-14)


def test_noncentred_equal_particles_no_update(grid, prior):
    xi = np.tile(np.random.default_rng(2).standard_normal(grid.n_points), (3, 1))
    ens = HierEnsemble(xi, np.full(3, 25.0), "noncentred")
    g = prior.transform(xi, ens.theta, grid)[:, :4]
    out = noncentred_update(ens, g, np.ones((3, 4)), np.eye(4))
    np.testing.assert_array_equal(out.field, xi)
    np.testing.assert_array_equal(out.theta, ens.theta)


def test_update_mode_checks(grid):
    ens = HierEnsemble(np.ones((2, 3)), np.ones(2), "centred")
    with pytest.raises(ValueError):
        noncentred_update(ens, np.ones((2, 1)), np.ones((2, 1)), np.eye(1))
    ens2 = HierEnsemble(np.ones((2, 3)), np.ones(2), "noncentred")
    with pytest.raises(ValueError):
        centred_update(ens2, np.ones((2, 1)), np.ones((2, 1)), np.eye(1))


def test_clamping_counts():
    ens = HierEnsemble(np.array([[0.0], [2.0]]), np.array([1.0, 3.0]), "centred")
    bounds = (np.array([1.4]), np.array([2.0]))
    out = centred_update(ens, ens.field, np.array([[1.0], [1.0]]), np.eye(1), bounds=bounds)
    np.testing.assert_allclose(out.theta[:, 0], [1.5, 2.0])
    assert out.clamp_events == 1


def test_potentials(problem, prior):
    u = np.sin(problem.grid.x)
    p0 = InverseProblem(problem.forward, problem.forward(u), problem.gamma, problem.grid)
    assert potential_centred(u, p0) == pytest.approx(0.0, abs=1e-18)
    rng = np.random.default_rng(3)
    xi = rng.standard_normal((5, problem.grid.n_points))
    theta = prior.sample_theta(rng, 5)
    lhs = potential_noncentred(xi, theta, problem, prior)
    rhs = potential_centred(prior.transform(xi, theta, problem.grid), problem)
    np.testing.assert_array_equal(lhs, rhs)
    assert isinstance(potential_noncentred(xi[0], theta[0], problem, prior), float)


def test_scalar_potential():
    g = Grid1D(n_points=1)
    prob = InverseProblem(LinearForwardOp(np.eye(1), np.array([0]), g), np.array([1.0]), np.array([[4.0]]), g)
    assert potential_centred(np.array([0.0]), prob) == pytest.approx(1 / 8)


def test_initial_ensembles_share_draws(grid, prior):
    c = initial_ensemble("centred", prior, grid, 6, np.random.default_rng(4))
    n = initial_ensemble("noncentred", prior, grid, 6, np.random.default_rng(4))
    np.testing.assert_array_equal(c.theta, n.theta)
    np.testing.assert_allclose(c.field, physical_particles(n, prior, grid))


def test_centred_subspace_both_blocks(problem, prior):
    _, d = run_hier_eki("centred", problem, prior, 10, 15, np.random.default_rng(5))
    assert max(d.residual_field) < 1e-8
    assert max(d.residual_theta) < 1e-8
    assert max(d.residual_physical) < 1e-8
    assert max(d.residual_joint) < 1e-8
    assert len(d.ell_mean) == 16


def test_noncentred_breaks_physical_span(problem, prior):
    _, d = run_hier_eki("noncentred", problem, prior, 10, 5, np.random.default_rng(6))
    assert max(d.residual_field) < 1e-8
    assert max(d.residual_theta) < 1e-8
    assert max(d.residual_joint) < 1e-8
    assert d.residual_physical[5] > 1e-3


def test_noncentred_physical_span_kept_when_theta_equal(problem):
    # with one shared lengthscale T is a fixed linear map, so the span survives
    prior = HierPriorSpec(bounds={"ell": (25.0, 25.0 + 1e-9)})
    rng = np.random.default_rng(7)
    init = initial_ensemble("noncentred", prior, problem.grid, 10, rng)
    init.theta[:] = 25.0
    _, d = run_hier_eki("noncentred", problem, prior, 10, 5, rng, init=init)
    assert max(d.residual_physical) < 1e-8


def test_run_reproducible(problem, prior):
    a = run_hier_eki("noncentred", problem, prior, 8, 4, np.random.default_rng(8))[1]
    b = run_hier_eki("noncentred", problem, prior, 8, 4, np.random.default_rng(8))[1]
    for name in a.SERIES:
        assert getattr(a, name) == getattr(b, name)
    np.testing.assert_array_equal(a.reconstruction, b.reconstruction)


def test_run_mode_mismatch(problem, prior):
    init = initial_ensemble("centred", prior, problem.grid, 4, np.random.default_rng(0))
    with pytest.raises(ValueError):
        run_hier_eki("noncentred", problem, prior, 4, 1, np.random.default_rng(0), init=init)
    with pytest.raises(ValueError):
        run_hier_eki("both", problem, prior, 4, 1, np.random.default_rng(0))


def test_multi_parameter_theta(problem):
    prior = HierPriorSpec(names=("ell", "sigma"), bounds={"ell": (10.0, 40.0), "sigma": (0.5, 2.0)})
    ens, d = run_hier_eki("noncentred", problem, prior, 10, 3, np.random.default_rng(9))
    assert ens.theta.shape == (10, 2)
    s, a, l = prior.params(ens.theta)
    u = transform_batch(ens.field, s, a, l, problem.grid)
    np.testing.assert_allclose(u.mean(0), d.reconstruction)


def test_inflation_and_localization_runs(problem, prior):
    from heki.variants import InflationSpec, LocalizationSpec

    for kw in ({"inflation": InflationSpec(0.1)}, {"localization": LocalizationSpec(10.0)}):
        for mode in ("centred", "noncentred"):
            _, d = run_hier_eki(mode, problem, prior, 10, 3, np.random.default_rng(10), **kw)
            assert np.all(np.isfinite(d.phi_mean))
            # both modifications break the span of the raw ensemble
            assert max(d.residual_physical) > 1e-6


def test_centred_field_matches_standard(problem, prior):
    from heki.eki_core import EnsembleState, run_eki

    init = initial_ensemble("centred", prior, problem.grid, 10, np.random.default_rng(11))
    _, dh = run_hier_eki("centred", problem, prior, 10, 6, np.random.default_rng(12), init=init)
    _, ds = run_eki(problem, EnsembleState(init.field), 6, rng=np.random.default_rng(12))
    np.testing.assert_allclose(dh.reconstruction, ds.reconstruction, atol=1e-12)
    basis = span_basis(init.field)
    assert projection_residuals(dh.reconstruction, basis)[0] < 1e-8
