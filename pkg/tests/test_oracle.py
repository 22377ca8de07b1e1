import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stormda.denoisers.gaussian import DenseGaussianDenoiser, GaussianDenoiser
from stormda.diffusion import build_schedule
from stormda.errors import CapabilityError, ConfigError, NumericalError
from stormda.fields import GridSpec, GrfParams, grf_spectrum, sample_grf
from stormda.guidance import GuidanceSchedule, ObservationOperator, observe
from stormda.oracle import (AUDIT_HEADER, dense_gaussian_posterior, exact_gaussian_posterior, fd_check,
                            tiled_vs_global_audit)
from stormda.rng import RngState
from stormda.tiling import plan_tiles


def _one(v):
    return np.full((1, 1, 1), v, dtype=float)


def test_scalar_conjugate_posterior():
    p = exact_gaussian_posterior(_one(0.0), _one(1.0), np.ones((1, 1, 1), bool), 1.0, [1.0])
    assert p.mean[0, 0, 0] == pytest.approx(0.5, abs=1e-15)
    assert p.var[0, 0, 0] == pytest.approx(0.5, abs=1e-15)


def test_uninformative_observation_keeps_prior():
    p = exact_gaussian_posterior(_one(0.3), _one(2.0), np.ones((1, 1, 1), bool), 1e14, [5.0])
    assert p.mean[0, 0, 0] == pytest.approx(0.3, abs=1e-12)
    assert p.var[0, 0, 0] == pytest.approx(2.0, rel=1e-12)


def test_exact_observation_limit():
    p = exact_gaussian_posterior(_one(0.3), _one(2.0), np.ones((1, 1, 1), bool), 1e-8, [5.0])
    assert abs(p.mean[0, 0, 0] - 5.0) < 1e-4 and p.var[0, 0, 0] < 1e-4


def test_unobserved_cells_keep_prior(gen):
    mu, var = gen.standard_normal((1, 3, 4)), gen.uniform(0.5, 2, (1, 3, 4))
    mask = np.zeros((1, 3, 4), bool)
    mask[0, 1, 2] = True
    p = exact_gaussian_posterior(mu, var, mask, 0.5, [1.0])
    keep = ~mask
    assert np.array_equal(p.mean[keep], mu[keep]) and np.array_equal(p.var[keep], var[keep])


def test_zero_noise_at_observed_cell_is_an_error():
    with pytest.raises(ConfigError):
        exact_gaussian_posterior(_one(0.0), _one(1.0), np.ones((1, 1, 1), bool), 0.0, [1.0])


def test_stationary_partial_mask_is_a_capability_error():
    lam = grf_spectrum(4, 4, GrfParams(2.0))
    mask = np.zeros((1, 4, 4), bool)
    mask[0, 0, 0] = True
    with pytest.raises(CapabilityError):
        exact_gaussian_posterior(0.0, lam, mask, 0.5, [1.0], kind="spectral")


def test_spectral_full_mask_matches_dense(gen):
    grf = GrfParams(2.0, 1.3)
    spec = GridSpec(6, 6)
    y = gen.standard_normal(spec.shape)
    a = exact_gaussian_posterior(0.0, grf_spectrum(6, 6, grf), np.ones(spec.shape, bool), 0.4, y.reshape(-1),
                                 kind="spectral")
    C = DenseGaussianDenoiser.from_grf(6, 6, grf).cov
    b = dense_gaussian_posterior(np.zeros(36), C, np.ones(36, bool), 0.4, y.reshape(-1))
    np.testing.assert_allclose(a.mean.reshape(-1), b.mean, atol=1e-10)
    np.testing.assert_allclose(a.var.reshape(-1), b.var, atol=1e-10)


def test_two_cell_correlated_prior():
    C = np.array([[1.0, 0.8], [0.8, 1.0]])
    p = dense_gaussian_posterior(np.zeros(2), C, np.array([True, False]), 0.5, [1.0])
    assert p.mean[1] == pytest.approx(0.8 / 1.5, abs=1e-14)
    assert p.mean[0] == pytest.approx(1.0 / 1.5, abs=1e-14)


def test_dense_empty_operator_returns_prior(gen):
    A = gen.standard_normal((5, 5))
    C = A @ A.T + np.eye(5)
    mu = gen.standard_normal(5)
    p = dense_gaussian_posterior(mu, C, np.zeros(5, bool), 1.0, [])
    assert np.array_equal(p.mean, mu) and np.array_equal(p.cov, C)


@given(st.integers(0, 10 ** 6), st.floats(0.05, 0.95))
def test_dense_and_diagonal_paths_agree(seed, frac):
    g = np.random.default_rng(seed)
    spec = GridSpec(4, 5)
    mu, var = g.standard_normal(spec.shape), g.uniform(0.1, 3, spec.shape)
    op = ObservationOperator.random(spec, frac, seed)
    R = g.uniform(0.1, 1.0, op.n_obs)
    y = g.standard_normal(op.n_obs)
    a = exact_gaussian_posterior(mu, var, op.mask, R, y)
    b = dense_gaussian_posterior(mu, np.diag(var.reshape(-1)), op.mask, R, y)
    np.testing.assert_allclose(a.mean.reshape(-1), b.mean, atol=1e-10)
    np.testing.assert_allclose(a.var.reshape(-1), b.var, atol=1e-10)


@given(st.integers(0, 10 ** 6))
def test_posterior_variance_never_exceeds_prior(seed):
    g = np.random.default_rng(seed)
    A = g.standard_normal((12, 12))
    C = A @ A.T + 0.1 * np.eye(12)
    H = g.random(12) < 0.5
    p = dense_gaussian_posterior(np.zeros(12), C, H, g.uniform(0.1, 2.0), g.standard_normal(int(H.sum())))
    assert np.all(p.var <= np.diag(C) + 1e-12)


def test_dense_oracle_size_cap():
    with pytest.raises(ConfigError):
        dense_gaussian_posterior(np.zeros(257), np.eye(257), np.zeros(257, bool), 1.0, [])


def test_singular_innovation_is_an_error():
    C = np.array([[1.0, 1.0], [1.0, 1.0]])
    H = np.array([[1.0, -1.0]])
    R = np.zeros((1, 1))
    with pytest.raises(NumericalError):
        dense_gaussian_posterior(np.zeros(2), C, H, R, [0.0])


# ---------------------------------------------------------------------------
# finite differences


@pytest.mark.parametrize("h", [2.0 ** -k for k in (1, 7, 13, 20, 30)])
def test_fd_linear_function_exact(h):
    a = np.array([1.0, -2.0, 3.0])
    v = np.array([1.0, 1.0, -1.0])
    assert fd_check(lambda x: float(a @ x), np.zeros(3), v, h, grad=lambda x: a) < 1e-12


def test_fd_quadratic_central_difference():
    err = fd_check(lambda x: float(x[0] ** 2), np.array([1.0]), np.array([1.0]), 1e-4, analytic=2.0)
    assert err < 1e-10


def test_fd_requires_a_reference_and_positive_step():
    with pytest.raises(ConfigError):
        fd_check(lambda x: 0.0, np.zeros(1), np.ones(1))
    with pytest.raises(ConfigError):
        fd_check(lambda x: 0.0, np.zeros(1), np.ones(1), 0.0, analytic=0.0)


# ---------------------------------------------------------------------------
# tiled versus global audit


def test_audit_single_tile_is_exact():
    spec = GridSpec(8, 8)
    D = DenseGaussianDenoiser.from_grf(8, 8, GrfParams(3.0))
    rep = tiled_vs_global_audit(D, [plan_tiles(spec, 8, 2)], build_schedule(10), seeds=(0, 1), modes=("sde", "ode"))
    assert all(r.max_disc == 0.0 and r.mean_disc == 0.0 for r in rep.rows)
    assert rep.to_csv().splitlines()[0] == AUDIT_HEADER
    assert len(rep.rows) == 2 * 2 * 2


def test_audit_pointwise_denoiser_is_exact_under_tiling():
    spec = GridSpec(8, 8)
    g = RngState(1).generator()
    D = GaussianDenoiser(g.uniform(-1, 1, spec.shape), g.uniform(0.5, 2, spec.shape))
    rep = tiled_vs_global_audit(D, [plan_tiles(spec, 4, 0), plan_tiles(spec, 2, 1)], build_schedule(10))
    assert max(r.max_disc for r in rep.rows) < 1e-10


def test_audit_domain_cap():
    with pytest.raises(ConfigError):
        tiled_vs_global_audit(GaussianDenoiser(), [plan_tiles(GridSpec(128, 128), 64, 0)], build_schedule(4))


def test_audit_posterior_discrepancy_within_twice_prior():
    spec = GridSpec(16, 16)
    grf = GrfParams(4.0)
    D = DenseGaussianDenoiser.from_grf(16, 16, grf)
    plans = [plan_tiles(spec, 8, 4)]
    sched = build_schedule()
    op = ObservationOperator.random(spec, 0.2, 0)
    y = observe(sample_grf(spec, grf, RngState(1)), op, 0.25, RngState(2))
    prior = tiled_vs_global_audit(D, plans, sched, seeds=range(3))
    post = tiled_vs_global_audit(D, plans, sched, obs=(y, op, GuidanceSchedule()), seeds=range(3))
    for seed in range(3):
        assert post.curve("sde", seed)[0] < 2.0 * prior.curve("sde", seed)[0]
