import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stormda.denoisers.gaussian import DenseGaussianDenoiser, GaussianDenoiser, SpectralGaussianDenoiser
from stormda.diffusion import build_schedule, sample_prior
from stormda.ensemble import generate_ensemble
from stormda.errors import ConfigError
from stormda.fields import GridSpec, GrfParams, StateField
from stormda.guidance import (GuidanceSchedule, ObservationOperator, ObservationSet, assimilate,
                              likelihood_score, observe, posterior_score, read_observations,
                              write_observations)
from stormda.rng import RngState
from stormda.verify import dps_fd_errors

SCALAR = GridSpec(1, 1)


def test_empty_mask_gives_empty_set(gen):
    spec = GridSpec(4, 5)
    y = observe(gen.standard_normal(spec.shape), ObservationOperator.empty(spec), 0.5, gen)
    assert len(y) == 0


def test_full_mask_zero_noise_is_exact(gen):
    spec = GridSpec(4, 5, 2)
    x = gen.standard_normal(spec.shape)
    y = observe(StateField(spec, x), ObservationOperator.full(spec), 0.0, gen)
    np.testing.assert_array_equal(y.values, x.reshape(-1))


def test_random_mask_exact_count():
    op = ObservationOperator.random(GridSpec(10, 10), 0.2, 7)
    assert op.n_obs == 20
    assert np.array_equal(op.mask, ObservationOperator.random(GridSpec(10, 10), 0.2, 7).mask)


def test_observation_noise_statistics():
    spec = GridSpec(64, 64)
    y = observe(np.zeros(spec.shape), ObservationOperator.full(spec), 0.25, RngState(3))
    assert y.values.std() == pytest.approx(0.5, rel=0.03)


def test_mask_shape_mismatch_rejected(gen):
    op = ObservationOperator.empty(GridSpec(4, 4))
    with pytest.raises(ConfigError):
        op.apply(gen.standard_normal((1, 4, 5)))


def test_negative_noise_variance_rejected():
    with pytest.raises(ConfigError):
        ObservationSet([1.0], -0.1)


def test_observation_file_round_trip(tmp_path, gen):
    spec = GridSpec(6, 7, 2)
    op = ObservationOperator.random(spec, 0.3, 11)
    y = observe(gen.standard_normal(spec.shape), op, 0.2, gen)
    write_observations(tmp_path / "obs.csv", op, y)
    assert (tmp_path / "obs.csv").read_text().splitlines()[0] == "var,row,col,value"
    op2, y2 = read_observations(tmp_path / "obs.csv")
    assert np.array_equal(op2.mask, op.mask) and op2.seed == 11
    np.testing.assert_array_equal(y2.values, y.values)
    assert y2.noise_var == 0.2


# ---------------------------------------------------------------------------
# likelihood score


def _scalar_case(mode="constant", R=1.0, y=1.0):
    D = GaussianDenoiser(0.0, 1.0)
    op = ObservationOperator.full(SCALAR)
    return likelihood_score(np.zeros(SCALAR.shape), 1.0, ObservationSet([y], R), op, D, None,
                            GuidanceSchedule(mode, 1.0))


def test_scalar_score_pulls_toward_observation():
    assert _scalar_case()[0, 0, 0] == pytest.approx(1.0, abs=1e-15)


def test_zero_residual_gives_zero_score(gen):
    spec = GridSpec(8, 8)
    D = SpectralGaussianDenoiser(GrfParams(2.0))
    z = gen.standard_normal(spec.shape)
    op = ObservationOperator.random(spec, 0.4, 1)
    y = ObservationSet(op.apply(D.evaluate(z, 0.7)), 0.3)
    for mode in ("constant", "residual-normalized", "variance-corrected"):
        assert not np.any(likelihood_score(z, 0.7, y, op, D, None, GuidanceSchedule(mode)))


def test_zero_noise_variance_is_an_error(gen):
    spec = GridSpec(4, 4)
    op = ObservationOperator.random(spec, 0.5, 0)
    with pytest.raises(ConfigError):
        likelihood_score(gen.standard_normal(spec.shape), 1.0, ObservationSet(np.ones(8), 0.0), op,
                         GaussianDenoiser(), None)


def test_sigma_below_floor_rejected():
    with pytest.raises(ConfigError):
        likelihood_score(np.zeros(SCALAR.shape), 1e-5, ObservationSet([1.0], 1.0),
                         ObservationOperator.full(SCALAR), GaussianDenoiser(), None)


def test_observation_count_mismatch_rejected():
    with pytest.raises(ConfigError):
        likelihood_score(np.zeros(SCALAR.shape), 1.0, ObservationSet([1.0, 2.0], 1.0),
                         ObservationOperator.full(SCALAR), GaussianDenoiser(), None)


def test_doubling_R_halves_constant_mode_score(gen):
    spec = GridSpec(8, 8)
    D = SpectralGaussianDenoiser(GrfParams(2.0))
    op = ObservationOperator.random(spec, 0.3, 4)
    z = gen.standard_normal(spec.shape)
    vals = gen.standard_normal(op.n_obs)
    sched = GuidanceSchedule("constant")
    a = likelihood_score(z, 0.5, ObservationSet(vals, 0.4), op, D, None, sched)
    b = likelihood_score(z, 0.5, ObservationSet(vals, 0.8), op, D, None, sched)
    np.testing.assert_allclose(b, 0.5 * a, rtol=0, atol=1e-12 * np.abs(a).max())


def test_residual_normalized_mode_is_scale_free():
    a = _scalar_case("residual-normalized", y=1.0)
    b = _scalar_case("residual-normalized", y=7.0)
    np.testing.assert_allclose(a, b, rtol=1e-14)


def test_variance_corrected_scalar_is_exact_likelihood_score():
    # p(y | z) = N(y; 0.5 z, 1 + 0.5): d/dz log p at z = 0, y = 1 is 0.5 * 1 / 1.5
    assert _scalar_case("variance-corrected")[0, 0, 0] == pytest.approx(1.0 / 3.0, abs=1e-15)


def test_identity_jacobian_ablation_skips_pullback():
    D = GaussianDenoiser(0.0, 1.0)
    s = likelihood_score(np.zeros(SCALAR.shape), 1.0, ObservationSet([1.0], 1.0), ObservationOperator.full(SCALAR),
                         D, None, GuidanceSchedule("constant", 1.0, identity_jacobian=True))
    assert s[0, 0, 0] == pytest.approx(2.0)


@pytest.mark.parametrize("mode", ["constant", "variance-corrected"])
def test_gaussian_score_matches_finite_differences(mode):
    spec = GridSpec(8, 8)
    for D in (SpectralGaussianDenoiser(GrfParams(2.0)), DenseGaussianDenoiser.from_grf(8, 8, GrfParams(2.0))):
        assert max(dps_fd_errors(D, spec, 20, seed=3, mode=mode)) < 1e-5


def test_guidance_schedule_validation():
    with pytest.raises(ConfigError):
        GuidanceSchedule("annealed")
    with pytest.raises(ConfigError):
        GuidanceSchedule("constant", -1.0)


# ---------------------------------------------------------------------------
# posterior score


@given(st.integers(0, 2 ** 32 - 1))
def test_posterior_score_is_elementwise_sum(seed):
    g = np.random.default_rng(seed)
    a, b = g.standard_normal((2, 1, 3, 4))
    np.testing.assert_array_equal(posterior_score(a, b), a + b)
    np.testing.assert_array_equal(posterior_score(a, np.zeros_like(a)), a)
    np.testing.assert_array_equal(posterior_score(np.zeros_like(b), b), b)


def test_posterior_score_shape_mismatch():
    with pytest.raises(ConfigError):
        posterior_score(np.zeros((1, 2, 2)), np.zeros((1, 2, 3)))


# ---------------------------------------------------------------------------
# assimilation


@pytest.mark.parametrize("case", ["empty", "zeta0"])
def test_assimilate_without_guidance_is_prior_sampler(case):
    spec = GridSpec(6, 6)
    D = SpectralGaussianDenoiser(GrfParams(2.0))
    sched = build_schedule(20)
    if case == "empty":
        op, y, g = ObservationOperator.empty(spec), ObservationSet([], 1.0), GuidanceSchedule()
    else:
        op = ObservationOperator.random(spec, 0.5, 0)
        y, g = ObservationSet(np.ones(op.n_obs), 0.1), GuidanceSchedule("constant", 0.0)
    a = assimilate(D, None, y, op, sched, g, RngState(9), spec=spec).values
    b = sample_prior(D, None, sched, RngState(9), spec=spec).values
    assert np.array_equal(a, b)


def _conjugate_ensemble(n, sched, guidance):
    D = GaussianDenoiser(0.0, 1.0)
    op = ObservationOperator.full(SCALAR)
    y = ObservationSet([1.0], 1.0)

    def sampler(state):
        return assimilate(D, None, y, op, sched, guidance, state, spec=SCALAR)

    return generate_ensemble(n, sampler, 1, 2024).array()[:, 0, 0, 0]


def test_one_cell_conjugate_posterior():
    x = _conjugate_ensemble(1024, build_schedule(), GuidanceSchedule())
    assert abs(x.mean() - 0.5) < 0.07
    assert abs(x.var(ddof=1) - 0.5) < 0.15


def test_posterior_variance_below_prior_at_observed_cells():
    spec = GridSpec(4, 4)
    gen = RngState(77).generator()
    D = GaussianDenoiser(gen.uniform(-1, 1, spec.shape), gen.uniform(0.5, 2, spec.shape))
    sched = build_schedule(40)
    ratios = []
    for seed in range(5):
        op = ObservationOperator.random(spec, 0.25, seed)
        y = observe(gen.standard_normal(spec.shape), op, 0.25, RngState(seed, 1))
        prior = generate_ensemble(512, lambda st: sample_prior(D, None, sched, st, spec=spec), 1, seed).array()
        post = generate_ensemble(512, lambda st: assimilate(D, None, y, op, sched, GuidanceSchedule(), st,
                                                            spec=spec), 1, seed).array()
        vp = prior.var(axis=0, ddof=1)[op.mask]
        vq = post.var(axis=0, ddof=1)[op.mask]
        assert np.all(vq <= vp)
        ratios.append(vq.mean() / vp.mean())
    assert np.mean(ratios) < 1.0
