import numpy as np
import pytest
from scipy import stats

from stormda.denoisers.gaussian import DenseGaussianDenoiser, GaussianDenoiser, SpectralGaussianDenoiser
from stormda.diffusion import (add_noise, build_schedule, make_denoise_fn, reverse_step, run_reverse,
                               sample_prior, score_from_denoiser)
from stormda.errors import ConfigError
from stormda.fields import GridSpec, GrfParams, StateField
from stormda.rng import RngState
from stormda.tiling import plan_tiles


class Identity:
    def evaluate(self, z, sigma, ctx=None, origin=(0, 0)):
        return np.array(z, copy=True)


def test_schedule_endpoints_and_default_length():
    s = build_schedule()
    assert s.n_steps == 80
    assert s.sigmas[0] == 10.0 and s.sigmas[-1] == 0.002
    assert np.all(np.diff(s.array()) < 0)


def test_schedule_linear_case():
    np.testing.assert_allclose(build_schedule(3, 1.0, 3.0, 1.0).array(), [3.0, 2.0, 1.0], rtol=0, atol=1e-15)


@pytest.mark.parametrize("kw", [dict(n_steps=1), dict(sigma_min=0.0), dict(sigma_min=5, sigma_max=4), dict(rho=0)])
def test_schedule_rejects_bad_parameters(kw):
    with pytest.raises(ConfigError):
        build_schedule(**kw)


def test_schedule_csv():
    lines = build_schedule(3, 1.0, 3.0, 1.0).to_csv().splitlines()
    assert lines[0] == "i,sigma" and lines[2] == "1,2.0"


def test_add_noise_zero_sigma_is_exact(gen):
    x = gen.standard_normal((1, 4, 4))
    z = add_noise(x, 0.0, 1)
    assert z.values.tobytes() == x.tobytes()


def test_add_noise_variance():
    x = np.zeros((1, 64, 64))
    z = add_noise(x, 1.0, RngState(0))
    assert 0.9 <= np.var(z.values - x) <= 1.1


def test_add_noise_deterministic():
    x = np.zeros((1, 8, 8))
    assert add_noise(x, 0.5, RngState(3)).values.tobytes() == add_noise(x, 0.5, RngState(3)).values.tobytes()


def test_identity_denoiser_gives_zero_score(gen):
    z = gen.standard_normal((1, 3, 3))
    np.testing.assert_array_equal(score_from_denoiser(Identity(), z, sigma=0.7), 0.0)


def test_scalar_gaussian_score():
    s = score_from_denoiser(GaussianDenoiser(0.0, 1.0), np.array([2.0]), sigma=1.0)
    assert s[0] == -1.0


def test_gaussian_score_matches_closed_form(gen):
    mu = gen.uniform(-1, 1, (1, 6, 6))
    var = gen.uniform(0.3, 2.0, (1, 6, 6))
    D = GaussianDenoiser(mu, var)
    z = gen.standard_normal((1, 6, 6))
    for s in (0.01, 0.3, 1.0, 7.0):
        np.testing.assert_allclose(score_from_denoiser(D, z, sigma=s), -(z - mu) / (var + s * s),
                                   rtol=1e-12, atol=1e-12)


def test_score_floor_guard():
    with pytest.raises(ConfigError):
        score_from_denoiser(GaussianDenoiser(), np.zeros(1), sigma=0.0005)


def test_reverse_step_zero_score_ode_is_identity(gen):
    z = gen.standard_normal(5)
    np.testing.assert_array_equal(reverse_step(z, 2.0, 1.0, np.zeros(5), None, "ode"), z)


@pytest.mark.parametrize("mode", ["sde", "ode"])
def test_reverse_step_zero_increment(mode, gen):
    z = gen.standard_normal(5)
    np.testing.assert_array_equal(reverse_step(z, 1.0, 1.0, np.ones(5), 0, mode), z)


def test_reverse_step_formulas():
    z, S = np.array([1.0]), np.array([2.0])
    assert reverse_step(z, 2.0, 1.0, S, None, "ode")[0] == 1.0 + 0.5 * 3.0 * 2.0
    eps = RngState(4).generator().standard_normal(1)
    got = reverse_step(z, 2.0, 1.0, S, RngState(4), "sde")
    assert got[0] == 1.0 + 3.0 * 2.0 + np.sqrt(3.0) * eps[0]


def test_reverse_step_rejects_increasing_sigma():
    with pytest.raises(ConfigError):
        reverse_step(np.zeros(1), 1.0, 2.0, np.zeros(1), 0)


def test_ode_terminal_law_1d():
    D = GaussianDenoiser(0.0, 1.0)
    out = run_reverse(make_denoise_fn(D), (2000,), build_schedule(), RngState(0), "ode")
    assert stats.kstest(out, "norm").statistic < 0.05


def test_ode_preserves_correlated_marginals():
    grf = GrfParams(1.5)
    D = DenseGaussianDenoiser.from_grf(3, 3, grf)
    out = run_reverse(make_denoise_fn(D), (2000, 1, 3, 3), build_schedule(), RngState(1), "ode")
    flat = out.reshape(2000, 9)
    gen = RngState(2).generator()
    for _ in range(5):
        a = gen.standard_normal(9)
        proj = flat @ a
        sd = np.sqrt(a @ D.cov @ a)
        assert stats.kstest(proj / sd, "norm").pvalue > 0.01


def _prior_ensemble_zscores(seed=0):
    gen = RngState(7).generator()
    mu = gen.uniform(-1, 1, (1, 16, 16))
    var = gen.uniform(0.5, 2.0, (1, 16, 16))
    D = GaussianDenoiser(mu, var)
    out = run_reverse(make_denoise_fn(D), (512, 1, 16, 16), build_schedule(), RngState(seed), "sde")
    return (out.mean(axis=0) - mu) / np.sqrt(var / 512)


@pytest.mark.xfail(reason="a 3-sigma bound on each of 256 independent cells is exceeded somewhere "
                          "with probability ~0.5 even for an exact sampler", strict=False)
def test_sample_prior_ensemble_mean_every_cell_within_3_sigma():
    assert np.all(np.abs(_prior_ensemble_zscores()) < 3.0)


def test_sample_prior_ensemble_mean_calibrated():
    z = _prior_ensemble_zscores()
    # exceedances of 3 sigma ~ Binomial(256, 0.0027): P(count > 4) < 1e-3
    assert np.sum(np.abs(z) >= 3.0) <= 4
    assert abs(z.mean()) < 3.0 / 16
    assert 0.85 < z.std() < 1.15


def test_sample_prior_ode_bit_reproducible():
    D = SpectralGaussianDenoiser(GrfParams(2.0))
    spec = GridSpec(8, 8)
    a = sample_prior(D, None, build_schedule(20), RngState(5), "ode", spec=spec)
    b = sample_prior(D, None, build_schedule(20), RngState(5), "ode", spec=spec)
    assert isinstance(a, StateField)
    assert a.values.tobytes() == b.values.tobytes()


def test_full_overlap_tiling_matches_untiled():
    D = SpectralGaussianDenoiser(GrfParams(2.0))
    spec = GridSpec(8, 8)
    sched = build_schedule(30)
    a = sample_prior(D, None, sched, RngState(2), "sde", spec=spec)
    b = sample_prior(D, None, sched, RngState(2), "sde", spec=spec, tiling=plan_tiles(spec, 4, 4))
    np.testing.assert_allclose(b.values, a.values, atol=1e-6, rtol=0)


def test_trajectory_dump(tmp_path):
    from stormda.io import read_fields

    spec = GridSpec(4, 4)
    sample_prior(GaussianDenoiser(), None, build_schedule(5), RngState(0), spec=spec, trajectory_dir=tmp_path)
    files = sorted(tmp_path.glob("step_*.sdaf"))
    assert len(files) == 4
    assert read_fields(files[0]).shape == (1, 1, 4, 4)
