import math

import numpy as np
import pytest

from stormda.errors import ConfigError
from stormda.fields import (GridSpec, GrfParams, StateField, TemporalContext, ToyDynamics, evolve_context,
                            grf_covariance_row, make_grid, patchify, sample_grf, unpatchify)
from stormda.rng import RngState


def test_token_count_small():
    assert make_grid(8, 8, 1, 2, 4).n_tokens == 16


def test_token_count_reanalysis_grid():
    assert make_grid(720, 1440, 6, 2, 8).n_tokens == 259200


def test_non_divisible_patch_rejected():
    with pytest.raises(ConfigError):
        make_grid(8, 6, 1, 4, 1)


@pytest.mark.parametrize("bad", [dict(ny=0, nx=4), dict(ny=4, nx=4, K=0), dict(ny=4, nx=4, n_vars=0)])
def test_grid_rejects_non_positive(bad):
    with pytest.raises(ConfigError):
        GridSpec(**bad)


def test_state_field_rejects_wrong_shape_and_nan():
    spec = GridSpec(2, 3)
    with pytest.raises(ConfigError):
        StateField(spec, np.zeros((1, 3, 2)))
    with pytest.raises(ConfigError):
        StateField(spec, np.full((1, 2, 3), np.nan))


def test_state_field_is_read_only():
    f = StateField(GridSpec(2, 2), np.zeros((1, 2, 2)))
    with pytest.raises(ValueError):
        f.values[0, 0, 0] = 1.0


def test_zero_variance_grf_is_constant_mean():
    f = sample_grf(GridSpec(8, 8), GrfParams(3.0, 0.0, 1.7), 0)
    np.testing.assert_array_equal(f.values, 1.7)


def test_infinite_length_scale_gives_constant_offset():
    f = sample_grf(GridSpec(8, 8), GrfParams(math.inf, 1.0), 3)
    assert np.ptp(f.values) < 1e-12
    assert abs(f.values[0, 0, 0]) > 0


def test_grf_covariance_row_matches_kernel_at_origin():
    row = grf_covariance_row(32, 32, GrfParams(4.0, 2.0))
    assert row[0, 0] == pytest.approx(2.0, rel=1e-12)
    # well inside the period the periodised kernel equals the plain kernel
    assert row[0, 4] == pytest.approx(2.0 * math.exp(-0.5), rel=1e-9)


def test_grf_lag4_correlation_monte_carlo():
    spec = GridSpec(64, 64)
    grf = GrfParams(4.0, 1.0)
    est = []
    for s in range(100):
        x = sample_grf(spec, grf, RngState(s)).values[0]
        x = x - x.mean()
        est.append(np.mean(x * np.roll(x, 4, axis=1)) / np.mean(x * x))
    assert abs(np.mean(est) - math.exp(-0.5)) < 0.1


def test_grf_bit_reproducible():
    spec = GridSpec(16, 16)
    a = sample_grf(spec, GrfParams(), RngState(9, 2)).values
    b = sample_grf(spec, GrfParams(), RngState(9, 2)).values
    assert a.tobytes() == b.tobytes()


def test_identity_dynamics_without_noise_repeats_x0():
    x0 = sample_grf(GridSpec(6, 6), GrfParams(2.0), 1)
    ctx = evolve_context(x0, 4, 0.0, 0, ToyDynamics(0, 0.0))
    for f in ctx.frames:
        np.testing.assert_array_equal(f.values, x0.values)


def test_single_frame_context():
    x0 = sample_grf(GridSpec(6, 6), GrfParams(2.0), 1)
    ctx = evolve_context(x0, 1, 0.3, 0)
    assert ctx.K == 1
    np.testing.assert_array_equal(ctx.frames[0].values, x0.values)


def test_pure_shift_three_frames():
    x0 = sample_grf(GridSpec(5, 7), GrfParams(2.0), 4)
    ctx = evolve_context(x0, 4, 0.0, 0, ToyDynamics(1, 0.0))
    np.testing.assert_array_equal(ctx.frames[3].values, np.roll(x0.values, 3, axis=-1))


def test_noise_free_context_is_deterministic():
    x0 = sample_grf(GridSpec(6, 6), GrfParams(2.0), 1)
    a = evolve_context(x0, 3, 0.0, 1).array()
    b = evolve_context(x0, 3, 0.0, 2).array()
    np.testing.assert_array_equal(a, b)


def test_context_rejects_mixed_grids():
    a = StateField(GridSpec(2, 2), np.zeros((1, 2, 2)))
    b = StateField(GridSpec(2, 4), np.zeros((1, 2, 4)))
    with pytest.raises(ConfigError):
        TemporalContext((a, b))


def test_patchify_shapes():
    spec = GridSpec(4, 4, 1, 2)
    t = patchify(np.arange(16.0).reshape(1, 4, 4), spec)
    assert t.shape == (4, 4)


def test_patchify_token_ordering():
    # row-major over the patch grid, row-major inside the patch, variables fastest
    spec = GridSpec(4, 4, 2, 2)
    x = np.zeros(spec.shape)
    x[1, 2, 3] = 1.0
    t = patchify(x, spec)
    tok, off = np.argwhere(t == 1.0)[0]
    assert tok == (2 // 2) * 2 + 3 // 2
    assert off == ((2 % 2) * 2 + 3 % 2) * 2 + 1


def test_patchify_single_var_cell_2_3():
    spec = GridSpec(4, 8, 1, 2)
    x = np.zeros(spec.shape)
    x[0, 2, 3] = 1.0
    tok, off = np.argwhere(patchify(x, spec) == 1.0)[0]
    assert (tok, off) == (5, 1)


def test_unpatchify_rejects_bad_shape():
    with pytest.raises(ConfigError):
        unpatchify(np.zeros((3, 4)), GridSpec(4, 4, 1, 2))
