"""Registered invariant suites; ``stormda verify`` exits 0 iff all pass."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .diffusion import build_schedule
from .fields import GridSpec, GrfParams
from .guidance import GuidanceSchedule, ObservationOperator, ObservationSet, likelihood_score
from .rng import RngState

SUITES: dict[str, Callable] = {}


def suite(name):
    def deco(fn):
        SUITES[name] = fn
        return fn

    return deco


# ---------------------------------------------------------------------------
# reusable checks


def partition_error(plans) -> float:
    from .tiling import hanning_weights

    return max(float(np.abs(hanning_weights(p).coverage_sum() - 1.0).max()) for p in plans)


def tweedie_error(D, spec: GridSpec, schedule, seed: int = 0) -> float:
    """Max relative gap between ``(D(z) - z) / sigma^2`` and the closed-form prior score."""
    gen = RngState(seed, 0x7E).generator()
    worst = 0.0
    for s in schedule.sigmas:
        z = s * gen.standard_normal(spec.shape) + gen.standard_normal(spec.shape)
        a = (D.evaluate(z, s) - z) / (s * s)
        b = D.prior_score(z, s)
        worst = max(worst, float(np.abs(a - b).max() / np.abs(b).max()))
    return worst


def score_cosine(D, ref, sample: Callable, sigma: float, n: int = 64, seed: int = 0) -> float:
    """Mean per-sample cosine between the Tweedie score of ``D`` and ``ref.prior_score``.

    ``sample(gen)`` draws one clean state; probes are ``x + sigma * eps``.
    """
    gen = RngState(seed, 0xC5).generator()
    cs = []
    for _ in range(n):
        x = sample(gen)
        z = x + sigma * gen.standard_normal(x.shape)
        a = (D.evaluate(z, sigma) - z) / (sigma * sigma)
        b = ref.prior_score(z, sigma)
        cs.append(float(np.sum(a * b) / np.sqrt(np.sum(a * a) * np.sum(b * b))))
    return float(np.mean(cs))


def dps_fd_errors(D, spec: GridSpec, n: int = 20, seed: int = 0, sigmas=(0.05, 0.5, 2.0, 8.0),
                  mode: str = "constant", obs_fraction: float = 0.5, R: float = 0.3, h: float = 1e-5,
                  ctx=None) -> list[float]:
    """Relative error of the guidance score against central differences of the misfit.

    Each triple is (probe point, noise level, observation vector); the score is
    checked along a random unit direction.  In the ``constant`` and
    ``variance-corrected`` modes the weights do not depend on ``z`` and the
    score is ``-grad_z sum(w r^2) / 2`` with ``r = h(D(z)) - y``.
    """
    from .oracle import fd_check

    root = RngState(seed, 0xFD)
    op = ObservationOperator.random(spec, obs_fraction, seed)
    sched = GuidanceSchedule(mode, 0.7)
    errs = []
    for i in range(n):
        gen = root.child(i).generator()
        s = float(sigmas[i % len(sigmas)])
        z = gen.standard_normal(spec.shape) * np.sqrt(1.0 + s * s)
        y = ObservationSet(gen.standard_normal(op.n_obs), R)
        v = gen.standard_normal(spec.shape)
        v /= np.linalg.norm(v)
        if mode == "constant":
            w = 2.0 * sched.zeta0 / y.R()
        else:
            w = sched.zeta0 / (y.R() + op.apply(D.posterior_variance(s, spec.shape)))

        def misfit(x):
            r = op.apply(D.evaluate(x, s, ctx)) - y.values
            return 0.5 * float(np.sum(w * r * r))

        score = likelihood_score(z, s, y, op, D, ctx, sched)
        errs.append(fd_check(misfit, z, v, h, analytic=-float(np.sum(score * v))))
    return errs


def single_tile_equal(D, spec: GridSpec, seed: int = 0, ctx=None) -> bool:
    from .tiling import plan_tiles, tiled_denoise

    gen = RngState(seed).generator()
    z = gen.standard_normal(spec.shape)
    plan = plan_tiles(spec, spec.ny if spec.ny == spec.nx else np.gcd(spec.ny, spec.nx), 0)
    if plan.n_tiles != 1:
        return False
    return bool(np.array_equal(tiled_denoise(D, z, 0.7, ctx, plan), D.evaluate(z, 0.7, ctx)))


# ---------------------------------------------------------------------------
# suites: each returns (ok, detail)


@suite("partition-of-unity")
def _pou():
    from .tiling import plan_tiles

    plans = [plan_tiles(GridSpec(ny, nx), c, h) for ny, nx, c, h in
             [(16, 16, 4, 2), (16, 16, 8, 4), (24, 16, 8, 3), (32, 32, 8, 8), (12, 18, 6, 5), (16, 16, 16, 4)]]
    e = partition_error(plans)
    return e < 1e-12, f"max |sum w - 1| = {e:.2e}"


@suite("tweedie-identity")
def _tweedie():
    from .denoisers.gaussian import GaussianDenoiser, SpectralGaussianDenoiser

    spec = GridSpec(16, 16)
    sched = build_schedule()
    gen = RngState(3).generator()
    diag = GaussianDenoiser(gen.uniform(-1, 1, spec.shape), gen.uniform(0.5, 2, spec.shape))
    e = max(tweedie_error(diag, spec, sched), tweedie_error(SpectralGaussianDenoiser(GrfParams(4.0)), spec, sched))
    return e < 1e-10, f"max relative score gap = {e:.2e}"


@suite("dps-gradient")
def _dps():
    from .denoisers.gaussian import DenseGaussianDenoiser, SpectralGaussianDenoiser

    spec = GridSpec(8, 8)
    e = max(max(dps_fd_errors(SpectralGaussianDenoiser(GrfParams(2.0)), spec, 10)),
            max(dps_fd_errors(DenseGaussianDenoiser.from_grf(8, 8, GrfParams(2.0)), spec, 10,
                              mode="variance-corrected")))
    return e < 1e-5, f"max relative error = {e:.2e}"


@suite("tiling-single-tile")
def _single():
    from .denoisers.gaussian import SpectralGaussianDenoiser
    from .denoisers.storm import StormConfig, StormDenoiser, init_params

    spec = GridSpec(8, 8, 1, 2)
    sc = StormConfig(1, 2, 16, 1, 2, 4)
    storm = StormDenoiser(sc, init_params(sc, 0, zero_out=False), np.float64)
    ok = single_tile_equal(SpectralGaussianDenoiser(GrfParams(2.0)), spec) and single_tile_equal(storm, spec)
    return ok, "bit-equal" if ok else "differs"


@suite("tiling-pointwise")
def _pointwise():
    from .denoisers.gaussian import GaussianDenoiser
    from .tiling import plan_tiles, tiled_denoise

    spec = GridSpec(16, 24)
    gen = RngState(5).generator()
    D = GaussianDenoiser(gen.uniform(-1, 1, spec.shape), gen.uniform(0.5, 2, spec.shape))
    z = gen.standard_normal(spec.shape)
    e = max(float(np.abs(tiled_denoise(D, z, 1.3, None, plan_tiles(spec, c, h)) - D.evaluate(z, 1.3)).max())
            for c, h in [(8, 0), (8, 2), (8, 4), (4, 3)])
    return e < 1e-10, f"max |tiled - global| = {e:.2e}"


@suite("crps-estimator")
def _crps():
    from .ensemble import crps, crps_pairwise

    gen = RngState(7).generator()
    ens = gen.standard_normal((33, 1, 5, 6))
    truth = gen.standard_normal((1, 5, 6))
    e = abs(crps(ens, truth) - crps_pairwise(ens, truth))
    return e < 1e-12, f"|sorted - pairwise| = {e:.2e}"


@suite("ensemble-determinism")
def _determinism():
    from .denoisers.gaussian import GaussianDenoiser
    from .diffusion import sample_prior
    from .ensemble import generate_ensemble

    spec = GridSpec(4, 4)
    D = GaussianDenoiser(0.0, 1.0)
    sched = build_schedule(8)

    def sampler(state):
        return sample_prior(D, None, sched, state, spec=spec)

    a = generate_ensemble(6, sampler, 1, 11).digest()
    b = generate_ensemble(6, sampler, 3, 11).digest()
    return a == b, a[:16]


@suite("cost-model")
def _cost():
    from .bench.cost import CostModel, count_attention_flops
    from .bench.harness import profile, timesformer_workload, vit_workload

    d, H = 16, 2
    worst = 0.0
    for K, N in [(2, 64), (4, 32)]:
        got = profile(vit_workload(K * N, d, H, K, 0)).flops["attn_scores"]
        want = count_attention_flops(CostModel("vit-global", N, K, d_model=d))
        worst = max(worst, abs(got - want) / want)
        got = profile(timesformer_workload(N, K, d, H, 0)).flops["attn_scores"]
        want = count_attention_flops(CostModel("timesformer", N, K, d_model=d))
        worst = max(worst, abs(got - want) / want)
    return worst < 0.01, f"max relative flop gap = {worst:.2e}"


def run_suites(seed: int = 0, names=None) -> list[tuple[str, bool, str]]:
    out = []
    for name, fn in SUITES.items():
        if names and name not in names:
            continue
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing suite is a failing suite
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append((name, bool(ok), detail))
    return out
