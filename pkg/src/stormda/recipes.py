"""End-to-end recipes shared by the command line and the acceptance suite."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .diffusion import NoiseSchedule, build_schedule, sample_prior
from .ensemble import Ensemble, crps, generate_ensemble
from .errors import ConfigError
from .fields import GridSpec, GrfParams, StateField, TemporalContext, ToyDynamics, evolve_context, sample_grf
from .guidance import GuidanceSchedule, ObservationOperator, ObservationSet, assimilate, observe
from .rng import RngState

log = logging.getLogger(__name__)

# substreams of the run seed
S_TRUTH, S_CONTEXT, S_STEP, S_OBS, S_MEMBERS = range(5)


def grid_of(cfg: RunConfig) -> GridSpec:
    return GridSpec(cfg.ny, cfg.nx, cfg.n_vars, cfg.patch, max(cfg.K, 1))


def grf_of(cfg: RunConfig) -> GrfParams:
    return GrfParams(cfg.length_scale, cfg.variance, cfg.prior_mean)


def schedule_of(cfg: RunConfig) -> NoiseSchedule:
    return build_schedule(cfg.n_steps, cfg.sigma_min, cfg.sigma_max, cfg.rho)


def plan_of(cfg: RunConfig, spec: GridSpec):
    if not cfg.core:
        return None
    from .tiling import plan_tiles

    return plan_tiles(spec, cfg.core, cfg.halo)


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class Dataset:
    truth: StateField
    context: TemporalContext | None


def generate_dataset(cfg: RunConfig) -> Dataset:
    """GRF draw ``x0``; with ``K > 0`` the context is ``K`` toy-model frames from ``x0``
    and the truth is one further (noisy) model step."""
    spec = grid_of(cfg)
    root = RngState(cfg.seed)
    x0 = sample_grf(spec, grf_of(cfg), root.child(S_TRUTH))
    if cfg.K == 0:
        return Dataset(x0, None)
    dyn = ToyDynamics(cfg.shift, cfg.smooth)
    ctx = evolve_context(x0, cfg.K, cfg.model_noise, root.child(S_CONTEXT), dyn)
    nxt = dyn.apply(ctx.frames[-1].values)
    if cfg.model_noise:
        nxt = nxt + cfg.model_noise * root.child(S_STEP).generator().standard_normal(nxt.shape)
    return Dataset(StateField(spec, nxt), ctx)


def write_dataset(data: Dataset, directory) -> dict:
    """One container per context frame plus the truth; returns ``{name: sha256}``."""
    from .io import write_field

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    out = {}
    if data.context is not None:
        for i, f in enumerate(data.context.frames):
            out[f"frame_{i:03d}.sdaf"] = write_field(d / f"frame_{i:03d}.sdaf", f)
    out["truth.sdaf"] = write_field(d / "truth.sdaf", data.truth)
    return out


def read_dataset(directory, patch: int = 1) -> Dataset:
    from .io import read_state

    d = Path(directory)
    if not (d / "truth.sdaf").exists():
        raise ConfigError(f"{d} holds no truth.sdaf")
    truth = read_state(d / "truth.sdaf", patch)
    frames = [read_state(p, patch) for p in sorted(d.glob("frame_*.sdaf"))]
    ctx = TemporalContext(tuple(frames)) if frames else None
    return Dataset(truth, ctx)


def load_dataset(cfg: RunConfig) -> Dataset:
    return read_dataset(cfg.data, cfg.patch) if cfg.data else generate_dataset(cfg)


# ---------------------------------------------------------------------------
# denoisers


def build_denoiser(cfg: RunConfig):
    from .denoisers.gaussian import DenseGaussianDenoiser, GaussianDenoiser, SpectralGaussianDenoiser

    if cfg.denoiser == "gaussian":
        return GaussianDenoiser(cfg.prior_mean, cfg.variance)
    if cfg.denoiser == "spectral":
        return SpectralGaussianDenoiser(grf_of(cfg))
    if cfg.denoiser == "dense":
        if cfg.n_vars != 1:
            raise ConfigError("the dense Gaussian denoiser handles a single variable")
        return DenseGaussianDenoiser.from_grf(cfg.ny, cfg.nx, grf_of(cfg))
    if not cfg.params:
        raise ConfigError("denoiser 'storm' needs params (a trained parameter file)")
    from .denoisers.train import load_params

    model = load_params(cfg.params, dtype=np.float64)
    if model.cfg.patch != cfg.patch or model.cfg.n_vars != cfg.n_vars:
        raise ConfigError(f"params were trained for patch={model.cfg.patch}, n_vars={model.cfg.n_vars}")
    return model


# ---------------------------------------------------------------------------
# observation + ensemble


def make_observations(cfg: RunConfig, truth: StateField) -> tuple[ObservationOperator, ObservationSet]:
    op = ObservationOperator.random(truth.spec, cfg.obs_fraction, cfg.seed)
    y = observe(truth, op, cfg.obs_noise, RngState(cfg.seed).child(S_OBS))
    return op, y


def run_ensemble(cfg: RunConfig, D, data: Dataset, op=None, y=None, provenance: str | None = None) -> Ensemble:
    spec = data.truth.spec
    sched = schedule_of(cfg)
    plan = plan_of(cfg, spec)
    ctx = data.context
    prov = provenance or cfg.mode
    if prov == "prior":
        def sampler(state):
            return sample_prior(D, ctx, sched, state, cfg.sampler, tiling=plan, spec=spec)
    else:
        if op is None:
            op, y = make_observations(cfg, data.truth)
        guide = GuidanceSchedule(cfg.guidance, cfg.zeta0)

        def sampler(state):
            return assimilate(D, ctx, y, op, sched, guide, state, cfg.sampler, tiling=plan, spec=spec)

    fp = config_fingerprint(cfg)
    return generate_ensemble(cfg.members, sampler, cfg.workers, RngState(cfg.seed).child(S_MEMBERS),
                             provenance=prov, fingerprint=fp)


def config_fingerprint(cfg: RunConfig) -> str:
    return hashlib.sha256(cfg.to_text().encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# conjugate Gaussian verification


@dataclass
class ConjugateReport:
    rmse: float
    rmse_tol: float
    max_var_rel_err: float
    var_tol: float
    n_obs: int
    members: int

    @property
    def passed(self) -> bool:
        return self.rmse < self.rmse_tol and self.max_var_rel_err <= self.var_tol

    def lines(self) -> list[str]:
        return [
            f"posterior mean RMSE {self.rmse:.4f} (tolerance {self.rmse_tol:.4f}): "
            + ("PASS" if self.rmse < self.rmse_tol else "FAIL"),
            f"max relative variance error at {self.n_obs} observed cells {self.max_var_rel_err:.3f} "
            f"(tolerance {self.var_tol:.2f}): " + ("PASS" if self.max_var_rel_err <= self.var_tol else "FAIL"),
        ]


def conjugate_problem(ny=16, nx=16, seed=0):
    """Heterogeneous diagonal prior: per-cell means in [-1, 1] and variances in [0.5, 2]."""
    gen = RngState(seed, 0xC0).generator()
    mean = gen.uniform(-1.0, 1.0, (1, ny, nx))
    var = gen.uniform(0.5, 2.0, (1, ny, nx))
    return mean, var


def conjugate_check(members: int = 1024, obs_fraction: float = 0.2, R: float = 0.25, n_steps: int = 256,
                    seed: int = 0, workers: int = 1, ny: int = 16, nx: int = 16,
                    guidance: str = "variance-corrected") -> ConjugateReport:
    """Posterior ensemble under likelihood guidance against the closed-form update."""
    from .denoisers.gaussian import GaussianDenoiser
    from .oracle import exact_gaussian_posterior

    mean, var = conjugate_problem(ny, nx, seed)
    spec = GridSpec(ny, nx)
    root = RngState(seed)
    truth = mean + np.sqrt(var) * root.child(S_TRUTH).generator().standard_normal(mean.shape)
    op = ObservationOperator.random(spec, obs_fraction, seed)
    y = observe(truth, op, R, root.child(S_OBS))
    post = exact_gaussian_posterior(mean, var, op.mask, R, y)
    D = GaussianDenoiser(mean, var)
    sched = build_schedule(n_steps)
    guide = GuidanceSchedule(guidance, 1.0)

    def sampler(state):
        return assimilate(D, None, y, op, sched, guide, state, "sde", spec=spec)

    ens = generate_ensemble(members, sampler, workers, root.child(S_MEMBERS), provenance="posterior")
    arr = ens.array()
    m = arr.mean(axis=0)
    v = arr.var(axis=0, ddof=1)
    rmse = float(np.sqrt(np.mean((m - post.mean) ** 2)))
    rel = np.abs(v[op.mask] / post.var[op.mask] - 1.0)
    sigma_p = float(np.sqrt(np.mean(var)))
    return ConjugateReport(rmse, 0.05 * sigma_p, float(rel.max()) if rel.size else 0.0, 0.2, op.n_obs, members)


# ---------------------------------------------------------------------------
# CRPS versus observation density


def crps_by_fraction(fractions=(0.0, 0.1, 0.2), seed: int = 0, members: int = 256, ny: int = 16, nx: int = 16,
                     length_scale: float = 4.0, R: float = 0.25, n_steps: int = 80, workers: int = 1) -> list[float]:
    """CRPS of the posterior ensemble against a GRF truth for each observation fraction.

    The truth, the observation noise and the member random streams are shared
    across fractions, so only the observation set differs.
    """
    from .denoisers.gaussian import SpectralGaussianDenoiser

    grf = GrfParams(length_scale)
    spec = GridSpec(ny, nx)
    root = RngState(seed)
    truth = sample_grf(spec, grf, root.child(S_TRUTH))
    noise = root.child(S_OBS).generator().standard_normal(spec.shape)
    D = SpectralGaussianDenoiser(grf)
    sched = build_schedule(n_steps)
    guide = GuidanceSchedule("variance-corrected", 1.0)
    out = []
    for frac in fractions:
        op = ObservationOperator.random(spec, frac, seed)
        y = ObservationSet(op.apply(truth.values + np.sqrt(R) * noise), R)

        def sampler(state, op=op, y=y):
            return assimilate(D, None, y, op, sched, guide, state, "sde", spec=spec)

        ens = generate_ensemble(members, sampler, workers, root.child(S_MEMBERS))
        out.append(crps(ens, truth))
    return out


# ---------------------------------------------------------------------------
# trained toy denoiser (cached by configuration)

TOY_SPEC = dict(ny=16, nx=16, length_scale=4.0)


def toy_configs(steps: int = 12000):
    from .denoisers.storm import StormConfig
    from .denoisers.train import TrainConfig

    storm = StormConfig(n_vars=1, patch=2, d_model=64, n_layers=2, n_heads=4)
    train = TrainConfig(steps=steps, batch_size=16, lr=2e-3, lr_schedule="cosine", seed=0)
    return storm, train


def trained_toy_denoiser(cache_dir, steps: int = 12000):
    """Train the unconditional GRF toy model once and reuse it from ``cache_dir``."""
    from .denoisers.train import GrfDataset, load_params, save_params, train_denoiser

    storm_cfg, train_cfg = toy_configs(steps)
    key = json.dumps({"storm": asdict(storm_cfg), "train": asdict(train_cfg), "data": TOY_SPEC}, sort_keys=True)
    digest = hashlib.sha256(key.encode()).hexdigest()[:16]
    path = Path(cache_dir) / f"toy_{digest}.sdnp"
    if path.exists():
        return load_params(path, dtype=np.float64)
    spec = GridSpec(TOY_SPEC["ny"], TOY_SPEC["nx"], 1, storm_cfg.patch)
    ds = GrfDataset(spec, GrfParams(TOY_SPEC["length_scale"]))
    log.info("training toy denoiser (%d steps), cache %s", steps, path)
    res = train_denoiser(ds, train_cfg, storm_cfg)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_params(path, res.model)
    return load_params(path, dtype=np.float64)
