"""Noise schedules, forward noising and reverse-time samplers.

The noise level is identified with diffusion time (``sigma(t) = t``), so the
reverse SDE ``dz = -2 sigma' sigma S dt + sqrt(2 sigma' sigma) dW`` becomes,
over one step from ``sigma_i`` down to ``sigma_j``::

    sde:  z' = z + (sigma_i^2 - sigma_j^2) S + sqrt(sigma_i^2 - sigma_j^2) eps
    ode:  z' = z + 0.5 (sigma_i^2 - sigma_j^2) S

Both are plain first-order (Euler-Maruyama / Euler) steps.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigError, NumericalError
from .fields import StateField, TemporalContext
from .rng import as_generator

log = logging.getLogger(__name__)

SIGMA_MIN = 0.002
SIGMA_MAX = 10.0
RHO = 7.0
N_STEPS = 80
MODES = ("sde", "ode")


@dataclass(frozen=True)
class NoiseSchedule:
    sigmas: tuple
    sigma_min: float
    sigma_max: float
    rho: float

    @property
    def n_steps(self) -> int:
        return len(self.sigmas)

    @property
    def sigma_floor(self) -> float:
        return 0.5 * self.sigma_min

    def array(self) -> np.ndarray:
        return np.asarray(self.sigmas, dtype=np.float64)

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["i", "sigma"])
        for i, s in enumerate(self.sigmas):
            w.writerow([i, repr(float(s))])
        return out.getvalue()


def build_schedule(
    n_steps: int = N_STEPS,
    sigma_min: float = SIGMA_MIN,
    sigma_max: float = SIGMA_MAX,
    rho: float = RHO,
) -> NoiseSchedule:
    """Karras-style ladder ``(smax^(1/rho) + i/(n-1) (smin^(1/rho) - smax^(1/rho)))^rho``."""
    if int(n_steps) != n_steps or n_steps < 2:
        raise ConfigError("n_steps must be an integer >= 2")
    if not 0.0 < sigma_min < sigma_max:
        raise ConfigError("need 0 < sigma_min < sigma_max")
    if not rho > 0:
        raise ConfigError("rho must be > 0")
    i = np.arange(n_steps, dtype=np.float64)
    a, b = sigma_max ** (1.0 / rho), sigma_min ** (1.0 / rho)
    s = (a + i / (n_steps - 1) * (b - a)) ** rho
    s[0], s[-1] = sigma_max, sigma_min
    if np.any(np.diff(s) >= 0):
        raise ConfigError("schedule is not strictly decreasing; reduce n_steps or widen the range")
    return NoiseSchedule(tuple(float(x) for x in s), float(sigma_min), float(sigma_max), float(rho))


@dataclass(frozen=True)
class NoisyState:
    values: np.ndarray
    sigma: float

    def __post_init__(self):
        if self.sigma < 0:
            raise ConfigError("sigma must be >= 0")


def add_noise(x: StateField | np.ndarray, sigma: float, rng) -> NoisyState:
    if sigma < 0:
        raise ConfigError("sigma must be >= 0")
    vals = x.values if isinstance(x, StateField) else np.asarray(x)
    if sigma == 0:
        return NoisyState(np.array(vals, copy=True), 0.0)
    eps = as_generator(rng).standard_normal(vals.shape)
    return NoisyState(vals + sigma * eps, float(sigma))


def score_from_denoiser(D, z: NoisyState | np.ndarray, ctx=None, sigma: float | None = None,
                        sigma_floor: float = 0.5 * SIGMA_MIN, **kw) -> np.ndarray:
    """Prior score ``(D(z, sigma; ctx) - z) / sigma^2``."""
    if isinstance(z, NoisyState):
        sigma = z.sigma if sigma is None else sigma
        z = z.values
    if sigma is None or sigma < sigma_floor:
        raise ConfigError(f"sigma {sigma} below floor {sigma_floor}; 1/sigma^2 guard")
    xhat = D.evaluate(z, sigma, ctx, **kw)
    return (xhat - z) / (sigma * sigma)


def reverse_step(z: np.ndarray, sigma_i: float, sigma_next: float, score: np.ndarray,
                 rng=None, mode: str = "sde") -> np.ndarray:
    if sigma_next > sigma_i:
        raise ConfigError(f"reverse step must not increase sigma ({sigma_i} -> {sigma_next})")
    if sigma_next < 0:
        raise ConfigError("sigma must stay >= 0")
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    dv = sigma_i * sigma_i - sigma_next * sigma_next
    if dv == 0:
        return np.array(z, copy=True)
    if mode == "ode":
        return z + 0.5 * dv * score
    eps = as_generator(rng).standard_normal(np.shape(z))
    return z + dv * score + np.sqrt(dv) * eps


def make_denoise_fn(D, ctx=None, tiling=None, workers: int = 1) -> Callable:
    """``(z, sigma) -> xhat``, routed through tiled denoising when a plan is given."""
    if tiling is None:
        return lambda z, s: D.evaluate(z, s, ctx)
    from .tiling import tiled_denoise

    return lambda z, s: tiled_denoise(D, z, s, ctx, tiling, workers=workers)


def run_reverse(
    denoise: Callable,
    shape: tuple,
    schedule: NoiseSchedule,
    rng,
    mode: str = "sde",
    extra_score: Callable | None = None,
    trajectory: Callable | None = None,
    perturb: Callable | None = None,
) -> np.ndarray:
    """Full reverse trajectory; returns the final denoised estimate at ``sigma_min``.

    ``extra_score(z, sigma, xhat)`` adds a likelihood term to the prior score;
    ``perturb(z0)`` edits the initial noise after it is drawn.
    """
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    gen = as_generator(rng)
    sig = schedule.sigmas
    z = sig[0] * gen.standard_normal(shape)
    if perturb is not None:
        z = perturb(z)
    for i in range(len(sig) - 1):
        s = sig[i]
        xhat = denoise(z, s)
        score = (xhat - z) / (s * s)
        if extra_score is not None:
            lik = extra_score(z, s, xhat)
            if lik is not None:
                score = score + lik
        if not np.all(np.isfinite(score)):
            raise NumericalError(f"non-finite score at step {i} (sigma={s:.4g})")
        z = reverse_step(z, s, sig[i + 1], score, gen, mode)
        if trajectory is not None:
            trajectory(i + 1, z)
    return denoise(z, sig[-1])


def sample_prior(
    D,
    ctx: TemporalContext | None,
    schedule: NoiseSchedule,
    rng,
    mode: str = "sde",
    tiling=None,
    shape: tuple | None = None,
    spec=None,
    workers: int = 1,
    trajectory_dir=None,
) -> StateField:
    """One prior sample ``x ~ p(x_k | context)`` by reverse diffusion."""
    spec = spec or (ctx.spec if ctx is not None else None)
    if spec is None:
        raise ConfigError("a grid spec is required when no context is given")
    shape = shape or spec.shape
    traj = _trajectory_writer(trajectory_dir)
    out = run_reverse(make_denoise_fn(D, ctx, tiling, workers), shape, schedule, rng, mode,
                      trajectory=traj)
    return StateField(spec, np.asarray(out, dtype=np.float64))


def _trajectory_writer(directory):
    if directory is None:
        return None
    from .io import write_field

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)

    def write(step, z):
        write_field(d / f"step_{step:04d}.sdaf", np.asarray(z)[None])

    return write
