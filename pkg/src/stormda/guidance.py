"""Observation model and likelihood guidance for posterior sampling.

Observations are pointwise: ``y = x[mask] + sqrt(R) eps``.  During reverse
sampling the prior score is augmented with a likelihood score obtained by
differentiating the observation misfit of the denoised estimate
``xhat(z) = D(z, sigma; ctx)`` through the denoiser.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffusion import NoiseSchedule, make_denoise_fn, run_reverse, _trajectory_writer
from .errors import ConfigError
from .fields import GridSpec, StateField, TemporalContext
from .rng import as_generator

GUIDANCE_MODES = ("variance-corrected", "constant", "residual-normalized")


@dataclass(frozen=True)
class ObservationOperator:
    """Boolean mask over ``(var, row, col)``; observed entries are read in C order."""

    mask: np.ndarray
    kind: str = "mask"
    seed: int | None = None

    def __post_init__(self):
        m = np.array(self.mask, dtype=bool)
        if m.ndim != 3:
            raise ConfigError("observation mask must have shape (n_vars, ny, nx)")
        m.flags.writeable = False
        object.__setattr__(self, "mask", m)

    @property
    def shape(self) -> tuple:
        return self.mask.shape

    @property
    def n_obs(self) -> int:
        return int(self.mask.sum())

    def check(self, shape) -> None:
        if tuple(shape[-3:]) != self.shape:
            raise ConfigError(f"mask shape {self.shape} does not match field shape {tuple(shape[-3:])}")

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        self.check(x.shape)
        return x[..., self.mask]

    def adjoint(self, v: np.ndarray) -> np.ndarray:
        out = np.zeros(self.shape, dtype=np.float64)
        out[self.mask] = v
        return out

    @classmethod
    def empty(cls, spec: GridSpec) -> "ObservationOperator":
        return cls(np.zeros(spec.shape, dtype=bool))

    @classmethod
    def full(cls, spec: GridSpec) -> "ObservationOperator":
        return cls(np.ones(spec.shape, dtype=bool))

    @classmethod
    def random(cls, spec: GridSpec, fraction: float, seed: int) -> "ObservationOperator":
        """Exactly ``round(fraction * cells)`` observed entries, chosen by a seeded shuffle."""
        if not 0.0 <= fraction <= 1.0:
            raise ConfigError("observation fraction must be in [0, 1]")
        total = int(np.prod(spec.shape))
        n = int(round(fraction * total))
        order = as_generator(seed).permutation(total)
        flat = np.zeros(total, dtype=bool)
        flat[order[:n]] = True
        return cls(flat.reshape(spec.shape), seed=int(seed))

    def coords(self) -> np.ndarray:
        return np.argwhere(self.mask)


@dataclass(frozen=True)
class ObservationSet:
    values: np.ndarray
    noise_var: float | np.ndarray = 1.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64).reshape(-1)
        r = np.asarray(self.noise_var, dtype=np.float64)
        if np.any(r < 0):
            raise ConfigError("observation noise variance must be >= 0")
        if r.ndim > 0 and r.shape != v.shape:
            raise ConfigError("per-entry noise variance must match the number of observations")
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.values.size

    def R(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.noise_var, dtype=np.float64), self.values.shape)


def observe(x: StateField | np.ndarray, op: ObservationOperator, R, rng) -> ObservationSet:
    vals = x.values if isinstance(x, StateField) else np.asarray(x, dtype=np.float64)
    clean = op.apply(vals)
    r = np.broadcast_to(np.asarray(R, dtype=np.float64), clean.shape)
    if np.any(r < 0):
        raise ConfigError("observation noise variance must be >= 0")
    if clean.size and np.any(r > 0):
        clean = clean + np.sqrt(r) * as_generator(rng).standard_normal(clean.shape)
    return ObservationSet(clean, np.asarray(R, dtype=np.float64) if np.ndim(R) else float(R),
                          {"mask_seed": op.seed})


def write_observations(path, op: ObservationOperator, obs: ObservationSet) -> None:
    """CSV ``var,row,col,value`` plus a JSON sidecar ``<path>.json``."""
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["var", "row", "col", "value"])
    for (v, r, c), val in zip(op.coords(), obs.values):
        w.writerow([v, r, c, repr(float(val))])
    Path(path).write_text(out.getvalue())
    R = obs.noise_var
    side = {"shape": list(op.shape), "noise_var": R.tolist() if isinstance(R, np.ndarray) else R,
            "mask_seed": op.seed, "n_obs": op.n_obs}
    Path(str(path) + ".json").write_text(json.dumps(side, indent=2))


def read_observations(path) -> tuple[ObservationOperator, ObservationSet]:
    side = json.loads(Path(str(path) + ".json").read_text())
    mask = np.zeros(tuple(side["shape"]), dtype=bool)
    vals = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            mask[int(row["var"]), int(row["row"]), int(row["col"])] = True
            vals.append((int(row["var"]), int(row["row"]), int(row["col"]), float(row["value"])))
    vals.sort()
    op = ObservationOperator(mask, seed=side.get("mask_seed"))
    R = side["noise_var"]
    R = np.asarray(R, dtype=np.float64) if isinstance(R, list) else float(R)
    return op, ObservationSet([v[3] for v in vals], R, {"mask_seed": side.get("mask_seed")})


@dataclass(frozen=True)
class GuidanceSchedule:
    """How strongly the likelihood term pulls at each noise level.

    ``constant``: ``zeta_t = zeta0``.
    ``residual-normalized``: ``zeta_t = zeta0 / ||y - h(xhat)||``.
    ``variance-corrected``: per observed entry
    ``zeta_t = zeta0 R / (2 (R + v_t))`` with ``v_t`` the denoiser's estimate of
    ``Var[x | z_t]``; for a Gaussian prior this makes the likelihood score
    exact at every noise level.
    """

    mode: str = "variance-corrected"
    zeta0: float = 1.0
    identity_jacobian: bool = False

    def __post_init__(self):
        if self.mode not in GUIDANCE_MODES:
            raise ConfigError(f"guidance mode must be one of {GUIDANCE_MODES}, got {self.mode!r}")
        if not self.zeta0 >= 0:
            raise ConfigError("zeta0 must be >= 0")


def _posterior_variance(D, sigma, shape, tiling):
    if tiling is not None:
        from .tiling import tiled_posterior_variance

        return tiled_posterior_variance(D, sigma, shape, tiling)
    return D.posterior_variance(sigma, shape)


def _pullback(D, z, sigma, ctx, cot, tiling):
    if tiling is not None:
        from .tiling import tiled_vjp

        return tiled_vjp(D, z, sigma, ctx, tiling, cot)
    return D.vjp(z, sigma, ctx, cot)


def likelihood_score(z, sigma, y: ObservationSet, op: ObservationOperator, D, ctx=None,
                     sched: GuidanceSchedule = GuidanceSchedule(), xhat=None, tiling=None,
                     sigma_floor: float = 1e-3) -> np.ndarray:
    """``-zeta_t grad_z ||y - h(xhat(z))||^2_{R^-1}`` (DPS)."""
    z = np.asarray(z, dtype=np.float64)
    op.check(z.shape)
    if len(y) != op.n_obs:
        raise ConfigError(f"{len(y)} observations for a mask with {op.n_obs} entries")
    if op.n_obs == 0 or sched.zeta0 == 0:
        return np.zeros_like(z)
    if sigma < sigma_floor:
        raise ConfigError(f"sigma {sigma} below floor {sigma_floor}")
    R = y.R()
    if np.any(R == 0):
        raise ConfigError("zero observation noise variance is not supported; use a small positive R")
    if xhat is None:
        from .diffusion import make_denoise_fn

        xhat = make_denoise_fn(D, ctx, tiling)(z, sigma)
    resid = op.apply(xhat) - y.values  # h(xhat) - y
    if sched.mode == "constant":
        w = 2.0 * sched.zeta0 / R
    elif sched.mode == "residual-normalized":
        norm = float(np.linalg.norm(resid))
        if norm == 0.0:
            return np.zeros_like(z)
        w = 2.0 * sched.zeta0 / (norm * R)
    else:
        v = op.apply(_posterior_variance(D, sigma, z.shape, tiling))
        w = sched.zeta0 / (R + v)
    cot = op.adjoint(w * resid)
    if not np.any(cot):
        return np.zeros_like(z)
    grad = cot if sched.identity_jacobian else _pullback(D, z, sigma, ctx, cot, tiling)
    return -grad


def posterior_score(prior: np.ndarray, lik: np.ndarray) -> np.ndarray:
    prior = np.asarray(prior)
    lik = np.asarray(lik)
    if prior.shape != lik.shape:
        raise ConfigError(f"score shapes differ: {prior.shape} vs {lik.shape}")
    return prior + lik


def assimilate(
    D,
    ctx: TemporalContext | None,
    y: ObservationSet,
    op: ObservationOperator,
    schedule: NoiseSchedule,
    sched: GuidanceSchedule,
    rng,
    mode: str = "sde",
    tiling=None,
    spec: GridSpec | None = None,
    workers: int = 1,
    trajectory_dir=None,
) -> StateField:
    """One posterior sample by reverse diffusion with likelihood guidance at every step.

    With no observations (or ``zeta0 = 0``) this runs exactly the prior sampler,
    so the result is bit-identical to :func:`sample_prior` with the same rng.
    """
    spec = spec or (ctx.spec if ctx is not None else None)
    if spec is None:
        raise ConfigError("a grid spec is required when no context is given")
    op.check(spec.shape)
    if len(y) != op.n_obs:
        raise ConfigError(f"{len(y)} observations for a mask with {op.n_obs} entries")
    extra = None
    if op.n_obs > 0 and sched.zeta0 > 0:
        if np.any(y.R() == 0):
            raise ConfigError("zero observation noise variance is not supported; use a small positive R")

        def extra(z, s, xhat):
            return likelihood_score(z, s, y, op, D, ctx, sched, xhat=xhat, tiling=tiling,
                                    sigma_floor=schedule.sigma_floor)

    out = run_reverse(make_denoise_fn(D, ctx, tiling, workers), spec.shape, schedule, rng, mode,
                      extra_score=extra, trajectory=_trajectory_writer(trajectory_dir))
    return StateField(spec, np.asarray(out, dtype=np.float64))
