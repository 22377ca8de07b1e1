"""Tile partition with halos and Hanning-weighted blending of denoised outputs.

Each tile is denoised on its extended rectangle (core plus halo, clamped to
the domain) and the overlapping outputs are averaged with normalized
separable Hanning weights.  Because neighbouring tiles share halo cells,
information crosses at most one halo per denoising call, and the sampler's
repeated calls let it travel across the whole domain.
"""
from __future__ import annotations

import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import kernels
from .denoisers.base import context_arrays
from .errors import ConfigError
from .fields import GridSpec

WEIGHT_FLOOR = 1e-3
PLAN_HEADER = "tile,core_r0,core_c0,core_r1,core_c1,ext_r0,ext_c0,ext_r1,ext_c1"
PROBE_HEADER = "step,ring,influence"


@dataclass(frozen=True)
class Tile:
    index: int
    ti: int  # tile row
    tj: int  # tile column
    core: tuple  # (r0, c0, r1, c1), half-open
    ext: tuple

    @property
    def ext_shape(self) -> tuple[int, int]:
        return self.ext[2] - self.ext[0], self.ext[3] - self.ext[1]

    @property
    def ext_slices(self) -> tuple[slice, slice]:
        return slice(self.ext[0], self.ext[2]), slice(self.ext[1], self.ext[3])

    @property
    def core_slices(self) -> tuple[slice, slice]:
        return slice(self.core[0], self.core[2]), slice(self.core[1], self.core[3])


@dataclass(frozen=True)
class TilePlan:
    grid: GridSpec
    core: int
    halo: int
    tiles: tuple
    boundary: str = "clamp"

    @property
    def n_tiles(self) -> int:
        return len(self.tiles)

    @property
    def tile_grid(self) -> tuple[int, int]:
        return self.grid.ny // self.core, self.grid.nx // self.core

    def dump_csv(self) -> str:
        out = io.StringIO()
        out.write(PLAN_HEADER + "\n")
        for t in self.tiles:
            out.write(",".join(str(v) for v in (t.index, *t.core, *t.ext)) + "\n")
        return out.getvalue()


def plan_tiles(spec: GridSpec, core: int, halo: int) -> TilePlan:
    if core < 1 or halo < 0:
        raise ConfigError("need core >= 1 and halo >= 0")
    if spec.ny % core or spec.nx % core:
        raise ConfigError(f"core {core} does not divide the {spec.ny}x{spec.nx} grid")
    tiles = []
    for ti in range(spec.ny // core):
        for tj in range(spec.nx // core):
            r0, c0 = ti * core, tj * core
            core_rect = (r0, c0, r0 + core, c0 + core)
            ext = (max(0, r0 - halo), max(0, c0 - halo),
                   min(spec.ny, r0 + core + halo), min(spec.nx, c0 + core + halo))
            tiles.append(Tile(len(tiles), ti, tj, core_rect, ext))
    return TilePlan(spec, core, halo, tuple(tiles))


def hanning_1d(L: int, floor: float | None = None) -> np.ndarray:
    """``w[n] = 0.5 (1 - cos(2 pi n / (L - 1)))``, optionally floored."""
    if L < 2:
        raise ConfigError(f"Hanning window needs length >= 2, got {L}")
    n = np.arange(L, dtype=np.float64)
    w = 0.5 * (1.0 - np.cos(2.0 * np.pi * n / (L - 1)))
    return w if floor is None else np.maximum(w, floor)


@dataclass(frozen=True)
class BlendWeights:
    plan: TilePlan
    weights: tuple  # normalized, one (h, w) array per tile

    def coverage_sum(self) -> np.ndarray:
        acc = np.zeros((1, self.plan.grid.ny, self.plan.grid.nx))
        one = np.ones((1,) + self.weights[0].shape) if self.weights else None
        for t, w in zip(self.plan.tiles, self.weights):
            if one is None or one.shape[1:] != w.shape:
                one = np.ones((1,) + w.shape)
            kernels.blend_accumulate(acc, one, w, t.ext[0], t.ext[1])
        return acc[0]


def hanning_weights(plan: TilePlan, floor: float = WEIGHT_FLOOR) -> BlendWeights:
    """Separable floored Hanning window per tile, normalized across covering tiles."""
    raw = []
    total = np.zeros((plan.grid.ny, plan.grid.nx))
    for t in plan.tiles:
        h, w = t.ext_shape
        win = np.outer(hanning_1d(h, floor), hanning_1d(w, floor))
        raw.append(win)
        total[t.ext_slices] += win
    norm = tuple(win / total[t.ext_slices] for t, win in zip(plan.tiles, raw))
    for w in norm:
        w.flags.writeable = False
    return BlendWeights(plan, norm)


_WEIGHT_CACHE: dict = {}


def _weights_for(plan: TilePlan) -> BlendWeights:
    key = (plan.grid.ny, plan.grid.nx, plan.core, plan.halo)
    bw = _WEIGHT_CACHE.get(key)
    if bw is None:
        bw = _WEIGHT_CACHE[key] = hanning_weights(plan)
    return bw


def _batches(plan: TilePlan, batched: bool, max_batch: int):
    """Fixed grouping of tile indices; independent of the worker count."""
    if not batched:
        return [[t.index] for t in plan.tiles]
    groups: dict = {}
    for t in plan.tiles:
        groups.setdefault(t.ext_shape, []).append(t.index)
    out = []
    for idx in groups.values():
        out.extend(idx[i:i + max_batch] for i in range(0, len(idx), max_batch))
    return sorted(out, key=lambda g: g[0])


def tiled_denoise(D, z, sigma, ctx, plan: TilePlan, weights: BlendWeights | None = None,
                  workers: int = 1, max_batch: int = 64) -> np.ndarray:
    """Denoise every extended tile and blend: ``xhat = sum_t w_t * D(z|ext_t)``.

    Tiles may be evaluated by several threads; the reduction always runs in
    tile order, so the result does not depend on ``workers``.
    """
    z = np.asarray(z)
    if z.shape[-2:] != (plan.grid.ny, plan.grid.nx):
        raise ConfigError(f"field {z.shape} does not match plan grid {plan.grid.ny}x{plan.grid.nx}")
    weights = weights or _weights_for(plan)
    ca = context_arrays(ctx)
    tiles = plan.tiles
    batched = bool(getattr(D, "batched", False))

    def run(group):
        if len(group) == 1 and not batched:
            t = tiles[group[0]]
            rs, cs = t.ext_slices
            c = ca.crop(rs, cs) if ca is not None else None
            return [D.evaluate(z[..., rs, cs], sigma, c, origin=(t.ext[0], t.ext[1]))]
        zs = np.stack([z[..., tiles[i].ext_slices[0], tiles[i].ext_slices[1]] for i in group])
        c = None
        if ca is not None:
            fr = np.stack([ca.frames[..., tiles[i].ext_slices[0], tiles[i].ext_slices[1]] for i in group])
            c = type(ca)(fr, ca.times)
        org = np.array([[tiles[i].ext[0], tiles[i].ext[1]] for i in group])
        out = D.evaluate(zs, sigma, c, origin=org)
        return list(out)

    groups = _batches(plan, batched, max_batch)
    if workers > 1 and len(groups) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, groups))
    else:
        results = [run(g) for g in groups]

    acc = np.zeros(z.shape, dtype=np.float64)
    squeeze = acc.ndim == 2
    if squeeze:
        acc = acc[None]
    outputs = {}
    for g, res in zip(groups, results):
        outputs.update(zip(g, res))
    for t in tiles:
        x = np.asarray(outputs[t.index], dtype=np.float64)
        kernels.blend_accumulate(acc, x if x.ndim == 3 else x[None], weights.weights[t.index],
                                 t.ext[0], t.ext[1])
    return acc[0] if squeeze else acc


# ---------------------------------------------------------------------------
# propagation probe


@dataclass
class ProbeResult:
    plan: TilePlan
    source: tuple
    rows: list  # (step, ring, influence)
    radius: list  # Chebyshev radius (cells) of the influenced set after each step

    def to_csv(self) -> str:
        lines = [PROBE_HEADER] + [f"{s},{r},{v!r}" for s, r, v in self.rows]
        return "\n".join(lines) + "\n"

    def max_ring(self, step: int) -> int:
        rings = [r for s, r, v in self.rows if s == step and v > 0]
        return max(rings) if rings else -1

    def first_reach(self) -> dict:
        out = {}
        for s, r, v in self.rows:
            if v > 0 and r not in out:
                out[r] = s
        return out

    @property
    def n_rings(self) -> int:
        src = self.plan.tiles[_tile_of(self.plan, self.source)]
        ty, tx = self.plan.tile_grid
        return max(src.ti, ty - 1 - src.ti, src.tj, tx - 1 - src.tj) + 1


def ring_step_bound(core: int, halo: int) -> int:
    """Largest number of tile rings the influence front can advance in one step."""
    return 2 * math.ceil(halo / core)


def _tile_of(plan: TilePlan, cell) -> int:
    r, c = cell
    ty, tx = plan.tile_grid
    return (r // plan.core) * tx + (c // plan.core)


def propagation_radius_probe(D, plan: TilePlan, schedule, ctx=None, rng=0, source=None,
                             eps: float = 1.0, mode: str = "ode", workers: int = 1) -> ProbeResult:
    """Perturb one cell of the initial noise and track where the trajectories differ.

    Both runs share every random draw, so any nonzero difference is caused by
    the perturbation.  Influence per ring is the max |delta| over the cores of
    the tiles at that Chebyshev tile distance from the source tile.
    """
    from .diffusion import make_denoise_fn, run_reverse
    from .rng import RngState

    spec = plan.grid
    if source is None:
        source = (plan.core // 2, plan.core // 2)
    if not (0 <= source[0] < spec.ny and 0 <= source[1] < spec.nx):
        raise ConfigError("probe source cell outside the domain")
    seed_state = rng if isinstance(rng, RngState) else RngState(int(rng))

    def trajectory(perturb):
        states = []

        def keep(step, z):
            states.append(np.array(z, copy=True))

        def edit(z0):
            z0 = z0.copy()
            if perturb:
                z0[..., source[0], source[1]] += eps
            states.append(z0.copy())
            return z0

        fn = make_denoise_fn(D, ctx, plan, workers)
        run_reverse(fn, spec.shape, schedule, seed_state.generator(), mode,
                    trajectory=keep, perturb=edit)
        return states

    base = trajectory(False)
    pert = trajectory(True)
    src = plan.tiles[_tile_of(plan, source)]
    rows, radius = [], []
    rr, cc = np.meshgrid(np.arange(spec.ny), np.arange(spec.nx), indexing="ij")
    cheb = np.maximum(np.abs(rr - source[0]), np.abs(cc - source[1]))
    for step, (a, b) in enumerate(zip(base, pert)):
        delta = np.abs(b - a).max(axis=0) if a.ndim == 3 else np.abs(b - a)
        hit = delta > 0
        radius.append(int(cheb[hit].max()) if hit.any() else -1)
        per_ring: dict = {}
        for t in plan.tiles:
            ring = max(abs(t.ti - src.ti), abs(t.tj - src.tj))
            v = float(delta[t.core_slices].max())
            per_ring[ring] = max(per_ring.get(ring, 0.0), v)
        rows.extend((step, ring, per_ring[ring]) for ring in sorted(per_ring))
    return ProbeResult(plan, tuple(source), rows, radius)


def tiled_vjp(D, z, sigma, ctx, plan: TilePlan, cotangent, weights: BlendWeights | None = None) -> np.ndarray:
    """Gradient of ``<tiled_denoise(z), cotangent>``: each tile pulls back its weighted share."""
    z = np.asarray(z)
    cot = np.asarray(cotangent, dtype=np.float64)
    weights = weights or _weights_for(plan)
    ca = context_arrays(ctx)
    out = np.zeros(z.shape, dtype=np.float64)
    for t in plan.tiles:
        rs, cs = t.ext_slices
        c = ca.crop(rs, cs) if ca is not None else None
        g = D.vjp(z[..., rs, cs], sigma, c, weights.weights[t.index] * cot[..., rs, cs],
                  origin=(t.ext[0], t.ext[1]))
        out[..., rs, cs] += g
    return out


def tiled_posterior_variance(D, sigma, shape, plan: TilePlan, weights: BlendWeights | None = None) -> np.ndarray:
    """Blend of per-tile ``Var[x | z]`` estimates with the same weights as the outputs."""
    weights = weights or _weights_for(plan)
    out = np.zeros(shape, dtype=np.float64)
    for t in plan.tiles:
        rs, cs = t.ext_slices
        sub = tuple(shape[:-2]) + t.ext_shape
        v = D.posterior_variance(sigma, sub, origin=(t.ext[0], t.ext[1]))
        out[..., rs, cs] += weights.weights[t.index] * v
    return out
