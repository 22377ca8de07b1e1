"""Wall-clock, flop and tracked-memory measurements."""
from __future__ import annotations

import math
import statistics
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .. import kernels
from .. import tensor as T
from ..denoisers.base import ContextArrays
from ..denoisers.storm import StormConfig, StormDenoiser, init_params
from ..errors import ConfigError
from ..fields import GridSpec
from .layers import init_layer, timesformer_layer, vit_global_layer

BENCH_HEADER = "variant,tokens,K,N,flops,peak_bytes,wall_s,seed"


@dataclass
class BenchRecord:
    variant: str
    tokens: int
    K: int
    N: int
    flops: int  # attention-score flops (variant comparison)
    peak_bytes: int
    wall_s: float
    seed: int
    total_flops: int = 0
    capped: bool = False


def records_csv(records: Sequence[BenchRecord]) -> str:
    lines = [BENCH_HEADER]
    for r in records:
        wall = "capped" if r.capped else repr(r.wall_s)
        lines.append(f"{r.variant},{r.tokens},{r.K},{r.N},{r.flops},{r.peak_bytes},{wall},{r.seed}")
    return "\n".join(lines) + "\n"


def timed(fn: Callable, repeats: int = 5, warmup: int = 1) -> float:
    """Median wall time of ``repeats`` calls after ``warmup`` discarded calls."""
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def profile(fn: Callable) -> T.Profiler:
    with T.Profiler() as p:
        fn()
    return p


def loglog_slope(x, y) -> float:
    x, y = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    return float(np.polyfit(x, y, 1)[0])


# ---------------------------------------------------------------------------
# workloads


@dataclass(frozen=True)
class BenchConfig:
    d_model: int = 16
    n_layers: int = 1
    n_heads: int = 2
    n_ctx_tokens: int = 8
    patch: int = 2
    core: int = 16
    halo: int = 8
    K: int = 1
    repeats: int = 5
    warmup: int = 1
    seed: int = 0
    vit_tokens: tuple = (256, 512, 1024, 2048, 4096, 8192, 16384, 25600)
    tiled_tokens: tuple = (9216, 40000, 160000, 640000, 1000000)
    max_score_bytes: float = 1.5e9

    def storm_cfg(self) -> StormConfig:
        return StormConfig(1, self.patch, self.d_model, self.n_layers, self.n_heads, self.n_ctx_tokens)


def storm_model(cfg: BenchConfig) -> StormDenoiser:
    sc = cfg.storm_cfg()
    return StormDenoiser(sc, init_params(sc, cfg.seed, zero_out=False))


def _side_for_tokens(tokens: int, patch: int, core: int) -> int:
    side = patch * round(math.sqrt(tokens))
    return max(core, core * round(side / core))


def storm_workload(model: StormDenoiser, side: int, K: int, seed: int, plan=None):
    """Closure running one denoiser call on a ``side x side`` single-variable field."""
    from ..tiling import tiled_denoise

    gen = np.random.default_rng(seed)
    z = gen.standard_normal((1, side, side))
    ctx = ContextArrays(gen.standard_normal((K, 1, side, side)), np.arange(K, dtype=np.float64))
    if plan is None:
        return lambda: model.evaluate(z, 1.0, ctx)
    return lambda: tiled_denoise(model, z, 1.0, ctx, plan)


def vit_workload(tokens: int, d: int, H: int, K: int, seed: int):
    p = init_layer(d, seed)
    u = np.random.default_rng(seed).standard_normal((K, tokens // K, d)).astype(np.float32)
    return lambda: vit_global_layer(u, p, H)


def timesformer_workload(N: int, K: int, d: int, H: int, seed: int):
    ps, pt = init_layer(d, seed), init_layer(d, seed + 1)
    u = np.random.default_rng(seed).standard_normal((K, N, d)).astype(np.float32)
    return lambda: timesformer_layer(u, ps, pt, H)


def measure(variant: str, fn: Callable, tokens: int, K: int, N: int, cfg: BenchConfig) -> BenchRecord:
    p = profile(fn)
    wall = timed(fn, cfg.repeats, cfg.warmup)
    return BenchRecord(variant, tokens, K, N, p.flops.get("attn_scores", 0), p.peak, wall, cfg.seed,
                       p.total_flops)


def run_scaling_bench(cfg: BenchConfig = BenchConfig(), variants=("vit-global", "storm-tiled"),
                      progress: Callable | None = None) -> tuple[list, dict]:
    """Sweep token counts; returns the records and the log-log wall-time slope per variant."""
    from ..tiling import plan_tiles

    records = []
    if "vit-global" in variants:
        for t in cfg.vit_tokens:
            score_bytes = cfg.n_heads * min(t, 2048) * t * 4
            if score_bytes > cfg.max_score_bytes:
                records.append(BenchRecord("vit-global", t, 1, t, 0, 0, math.nan, cfg.seed, capped=True))
                continue
            try:
                rec = measure("vit-global", vit_workload(t, cfg.d_model, cfg.n_heads, 1, cfg.seed), t, 1, t, cfg)
            except MemoryError:
                rec = BenchRecord("vit-global", t, 1, t, 0, 0, math.nan, cfg.seed, capped=True)
            records.append(rec)
            if progress:
                progress(rec)
    if "storm-tiled" in variants:
        model = storm_model(cfg)
        for t in cfg.tiled_tokens:
            side = _side_for_tokens(t, cfg.patch, cfg.core)
            spec = GridSpec(side, side, 1, cfg.patch)
            plan = plan_tiles(spec, cfg.core, cfg.halo)
            fn = storm_workload(model, side, cfg.K, cfg.seed, plan)
            rec = measure("storm-tiled", fn, spec.n_tokens, cfg.K, spec.n_tokens, cfg)
            records.append(rec)
            if progress:
                progress(rec)
    slopes = {}
    for v in variants:
        pts = [(r.tokens, r.wall_s) for r in records if r.variant == v and not r.capped]
        if len(pts) >= 2:
            slopes[v] = loglog_slope(*zip(*pts))
    return records, slopes


def context_doubling(N_side: int = 64, Ks: Sequence[int] = (4, 8), cfg: BenchConfig | None = None,
                     timesformer_N: int | None = None) -> list[BenchRecord]:
    """Wall time of one storm forward and one timesformer layer at fixed N for each K."""
    cfg = cfg or BenchConfig(d_model=32, n_layers=2, n_ctx_tokens=16)
    model = storm_model(cfg)
    N = (N_side // cfg.patch) ** 2
    recs = []
    for K in Ks:
        recs.append(measure("storm", storm_workload(model, N_side, K, cfg.seed), N * K, K, N, cfg))
        tN = timesformer_N or N
        recs.append(measure("timesformer", timesformer_workload(tN, K, cfg.d_model, cfg.n_heads, cfg.seed),
                            tN * K, K, tN, cfg))
    return recs


# ---------------------------------------------------------------------------
# ensemble weak scaling


@dataclass
class EnsembleBenchRow:
    workers: int
    members: int
    wall_s: float
    digest: str


ENSEMBLE_HEADER = "workers,members,wall_s,ratio,digest"


def run_ensemble_bench(sampler: Callable, per_worker: int = 4, workers: Sequence[int] = (1, 2, 4, 8),
                       seed: int = 0, repeats: int = 3) -> list[EnsembleBenchRow]:
    """Time ``n = w * per_worker`` members on ``w`` workers (median of ``repeats``)."""
    from ..ensemble import generate_ensemble

    rows = []
    for w in workers:
        n = w * per_worker
        out = {}

        def go():
            out["e"] = generate_ensemble(n, sampler, workers=w, rng=seed)

        wall = timed(go, repeats, 0)
        rows.append(EnsembleBenchRow(w, n, wall, out["e"].digest()))
    return rows


def ensemble_csv(rows: Sequence[EnsembleBenchRow]) -> str:
    base = rows[0].wall_s if rows else 1.0
    lines = [ENSEMBLE_HEADER] + [f"{r.workers},{r.members},{r.wall_s!r},{r.wall_s / base!r},{r.digest}" for r in rows]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# compiled versus fallback kernels

KERNEL_HEADER = "kernel,backend,size,wall_s"


def run_kernel_bench(side: int = 512, tile: int = 32, members: int = 256, cells: int = 4096,
                     repeats: int = 5, seed: int = 0) -> list[tuple]:
    gen = np.random.default_rng(seed)
    acc0 = np.zeros((1, side, side))
    tiles = [(r, c) for r in range(0, side - tile + 1, tile // 2) for c in range(0, side - tile + 1, tile // 2)]
    x = gen.standard_normal((1, tile, tile))
    w = gen.random((tile, tile))
    ens = gen.standard_normal((members, cells))
    obs = gen.standard_normal(cells)
    rows = []
    for name, mod in kernels.available().items():
        def blend():
            acc = acc0.copy()
            for r, c in tiles:
                mod.blend_accumulate(acc, x, w, r, c)

        rows.append(("blend_accumulate", name, len(tiles) * tile * tile, timed(blend, repeats)))
        rows.append(("crps_ensemble", name, members * cells, timed(lambda: mod.crps_ensemble(ens, obs), repeats)))
    return rows


def kernel_csv(rows) -> str:
    return "\n".join([KERNEL_HEADER] + [f"{k},{b},{n},{t!r}" for k, b, n, t in rows]) + "\n"
