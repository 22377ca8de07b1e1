"""Analytic attention cost model and the space-time feasibility frontier.

Counts are per layer times ``n_layers`` and cover only the query-key score
products (1 multiply-add = 2 flops), the term that distinguishes the
attention layouts.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from ..errors import ConfigError

VARIANTS = ("vit-global", "timesformer", "storm", "storm-tiled")
FRONTIER_HEADER = "variant,N,K_max,budget"


@dataclass(frozen=True)
class CostModel:
    variant: str
    N: int
    K: int = 1
    M: int = 0
    d_model: int = 32
    n_layers: int = 1
    tile_tokens: int | tuple = 0
    n_tiles: int = 1
    token_dim: int = 4  # patch cells x variables, for the context-embedding term

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.N < 1 or self.K < 1 or self.d_model < 1 or self.n_layers < 1 or self.M < 0:
            raise ConfigError("cost model dimensions must be positive")
        if self.variant == "storm-tiled" and not self.tile_tokens:
            raise ConfigError("storm-tiled needs tile_tokens")

    def tiles(self) -> tuple:
        if isinstance(self.tile_tokens, tuple):
            return self.tile_tokens
        return (int(self.tile_tokens),) * self.n_tiles


def count_attention_flops(m: CostModel) -> int:
    d, N, K, M = m.d_model, m.N, m.K, m.M
    if m.variant == "vit-global":
        per = 2 * (K * N) ** 2 * d
    elif m.variant == "timesformer":
        per = 2 * K * N * N * d + 2 * N * K * K * d
    elif m.variant == "storm":
        per = 2 * N * N * d + 2 * N * M * d
    else:
        per = sum(2 * n * n * d + 2 * n * M * d for n in m.tiles())
    return m.n_layers * per


def context_flops(m: CostModel) -> int:
    """Per-call cost of turning K context frames into M tokens (storm variants).

    Embedding and the two pooling stages are linear in K; the learned-query
    compression is independent of K.
    """
    if m.variant not in ("storm", "storm-tiled"):
        return 0
    d, P = m.d_model, m.token_dim
    tokens = sum(m.tiles()) if m.variant == "storm-tiled" else m.N
    per_frame = tokens * (2 * P * d + 4 * d)
    return m.K * per_frame + tokens * (2 * 2 * d * d) + 2 * 2 * m.M * tokens * d


def budget_flops(m: CostModel) -> int:
    return count_attention_flops(m) + context_flops(m)


def max_context(variant: str, N: int, budget: float, d_model: int = 32, M: int = 0,
                n_layers: int = 1, k_cap: int = 1 << 20, **kw) -> int:
    """Largest K with ``budget_flops <= budget`` (0 if even K=1 does not fit)."""
    def cost(K):
        return budget_flops(CostModel(variant, N, K, M, d_model, n_layers, **kw))

    if budget <= 0 or cost(1) > budget:
        return 0
    lo, hi = 1, 2
    while hi <= k_cap and cost(hi) <= budget:
        lo, hi = hi, hi * 2
    hi = min(hi, k_cap + 1)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if cost(mid) <= budget:
            lo = mid
        else:
            hi = mid
    return lo


def feasibility_frontier(variants: Sequence[str], Ns: Sequence[int], budgets: Sequence[float],
                         d_model: int = 32, M: int = 16, n_layers: int = 2, tile_tokens: int = 256,
                         k_cap: int = 1 << 20) -> list[tuple]:
    """Rows ``(variant, N, K_max, budget)``; pairs where nothing fits are omitted."""
    rows = []
    for budget in budgets:
        for v in variants:
            for N in sorted(Ns):
                kw = {}
                if v == "storm-tiled":
                    nt = min(tile_tokens, N)
                    kw = dict(tile_tokens=nt, n_tiles=math.ceil(N / nt))
                k = max_context(v, N, budget, d_model, M if v.startswith("storm") else 0,
                                n_layers, k_cap, **kw)
                if k > 0:
                    rows.append((v, N, k, budget))
    return rows


def frontier_csv(rows) -> str:
    return "\n".join([FRONTIER_HEADER] + [f"{v},{n},{k},{b!r}" for v, n, k, b in rows]) + "\n"
