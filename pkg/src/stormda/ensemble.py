"""Ensemble generation and probabilistic verification metrics."""
from __future__ import annotations

import hashlib
import math
import multiprocessing as mp
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import kernels
from .errors import ConfigError, StormDAError
from .fields import GridSpec, StateField
from .rng import RngState

METRICS_HEADER = "metric,value,n_members,provenance,seed"


class MemberError(StormDAError):
    """A single ensemble member failed; carries its index."""

    def __init__(self, index: int, cause: BaseException):
        super().__init__(f"ensemble member {index} failed: {type(cause).__name__}: {cause}")
        self.index = index
        self.exit_code = getattr(cause, "exit_code", 1)


@dataclass(frozen=True)
class Ensemble:
    members: tuple
    provenance: str = "prior"
    fingerprint: str = ""
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.members) < 1:
            raise ConfigError("an ensemble needs at least one member")
        spec = self.members[0].spec
        if any(m.spec != spec for m in self.members):
            raise ConfigError("ensemble members do not share a grid")
        if self.provenance not in ("prior", "posterior"):
            raise ConfigError("provenance must be 'prior' or 'posterior'")

    @property
    def n(self) -> int:
        return len(self.members)

    @property
    def spec(self) -> GridSpec:
        return self.members[0].spec

    def array(self) -> np.ndarray:
        return np.stack([np.asarray(m.values, dtype=np.float64) for m in self.members])

    def mean(self) -> np.ndarray:
        return self.array().mean(axis=0)

    def digest(self) -> str:
        h = hashlib.sha256()
        for m in self.members:
            h.update(np.ascontiguousarray(m.values, dtype="<f8").tobytes())
        return h.hexdigest()

    def dump(self, directory) -> list[str]:
        from .io import write_field

        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        paths = []
        for i, m in enumerate(self.members):
            p = d / f"member_{i:04d}.sdaf"
            write_field(p, m)
            paths.append(str(p))
        return paths


# ---------------------------------------------------------------------------
# generation

_SAMPLER: Callable | None = None


def _init_worker(sampler):
    global _SAMPLER
    _SAMPLER = sampler


def _run_member(args):
    index, state = args
    try:
        return index, _SAMPLER(state), None
    except Exception as exc:  # reported with the member index by the parent
        return index, None, exc


def member_states(n: int, rng) -> list[RngState]:
    root = rng if isinstance(rng, RngState) else RngState(int(rng))
    return [root.child(i) for i in range(n)]


def generate_ensemble(n: int, sampler: Callable[[RngState], StateField], workers: int = 1, rng=0,
                      provenance: str = "prior", fingerprint: str = "") -> Ensemble:
    """Draw ``n`` members, member ``i`` from substream ``i`` of ``rng``.

    ``workers > 1`` uses forked processes; the member set does not depend on
    the worker count because each member owns its random stream.
    """
    if n < 1 or workers < 1:
        raise ConfigError("need n >= 1 and workers >= 1")
    states = member_states(n, rng)
    jobs = list(enumerate(states))
    if workers == 1:
        _init_worker(sampler)
        results = [_run_member(j) for j in jobs]
    else:
        ctx = mp.get_context("fork")
        with ctx.Pool(workers, initializer=_init_worker, initargs=(sampler,)) as pool:
            results = pool.map(_run_member, jobs, chunksize=max(1, n // workers))
    members = [None] * n
    for index, member, exc in results:
        if exc is not None:
            raise MemberError(index, exc) from exc
        members[index] = member
    seed = states[0].seed if states else None
    return Ensemble(tuple(members), provenance, fingerprint, seed)


# ---------------------------------------------------------------------------
# metrics (always float64)


def _as_array(x) -> np.ndarray:
    if isinstance(x, Ensemble):
        return x.mean()
    if isinstance(x, StateField):
        return np.asarray(x.values, dtype=np.float64)
    return np.asarray(x, dtype=np.float64)


def _members(ens) -> np.ndarray:
    return ens.array() if isinstance(ens, Ensemble) else np.asarray(ens, dtype=np.float64)


def rmse(field, truth) -> float:
    a, t = _as_array(field), _as_array(truth)
    if a.shape != t.shape:
        raise ConfigError(f"shape mismatch: {a.shape} vs {t.shape}")
    return float(np.sqrt(np.mean((a - t) ** 2)))


def spread(ens) -> tuple[np.ndarray, float]:
    """Per-cell unbiased standard deviation and its domain mean."""
    x = _members(ens)
    if x.shape[0] < 2:
        raise ConfigError("spread needs at least two members")
    sd = x.std(axis=0, ddof=1)
    return sd, float(sd.mean())


def _pair_half(x: np.ndarray) -> np.ndarray:
    """``0.5 mean|X - X'|`` per column over all ordered pairs (self included)."""
    s = np.sort(x, axis=0)
    M = s.shape[0]
    coef = 2.0 * np.arange(1, M + 1) - M - 1.0
    return (coef @ s) / (M * M)


def crps_cells(ens, truth, unbiased: bool = False) -> np.ndarray:
    x = _members(ens)
    t = _as_array(truth)
    if x.shape[1:] != t.shape:
        raise ConfigError(f"shape mismatch: members {x.shape[1:]} vs truth {t.shape}")
    M = x.shape[0]
    flat = x.reshape(M, -1)
    c = kernels.crps_ensemble(flat, t.reshape(-1))
    if unbiased:
        if M < 2:
            raise ConfigError("the unbiased pair term needs at least two members")
        c = c - _pair_half(flat) / (M - 1)
    return c.reshape(t.shape)


def crps(ens, truth, unbiased: bool = False) -> float:
    """``mean|X - y| - 0.5 mean|X - X'|`` averaged over cells."""
    return float(np.mean(crps_cells(ens, truth, unbiased)))


def crps_pairwise(ens, truth) -> float:
    """Direct O(M^2) evaluation; reference for the sorted estimator."""
    x = _members(ens)
    t = _as_array(truth)
    skill = np.mean(np.abs(x - t), axis=0)
    pair = np.mean(np.abs(x[:, None] - x[None, :]), axis=(0, 1))
    return float(np.mean(skill - 0.5 * pair))


def spread_skill(ens, truth) -> float:
    """Mean spread over RMSE of the ensemble mean; ``inf`` when the mean is exact."""
    _, s = spread(ens)
    e = rmse(_members(ens).mean(axis=0), truth)
    if e == 0.0:
        return math.inf
    return s / e


def variance_reduction(prior, posterior, mask=None) -> float:
    """``1 - mean(var_post) / mean(var_prior)`` over the selected cells."""
    vp = _members(prior).var(axis=0, ddof=1)
    vq = _members(posterior).var(axis=0, ddof=1)
    if mask is not None:
        vp, vq = vp[mask], vq[mask]
    return float(1.0 - vq.mean() / vp.mean())


def metrics_rows(ens: Ensemble, truth, seed=None) -> list[tuple]:
    seed = ens.seed if seed is None else seed
    rows = [("rmse", rmse(ens.mean(), truth)), ("crps", crps(ens, truth))]
    if ens.n >= 2:
        rows += [("spread", spread(ens)[1]), ("spread_skill", spread_skill(ens, truth))]
    return [(name, val, ens.n, ens.provenance, seed) for name, val in rows]


def metrics_csv(rows) -> str:
    lines = [METRICS_HEADER]
    for name, val, n, prov, seed in rows:
        v = "inf" if val == math.inf else repr(float(val))
        lines.append(f"{name},{v},{n},{prov},{'' if seed is None else seed}")
    return "\n".join(lines) + "\n"
