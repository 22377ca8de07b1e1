"""Training loop for the learned denoiser.

Each step draws its minibatch from the substream ``(seed, step)``, so a run
resumed from a checkpoint replays exactly the batches an uninterrupted run
would have seen.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigError, NumericalError
from ..fields import GridSpec, GrfParams, ToyDynamics, grf_spectrum
from ..io import decode_tensors, encode_tensors
from ..rng import RngState
from .base import ContextArrays
from .storm import StormConfig, StormDenoiser, init_params

log = logging.getLogger(__name__)

LOG_HEADER = ("step", "loss", "sigma_mean", "grad_norm")
_TRAIN_STREAM = 0x7EA1


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 1e-3
    p_mean: float = -1.2
    p_std: float = 1.2
    weighting: str = "edm"
    lr_schedule: str = "constant"
    seed: int = 0
    divergence_factor: float = 10.0
    divergence_patience: int = 100

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be positive")
        if not self.lr > 0 or not self.p_std > 0:
            raise ConfigError("lr and p_std must be positive")
        if self.weighting not in ("edm", "uniform"):
            raise ConfigError(f"unknown loss weighting {self.weighting!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr schedule {self.lr_schedule!r}")

    def sample_sigma(self, gen, n):
        return np.exp(self.p_mean + self.p_std * gen.standard_normal(n))

    def weight(self, sigma, sigma_data):
        if self.weighting == "uniform":
            return np.ones_like(sigma)
        return (sigma ** 2 + sigma_data ** 2) / (sigma * sigma_data) ** 2

    def lr_at(self, step):
        if self.lr_schedule == "constant":
            return self.lr
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * step / self.steps))


# ---------------------------------------------------------------------------
# toy datasets: sample(gen, B) -> (x (B, V, ny, nx), context or None)


@dataclass(frozen=True)
class GaussianToyDataset:
    """Independent per-cell Gaussian ``N(mean, var)``; the Bayes denoiser is a scalar shrink."""

    spec: GridSpec
    mean: float = 0.0
    var: float = 1.0

    def sample(self, gen, B):
        return self.mean + math.sqrt(self.var) * gen.standard_normal((B,) + self.spec.shape), None

    def mmse(self, sigma):
        s2 = np.asarray(sigma) ** 2
        return self.var * s2 / (self.var + s2)


@dataclass(frozen=True)
class ConstantDataset:
    spec: GridSpec
    value: float = 0.3

    def sample(self, gen, B):
        return np.full((B,) + self.spec.shape, self.value), None

    def mmse(self, sigma):
        return np.zeros_like(np.asarray(sigma, dtype=np.float64))


@dataclass(frozen=True)
class GrfDataset:
    """Stationary periodic GRF fields.

    With ``K > 0`` each example also carries ``K`` context frames: the target
    is one dynamics step past the last context frame.
    """

    spec: GridSpec
    grf: GrfParams = field(default_factory=GrfParams)
    K: int = 0
    dynamics: ToyDynamics = field(default_factory=ToyDynamics)
    model_noise: float = 0.1

    def _draw(self, gen, B):
        lam = grf_spectrum(self.spec.ny, self.spec.nx, self.grf)
        w = gen.standard_normal((B,) + self.spec.shape)
        f = np.fft.ifft2(np.sqrt(lam) * np.fft.fft2(w, axes=(-2, -1)), axes=(-2, -1)).real
        return f + self.grf.mean

    def sample(self, gen, B):
        x = self._draw(gen, B)
        if self.K == 0:
            return x, None
        frames = [x]
        for _ in range(self.K):
            nxt = np.stack([self.dynamics.apply(f) for f in frames[-1]])
            frames.append(nxt + self.model_noise * gen.standard_normal(nxt.shape))
        ctx = np.stack(frames[:-1], axis=1)
        return frames[-1], ContextArrays(ctx, np.arange(self.K, dtype=np.float64))

    def mmse(self, sigma):
        """Per-cell Bayes risk of the unconditional prior (an upper bound when K > 0)."""
        lam = grf_spectrum(self.spec.ny, self.spec.nx, self.grf).reshape(-1)
        s2 = np.asarray(sigma, dtype=np.float64)[..., None] ** 2
        return np.mean(lam * s2 / (lam + s2), axis=-1)


def loss_baseline(dataset, cfg: TrainConfig, sigma_data: float, n: int = 100_000, seed: int = 1) -> float:
    """``E_sigma[w(sigma) * mmse(sigma)]`` under the training noise law."""
    gen = RngState(seed, _TRAIN_STREAM + 1).generator()
    s = cfg.sample_sigma(gen, n)
    return float(np.mean(cfg.weight(s, sigma_data) * dataset.mmse(s)))


# ---------------------------------------------------------------------------
# optimizer state and checkpoints


@dataclass
class TrainState:
    model: StormDenoiser
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def fresh(cls, model: StormDenoiser) -> "TrainState":
        z = {k: np.zeros_like(p) for k, p in model.params.items()}
        return cls(model, z, {k: a.copy() for k, a in z.items()}, 0)


@dataclass
class TrainResult:
    model: StormDenoiser
    log: list
    smoothed_loss: float
    state: TrainState

    def log_csv(self) -> str:
        return format_log(self.log)


def format_log(rows) -> str:
    lines = [",".join(LOG_HEADER)]
    for r in rows:
        lines.append(f"{r[0]},{r[1]!r},{r[2]!r},{r[3]!r}")
    return "\n".join(lines) + "\n"


def save_params(path, model: StormDenoiser) -> None:
    meta = {"kind": "storm-params", "storm": asdict(model.cfg)}
    Path(path).write_bytes(encode_tensors(model.params, meta))


def load_params(path, dtype=np.float32) -> StormDenoiser:
    tensors, meta = decode_tensors(Path(path).read_bytes())
    if "storm" not in meta:
        raise ConfigError(f"{path} carries no model configuration")
    params = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    return StormDenoiser(StormConfig(**meta["storm"]), params, dtype)


def save_checkpoint(path, state: TrainState, cfg: TrainConfig) -> None:
    tensors = dict(state.model.params)
    tensors.update({"adam.m/" + k: a for k, a in state.m.items()})
    tensors.update({"adam.v/" + k: a for k, a in state.v.items()})
    meta = {"kind": "storm-checkpoint", "storm": asdict(state.model.cfg),
            "train": asdict(cfg), "step": state.step}
    Path(path).write_bytes(encode_tensors(tensors, meta))


def load_checkpoint(path) -> tuple[TrainState, dict]:
    tensors, meta = decode_tensors(Path(path).read_bytes())
    if meta.get("kind") != "storm-checkpoint":
        raise ConfigError(f"{path} is not a training checkpoint")
    names = [k for k in tensors if not k.startswith("adam.")]
    model = StormDenoiser(StormConfig(**meta["storm"]), {k: tensors[k] for k in names})
    m = {k: tensors["adam.m/" + k] for k in names}
    v = {k: tensors["adam.v/" + k] for k in names}
    return TrainState(model, m, v, int(meta["step"])), meta


# ---------------------------------------------------------------------------


def train_step(state: TrainState, dataset, cfg: TrainConfig):
    """One Adam step on the minibatch of substream ``state.step``; returns the log row."""
    model = state.model
    sd = model.cfg.sigma_data
    gen = RngState(cfg.seed, _TRAIN_STREAM).child(state.step).generator()
    x, ctx = dataset.sample(gen, cfg.batch_size)
    sigma = cfg.sample_sigma(gen, cfg.batch_size)
    z = x + sigma[:, None, None, None] * gen.standard_normal(x.shape)
    D, cache = model.forward(z, sigma, ctx, keep=True)
    w = cfg.weight(sigma, sd)
    r = D.astype(np.float64) - x
    n_cells = r[0].size
    loss = float(np.mean(w * np.mean(r * r, axis=(1, 2, 3))))
    if not math.isfinite(loss):
        raise NumericalError(f"non-finite training loss at step {state.step}")
    dD = (2.0 / (cfg.batch_size * n_cells)) * w[:, None, None, None] * r
    _, grads = model.backward(dD, cache)
    gnorm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))

    t = state.step + 1
    b1, b2, eps = 0.9, 0.999, 1e-8
    lr = cfg.lr_at(state.step)
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for k, g in grads.items():
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        model.params[k] -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(model.params[k].dtype)
    state.step = t
    return (t, loss, float(np.mean(sigma)), gnorm)


def train_denoiser(
    dataset,
    cfg: TrainConfig,
    storm_cfg: StormConfig | None = None,
    state: TrainState | None = None,
    log_path=None,
    checkpoint_path=None,
    checkpoint_every: int = 0,
) -> TrainResult:
    """Train (or resume) a :class:`StormDenoiser` on ``dataset``.

    Aborts with :class:`NumericalError` if the loss stays above
    ``divergence_factor`` times the first-step loss for ``divergence_patience``
    consecutive steps.
    """
    if state is None:
        storm_cfg = storm_cfg or StormConfig(n_vars=dataset.spec.n_vars)
        params = init_params(storm_cfg, RngState(cfg.seed, _TRAIN_STREAM + 2))
        state = TrainState.fresh(StormDenoiser(storm_cfg, params))
    rows = []
    fh = None
    if log_path is not None:
        fresh = state.step == 0 or not Path(log_path).exists()
        fh = open(log_path, "w" if fresh else "a", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        if fresh:
            writer.writerow(LOG_HEADER)
    first = None
    over = 0
    try:
        while state.step < cfg.steps:
            row = train_step(state, dataset, cfg)
            rows.append(row)
            if fh is not None:
                writer.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3])])
            loss = row[1]
            first = loss if first is None else first
            over = over + 1 if loss > cfg.divergence_factor * first else 0
            if over >= cfg.divergence_patience:
                raise NumericalError(
                    f"training diverged: loss {loss:.4g} above {cfg.divergence_factor}x the initial "
                    f"{first:.4g} for {over} consecutive steps (step {state.step}, grad norm {row[3]:.4g}); "
                    "lower the learning rate"
                )
            if checkpoint_path and checkpoint_every and state.step % checkpoint_every == 0:
                save_checkpoint(checkpoint_path, state, cfg)
            if state.step % 500 == 0:
                log.info("step %d loss %.5f", state.step, loss)
    finally:
        if fh is not None:
            fh.close()
    if checkpoint_path:
        save_checkpoint(checkpoint_path, state, cfg)
    tail = [r[1] for r in rows[-max(1, min(200, len(rows) // 5)):]]
    smoothed = float(np.mean(tail)) if tail else float("nan")
    return TrainResult(state.model, rows, smoothed, state)
