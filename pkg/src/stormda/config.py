"""Flat ``key = value`` run configuration with typed validation."""
from __future__ import annotations

import dataclasses
import json
import platform
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError

DENOISERS = ("gaussian", "spectral", "dense", "storm")
SAMPLER_MODES = ("sde", "ode")
DA_MODES = ("prior", "posterior")
PRESETS = ("", "conjugate")


@dataclass(frozen=True)
class RunConfig:
    experiment: str = "default"
    out_dir: str = "runs/default"
    seed: int = 0
    # grid and synthetic prior
    ny: int = 16
    nx: int = 16
    n_vars: int = 1
    patch: int = 1
    length_scale: float = 4.0
    variance: float = 1.0
    prior_mean: float = 0.0
    K: int = 0
    model_noise: float = 0.1
    shift: int = 1
    smooth: float = 0.5
    # reverse diffusion
    n_steps: int = 80
    sigma_min: float = 0.002
    sigma_max: float = 10.0
    rho: float = 7.0
    sampler: str = "sde"
    # denoiser
    denoiser: str = "spectral"
    params: str = ""
    data: str = ""
    # observations and guidance
    mode: str = "posterior"
    obs_fraction: float = 0.2
    obs_noise: float = 0.25
    guidance: str = "variance-corrected"
    zeta0: float = 1.0
    # tiling
    core: int = 0
    halo: int = 0
    # ensemble
    members: int = 16
    workers: int = 1
    save_members: bool = False
    preset: str = ""
    # training
    steps: int = 2000
    batch_size: int = 16
    lr: float = 1e-3
    lr_schedule: str = "cosine"
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    n_ctx_tokens: int = 16
    checkpoint_every: int = 0
    resume: bool = False
    # benchmarks
    suite: str = "scaling"
    quick: bool = False
    per_worker: int = 4

    def __post_init__(self):
        pos = ("ny", "nx", "n_vars", "patch", "n_steps", "members", "workers", "steps", "batch_size",
               "d_model", "n_layers", "n_heads", "n_ctx_tokens", "per_worker")
        for name in pos:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("K", "core", "halo", "checkpoint_every"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("length_scale", "variance", "lr", "obs_noise"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        if not 0.0 <= self.obs_fraction <= 1.0:
            raise ConfigError(f"obs_fraction must lie in [0, 1], got {self.obs_fraction}")
        if self.zeta0 < 0:
            raise ConfigError(f"zeta0 must be >= 0, got {self.zeta0}")
        if self.denoiser not in DENOISERS:
            raise ConfigError(f"denoiser must be one of {DENOISERS}, got {self.denoiser!r}")
        if self.sampler not in SAMPLER_MODES:
            raise ConfigError(f"sampler must be one of {SAMPLER_MODES}, got {self.sampler!r}")
        if self.mode not in DA_MODES:
            raise ConfigError(f"mode must be one of {DA_MODES}, got {self.mode!r}")
        if self.preset not in PRESETS:
            raise ConfigError(f"preset must be one of {PRESETS}, got {self.preset!r}")
        if self.core and (self.ny % self.core or self.nx % self.core):
            raise ConfigError(f"core {self.core} must divide the grid {self.ny}x{self.nx}")
        if self.ny % self.patch or self.nx % self.patch:
            raise ConfigError(f"patch {self.patch} must divide the grid {self.ny}x{self.nx}")

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def coerce(key: str, raw: str):
    """Parse ``raw`` as the declared type of ``key``; errors name the key."""
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    t = _TYPES[key]
    raw = raw.strip()
    try:
        if t == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if t == "int":
            return int(raw)
        if t == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r} expects {t}, got {raw!r}") from None
    return raw


def parse_text(text: str) -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        out[key] = coerce(key, val)
    return out


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    values = parse_text(Path(path).read_text()) if path else {}
    values.update(overrides or {})
    try:
        return RunConfig(**values)
    except TypeError as exc:  # pragma: no cover - keys are validated by coerce
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------------------
# run directories


class RunDir:
    """Output directory holding the config snapshot and a hashed manifest."""

    def __init__(self, cfg: RunConfig, command: str):
        from . import __version__

        self.cfg = cfg
        self.path = Path(cfg.out_dir)
        self.path.mkdir(parents=True, exist_ok=True)
        (self.path / "config.txt").write_text(cfg.to_text())
        self.files: dict[str, str] = {}
        self.meta = {"command": command, "seed": cfg.seed, "version": __version__,
                     "numpy": np.__version__, "python": platform.python_version()}

    def __truediv__(self, name) -> Path:
        return self.path / name

    def write_text(self, name: str, text: str) -> Path:
        p = self.path / name
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text)
        self.record(name)
        return p

    def record(self, name: str) -> None:
        from .io import sha256_file

        self.files[str(name)] = sha256_file(self.path / name)

    def finish(self) -> Path:
        self.record("config.txt")
        manifest = dict(self.meta, files=dict(sorted(self.files.items())))
        p = self.path / "manifest.json"
        p.write_text(json.dumps(manifest, indent=2) + "\n")
        return p
