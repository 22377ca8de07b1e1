"""Grids, state fields, temporal context and synthetic data.

Fields live on a periodic ``ny x nx`` grid with ``n_vars`` channels.  The
synthetic prior is a stationary squared-exponential Gaussian random field,
sampled exactly through its circulant (FFT) diagonalisation; the toy dynamics
that turn one field into a temporal context is a circular shift followed by a
3-point smoothing stencil.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .rng import as_generator


@dataclass(frozen=True)
class GridSpec:
    ny: int
    nx: int
    n_vars: int = 1
    patch: int = 1
    K: int = 1

    def __post_init__(self):
        for name in ("ny", "nx", "n_vars", "patch", "K"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ConfigError(f"GridSpec.{name} must be a positive integer, got {v!r}")
        if self.ny % self.patch or self.nx % self.patch:
            raise ConfigError(
                f"patch {self.patch} does not divide grid {self.ny}x{self.nx}"
            )

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n_vars, self.ny, self.nx)

    @property
    def token_grid(self) -> tuple[int, int]:
        return (self.ny // self.patch, self.nx // self.patch)

    @property
    def n_tokens(self) -> int:
        ty, tx = self.token_grid
        return ty * tx

    @property
    def token_dim(self) -> int:
        return self.n_vars * self.patch * self.patch


def make_grid(ny: int, nx: int, n_vars: int = 1, patch: int = 1, K: int = 1) -> GridSpec:
    return GridSpec(ny, nx, n_vars, patch, K)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class StateField:
    """A gridded state of shape ``(n_vars, ny, nx)``.  Values are read-only."""

    spec: GridSpec
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values)
        if vals.shape != self.spec.shape:
            raise ConfigError(f"field shape {vals.shape} != grid shape {self.spec.shape}")
        if not np.all(np.isfinite(vals)):
            raise ConfigError("field contains non-finite values")
        object.__setattr__(self, "values", _frozen(vals))

    @classmethod
    def zeros(cls, spec: GridSpec, dtype=np.float64) -> "StateField":
        return cls(spec, np.zeros(spec.shape, dtype=dtype))

    def with_values(self, values: np.ndarray) -> "StateField":
        return StateField(self.spec, values)


@dataclass(frozen=True)
class TemporalContext:
    """K historical frames, oldest first.

    ``times`` is the calendar index of each frame (frame number by default);
    the denoiser uses it for its calendar embedding.
    """

    frames: tuple
    times: tuple = field(default=())

    def __post_init__(self):
        frames = tuple(self.frames)
        if not frames:
            raise ConfigError("temporal context needs at least one frame")
        spec = frames[0].spec
        for f in frames:
            if f.spec.shape != spec.shape:
                raise ConfigError("all context frames must share one grid")
        times = tuple(float(t) for t in self.times) if self.times else tuple(
            float(i) for i in range(len(frames))
        )
        if len(times) != len(frames):
            raise ConfigError("one calendar time per frame required")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "times", times)

    @property
    def K(self) -> int:
        return len(self.frames)

    @property
    def spec(self) -> GridSpec:
        return self.frames[0].spec

    def array(self) -> np.ndarray:
        """Stacked frames, shape ``(K, n_vars, ny, nx)``."""
        return np.stack([f.values for f in self.frames])

    @classmethod
    def from_array(cls, spec: GridSpec, arr: np.ndarray, times: Sequence[float] = ()) -> "TemporalContext":
        return cls(tuple(StateField(spec, a) for a in arr), tuple(times))

    def crop(self, rows: slice, cols: slice, spec: GridSpec) -> "TemporalContext":
        return TemporalContext(
            tuple(StateField(spec, f.values[:, rows, cols]) for f in self.frames), self.times
        )


# ---------------------------------------------------------------------------
# Gaussian random fields


@dataclass(frozen=True)
class GrfParams:
    length_scale: float = 4.0
    variance: float = 1.0
    mean: float = 0.0

    def __post_init__(self):
        if not self.length_scale > 0:
            raise ConfigError("length_scale must be > 0")
        if not self.variance >= 0:
            raise ConfigError("variance must be >= 0")


def _periodic_se_1d(n: int, ell: float) -> np.ndarray:
    """DFT of the unit-variance periodised squared-exponential kernel on ``n`` cells.

    Summing the kernel over periodic images keeps it positive definite on the
    torus; the naive wrapped kernel is indefinite once ``ell`` is a sizeable
    fraction of ``n``.
    """
    if math.isinf(ell) or ell > 64 * n:
        lam = np.zeros(n)
        lam[0] = n
        return lam
    if ell <= n:
        m = int(math.ceil(8.0 * ell / n)) + 1
        d = np.arange(n, dtype=np.float64)
        c = np.zeros(n)
        for j in range(-m, m + 1):
            c += np.exp(-((d + j * n) ** 2) / (2.0 * ell * ell))
        lam = np.fft.fft(c).real
    else:
        # Poisson summation: only the first aliases survive for long kernels.
        k = np.fft.fftfreq(n)
        lam = np.zeros(n)
        for j in range(-2, 3):
            lam += math.sqrt(2.0 * math.pi) * ell * np.exp(-2.0 * math.pi**2 * ell**2 * (k + j) ** 2)
    lam = np.clip(lam, 0.0, None)
    # normalise so that c(0) = mean(lam) = 1
    return lam / lam.mean()


def grf_spectrum(ny: int, nx: int, grf: GrfParams) -> np.ndarray:
    """Eigenvalues of the ``(ny*nx)`` periodic covariance, laid out as ``fft2`` modes.

    ``ifft2(spectrum).real`` is the covariance between cell (0, 0) and every
    other cell; its value at the origin equals ``grf.variance``.
    """
    return grf.variance * np.outer(
        _periodic_se_1d(ny, grf.length_scale), _periodic_se_1d(nx, grf.length_scale)
    )


def grf_covariance_row(ny: int, nx: int, grf: GrfParams) -> np.ndarray:
    return np.fft.ifft2(grf_spectrum(ny, nx, grf)).real


def sample_grf(spec: GridSpec, grf: GrfParams, rng) -> StateField:
    gen = as_generator(rng)
    lam = grf_spectrum(spec.ny, spec.nx, grf)
    root = np.sqrt(lam)
    white = gen.standard_normal(spec.shape)
    vals = np.fft.ifft2(root * np.fft.fft2(white), axes=(-2, -1)).real + grf.mean
    return StateField(spec, vals)


# ---------------------------------------------------------------------------
# toy dynamics


@dataclass(frozen=True)
class ToyDynamics:
    """Circular shift along columns followed by a 3-point smoothing stencil.

    The stencil is ``(smooth/2, 1 - smooth, smooth/2)``; ``shift=0, smooth=0``
    is the identity map.
    """

    shift: int = 1
    smooth: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.smooth <= 1.0:
            raise ConfigError("smooth must lie in [0, 1]")

    def apply(self, values: np.ndarray) -> np.ndarray:
        out = np.roll(values, self.shift, axis=-1) if self.shift else np.array(values, copy=True)
        if self.smooth:
            s = 0.5 * self.smooth
            out = (1.0 - self.smooth) * out + s * (np.roll(out, 1, axis=-1) + np.roll(out, -1, axis=-1))
        return out


def evolve_context(
    x0: StateField,
    K: int,
    model_noise: float,
    rng,
    dynamics: ToyDynamics = ToyDynamics(),
) -> TemporalContext:
    """Run the toy forecast model for ``K`` frames starting from ``x0``.

    Frame 0 is ``x0`` itself; frame ``j+1 = f(frame j) + model_noise * eps``.
    """
    if K < 1:
        raise ConfigError("K must be >= 1")
    gen = as_generator(rng)
    frames = [x0.values]
    for _ in range(K - 1):
        nxt = dynamics.apply(frames[-1])
        if model_noise:
            nxt = nxt + model_noise * gen.standard_normal(nxt.shape)
        frames.append(nxt)
    return TemporalContext(tuple(StateField(x0.spec, f) for f in frames))


# ---------------------------------------------------------------------------
# tokens


def patchify(values: np.ndarray, spec: GridSpec) -> np.ndarray:
    """``(n_vars, ny, nx)`` -> ``(N, patch*patch*n_vars)``.

    Tokens run row-major over the patch grid; inside a token the layout is
    row-major over the patch cells with the variable index fastest.  A leading
    batch axis is carried through untouched.
    """
    values = np.asarray(values)
    if values.shape[-3:] != spec.shape:
        raise ConfigError(f"field shape {values.shape[-3:]} != grid shape {spec.shape}")
    lead = values.shape[:-3]
    p = spec.patch
    ty, tx = spec.token_grid
    v = values.reshape(lead + (spec.n_vars, ty, p, tx, p))
    nl = len(lead)
    # (..., V, ty, py, tx, px) -> (..., ty, tx, py, px, V)
    order = tuple(range(nl)) + tuple(nl + i for i in (1, 3, 2, 4, 0))
    return v.transpose(order).reshape(lead + (ty * tx, p * p * spec.n_vars))


def unpatchify(tokens: np.ndarray, spec: GridSpec) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.shape[-2:] != (spec.n_tokens, spec.token_dim):
        raise ConfigError(
            f"token array {tokens.shape[-2:]} != ({spec.n_tokens}, {spec.token_dim})"
        )
    lead = tokens.shape[:-2]
    p = spec.patch
    ty, tx = spec.token_grid
    t = tokens.reshape(lead + (ty, tx, p, p, spec.n_vars))
    nl = len(lead)
    # (..., ty, tx, py, px, V) -> (..., V, ty, py, tx, px)
    order = tuple(range(nl)) + tuple(nl + i for i in (4, 0, 2, 1, 3))
    return t.transpose(order).reshape(lead + spec.shape)
