"""The denoiser contract shared by the closed-form and learned models."""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from ..errors import CapabilityError
from ..fields import TemporalContext


class ContextArrays(NamedTuple):
    """Raw context: ``frames`` (K, n_vars, ny, nx) and per-frame calendar ``times``."""

    frames: np.ndarray
    times: np.ndarray

    def crop(self, rows: slice, cols: slice) -> "ContextArrays":
        return ContextArrays(self.frames[..., rows, cols], self.times)


def context_arrays(ctx) -> ContextArrays | None:
    if ctx is None or isinstance(ctx, ContextArrays):
        return ctx
    if isinstance(ctx, TemporalContext):
        return ContextArrays(ctx.array(), np.asarray(ctx.times, dtype=np.float64))
    frames = np.asarray(ctx)
    return ContextArrays(frames, np.arange(frames.shape[0], dtype=np.float64))


class Denoiser:
    """Maps a noisy state ``z`` at level ``sigma`` to an estimate of the clean state.

    Subclasses implement :meth:`evaluate`; :meth:`vjp` is optional.  ``origin``
    is the (row, col) of ``z[..., 0, 0]`` inside the full domain, used by
    position-aware models when they see a tile crop.
    """

    #: True when output cell i depends on input cell i only.
    pointwise = False

    def evaluate(self, z: np.ndarray, sigma: float, ctx=None, origin=(0, 0)) -> np.ndarray:
        raise NotImplementedError

    def vjp(self, z: np.ndarray, sigma: float, ctx, cotangent: np.ndarray, origin=(0, 0)) -> np.ndarray:
        raise CapabilityError(f"{type(self).__name__} does not provide a vector-Jacobian product")

    def posterior_variance(self, sigma: float, shape: tuple, origin=(0, 0)) -> np.ndarray:
        """Per-cell estimate of Var[x | z] at noise level ``sigma``."""
        raise CapabilityError(f"{type(self).__name__} has no posterior variance estimate")

    def __call__(self, z, sigma, ctx=None, origin=(0, 0)):
        return self.evaluate(z, sigma, ctx, origin)


def denoiser_vjp(D, z, sigma, ctx, cotangent, origin=(0, 0)) -> np.ndarray:
    """Gradient of ``<D(z, sigma; ctx), cotangent>`` with respect to ``z``."""
    if not hasattr(D, "vjp"):
        raise CapabilityError(f"{type(D).__name__} does not provide a vector-Jacobian product")
    return D.vjp(z, sigma, ctx, cotangent, origin)
