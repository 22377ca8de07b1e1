"""Closed-form denoisers for Gaussian priors.

For ``x ~ N(mu, C)`` and ``z = x + sigma * eps`` the conditional mean is the
affine map ``mu + C (C + sigma^2 I)^-1 (z - mu)``.  Two covariance families
are supported: diagonal (cells independent) and stationary on a periodic grid
(diagonal in Fourier space).
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from ..errors import ConfigError
from ..fields import GrfParams, grf_spectrum
from .base import Denoiser


def _local(a, origin, shape):
    """Window of a full-domain parameter array matching a (possibly cropped) field."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim < 2:
        return a
    r0, c0 = origin
    h, w = shape[-2:]
    return a[..., r0:r0 + h, c0:c0 + w]


class GaussianDenoiser(Denoiser):
    """Diagonal prior ``N(mean, diag(var))``; acts on each cell independently."""

    pointwise = True

    def __init__(self, mean=0.0, var=1.0):
        var = np.asarray(var, dtype=np.float64)
        if np.any(var < 0):
            raise ConfigError("prior variances must be >= 0")
        self.mean = np.asarray(mean, dtype=np.float64)
        self.var = var

    def gain(self, sigma: float, shape=(), origin=(0, 0)) -> np.ndarray:
        c = _local(self.var, origin, shape)
        if sigma == 0:
            return np.ones_like(c)
        return c / (c + sigma * sigma)

    def evaluate(self, z, sigma, ctx=None, origin=(0, 0)):
        z = np.asarray(z, dtype=np.float64)
        if sigma == 0:
            return z.copy()
        mu = _local(self.mean, origin, z.shape)
        return mu + self.gain(sigma, z.shape, origin) * (z - mu)

    def vjp(self, z, sigma, ctx, cotangent, origin=(0, 0)):
        return self.gain(sigma, np.shape(cotangent), origin) * np.asarray(cotangent, dtype=np.float64)

    def posterior_variance(self, sigma, shape, origin=(0, 0)):
        c = _local(self.var, origin, shape)
        return np.broadcast_to(c * sigma * sigma / (c + sigma * sigma), shape)

    def prior_score(self, z, sigma, origin=(0, 0)):
        """Exact score of the noised prior ``N(mean, var + sigma^2)``."""
        z = np.asarray(z, dtype=np.float64)
        mu = _local(self.mean, origin, z.shape)
        return -(z - mu) / (_local(self.var, origin, z.shape) + sigma * sigma)


@lru_cache(maxsize=64)
def _spectrum(ny: int, nx: int, grf: GrfParams) -> np.ndarray:
    lam = grf_spectrum(ny, nx, grf)
    lam.flags.writeable = False
    return lam


class SpectralGaussianDenoiser(Denoiser):
    """Stationary GRF prior on a periodic grid, applied mode by mode.

    A cropped input is treated as periodic on its own extent, which is what
    makes tiled evaluation an approximation for this correlated prior.
    """

    def __init__(self, grf: GrfParams):
        self.grf = grf

    def spectrum(self, shape) -> np.ndarray:
        return _spectrum(int(shape[-2]), int(shape[-1]), self.grf)

    def _filter(self, x, sigma):
        lam = self.spectrum(x.shape)
        g = lam / (lam + sigma * sigma)
        return np.fft.ifft2(g * np.fft.fft2(x, axes=(-2, -1)), axes=(-2, -1)).real

    def evaluate(self, z, sigma, ctx=None, origin=(0, 0)):
        z = np.asarray(z, dtype=np.float64)
        if sigma == 0:
            return z.copy()
        mu = self.grf.mean
        return mu + self._filter(z - mu, sigma)

    def vjp(self, z, sigma, ctx, cotangent, origin=(0, 0)):
        cot = np.asarray(cotangent, dtype=np.float64)
        if sigma == 0:
            return cot.copy()
        # the Fourier gain is real and even, so the map is symmetric
        return self._filter(cot, sigma)

    def posterior_variance(self, sigma, shape, origin=(0, 0)):
        lam = self.spectrum(shape)
        v = float(np.mean(lam * sigma * sigma / (lam + sigma * sigma)))
        return np.full(shape, v)

    def prior_score(self, z, sigma, origin=(0, 0)):
        z = np.asarray(z, dtype=np.float64)
        lam = self.spectrum(z.shape)
        r = np.fft.fft2(z - self.grf.mean, axes=(-2, -1)) / (lam + sigma * sigma)
        return -np.fft.ifft2(r, axes=(-2, -1)).real


class DenseGaussianDenoiser(Denoiser):
    """Full-covariance prior over the whole domain, conditioned on a crop.

    On a crop the estimate is ``mu + C_cc (C_cc + sigma^2 I)^-1 (z_c - mu)``:
    the exact conditional mean given only the cells the tile can see.  On the
    full domain it coincides with the spectral denoiser of the same GRF.
    Intended for grids up to a few hundred cells.
    """

    def __init__(self, cov: np.ndarray, shape: tuple, mean=0.0):
        cov = np.asarray(cov, dtype=np.float64)
        n = int(np.prod(shape[-2:]))
        if cov.shape != (n, n):
            raise ConfigError(f"covariance must be {n}x{n} for grid {shape[-2:]}")
        self.cov = cov
        self.shape = tuple(shape[-2:])
        self.mean = float(mean)
        self._cache: dict = {}

    @classmethod
    def from_grf(cls, ny: int, nx: int, grf: GrfParams) -> "DenseGaussianDenoiser":
        from ..fields import grf_covariance_row

        row = grf_covariance_row(ny, nx, grf)
        rr, cc = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
        r, c = rr.ravel(), cc.ravel()
        cov = row[(r[:, None] - r[None, :]) % ny, (c[:, None] - c[None, :]) % nx]
        return cls(cov, (ny, nx), grf.mean)

    def _gain(self, origin, hw, sigma):
        key = (tuple(int(o) for o in origin), hw, float(sigma))
        g = self._cache.get(key)
        if g is None:
            ny, nx = self.shape
            rows = np.arange(origin[0], origin[0] + hw[0])
            cols = np.arange(origin[1], origin[1] + hw[1])
            idx = (rows[:, None] * nx + cols[None, :]).ravel()
            C = self.cov[np.ix_(idx, idx)]
            # symmetric solve: gain = C (C + s^2 I)^-1
            g = np.linalg.solve(C + sigma * sigma * np.eye(len(idx)), C).T
            if len(self._cache) > 256:
                self._cache.clear()
            self._cache[key] = g
        return g

    def evaluate(self, z, sigma, ctx=None, origin=(0, 0)):
        z = np.asarray(z, dtype=np.float64)
        if sigma == 0:
            return z.copy()
        hw = z.shape[-2:]
        g = self._gain(origin, hw, sigma)
        flat = (z - self.mean).reshape(z.shape[:-2] + (-1,))
        return self.mean + (flat @ g.T).reshape(z.shape)

    def vjp(self, z, sigma, ctx, cotangent, origin=(0, 0)):
        cot = np.asarray(cotangent, dtype=np.float64)
        if sigma == 0:
            return cot.copy()
        g = self._gain(origin, cot.shape[-2:], sigma)
        return (cot.reshape(cot.shape[:-2] + (-1,)) @ g).reshape(cot.shape)

    def posterior_variance(self, sigma, shape, origin=(0, 0)):
        g = self._gain(origin, tuple(shape[-2:]), sigma)
        return np.broadcast_to((sigma * sigma * np.diag(g)).reshape(shape[-2:]), shape)
