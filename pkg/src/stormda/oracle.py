"""Ground truth for verification: closed-form posteriors, finite differences,
and tiled-versus-global audits."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .errors import CapabilityError, ConfigError, NumericalError

DENSE_MAX_DIM = 256
AUDIT_HEADER = "plan,halo,seed,mode,max_disc,mean_disc"


@dataclass(frozen=True)
class GaussianPosterior:
    mean: np.ndarray
    var: np.ndarray
    cov: np.ndarray | None = None
    spectrum: np.ndarray | None = None


def _obs_arrays(mask, R, y):
    mask = np.asarray(mask, dtype=bool)
    y = np.asarray(getattr(y, "values", y), dtype=np.float64).reshape(-1)
    if y.size != mask.sum():
        raise ConfigError(f"{y.size} observations for a mask with {int(mask.sum())} entries")
    R = np.broadcast_to(np.asarray(getattr(y, "noise_var", R), dtype=np.float64), y.shape)
    if np.any(R <= 0):
        raise ConfigError("observation noise variance must be > 0 at observed cells")
    return mask, R, y


def exact_gaussian_posterior(mu, cov, mask, R, y, kind: str = "diag") -> GaussianPosterior:
    """Conjugate update for a diagonal prior, or a stationary prior with a full mask.

    ``kind="diag"``: ``cov`` holds per-cell variances.  ``kind="spectral"``:
    ``cov`` holds the per-Fourier-mode variances of a periodic stationary prior
    (same shape as one field) and every cell must be observed with a common R.
    """
    mask, R, y = _obs_arrays(mask, R, y)
    mu = np.broadcast_to(np.asarray(mu, dtype=np.float64), mask.shape).copy()
    if kind == "diag":
        c = np.broadcast_to(np.asarray(cov, dtype=np.float64), mask.shape)
        if np.any(c < 0):
            raise ConfigError("prior variances must be >= 0")
        mean, var = mu.copy(), np.array(c, dtype=np.float64)
        co = c[mask]
        mean[mask] = (R * mu[mask] + co * y) / (co + R)
        var[mask] = co * R / (co + R)
        return GaussianPosterior(mean, var)
    if kind == "spectral":
        if not mask.all():
            raise CapabilityError("stationary prior with a partial mask: use dense_gaussian_posterior")
        if np.ptp(R) != 0:
            raise CapabilityError("spectral update needs a single observation variance")
        r = float(R[0])
        lam = np.asarray(cov, dtype=np.float64)
        yf = y.reshape(mask.shape)
        ax = (-2, -1)
        mhat = np.fft.fft2(mu, axes=ax)
        yhat = np.fft.fft2(yf, axes=ax)
        mean = np.fft.ifft2((r * mhat + lam * yhat) / (lam + r), axes=ax).real
        post_lam = lam * r / (lam + r)
        var = np.full(mask.shape, float(np.mean(post_lam)))
        return GaussianPosterior(mean, var, spectrum=post_lam)
    raise ConfigError(f"unknown prior kind {kind!r}")


def dense_gaussian_posterior(mu, C, H, R, y) -> GaussianPosterior:
    """Kalman update ``mu + C H^T S^-1 (y - H mu)``, ``C - C H^T S^-1 H C`` with
    ``S = H C H^T + R`` factorized by Cholesky (fails instead of regularizing)."""
    mu = np.asarray(mu, dtype=np.float64).reshape(-1)
    C = np.asarray(C, dtype=np.float64)
    n = mu.size
    if n > DENSE_MAX_DIM:
        raise ConfigError(f"dense oracle is limited to {DENSE_MAX_DIM} state dimensions, got {n}")
    if C.shape != (n, n):
        raise ConfigError("prior covariance shape does not match the mean")
    H = np.asarray(H)
    if H.dtype == bool:
        idx = np.flatnonzero(H.reshape(-1))
        H = np.eye(n)[idx]
    H = np.asarray(H, dtype=np.float64).reshape(-1, n)
    y = np.asarray(getattr(y, "values", y), dtype=np.float64).reshape(-1)
    m = H.shape[0]
    if y.size != m:
        raise ConfigError(f"{y.size} observations for an operator with {m} rows")
    if m == 0:
        return GaussianPosterior(mu.copy(), np.diag(C).copy(), C.copy())
    R = np.asarray(R, dtype=np.float64)
    Rm = R if R.ndim == 2 else np.diag(np.broadcast_to(R, (m,)))
    CHt = C @ H.T
    S = H @ CHt + Rm
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("innovation covariance is not positive definite") from exc
    # K^T = S^-1 H C, via two triangular solves
    Kt = solve_triangular(L.T, solve_triangular(L, CHt.T, lower=True), lower=False)
    mean = mu + Kt.T @ (y - H @ mu)
    cov = C - CHt @ Kt
    cov = 0.5 * (cov + cov.T)
    return GaussianPosterior(mean, np.diag(cov).copy(), cov)


def fd_check(function: Callable, point, direction, h: float = 1e-5, grad=None, analytic=None) -> float:
    """Relative error between a central difference and the analytic directional derivative.

    Supply either ``grad`` (callable returning the gradient at ``point``) or
    ``analytic`` (the directional derivative itself).
    """
    if not h > 0:
        raise ConfigError("finite-difference step must be > 0")
    x = np.asarray(point, dtype=np.float64)
    v = np.asarray(direction, dtype=np.float64)
    fd = (float(function(x + h * v)) - float(function(x - h * v))) / (2.0 * h)
    if analytic is None:
        if grad is None:
            raise ConfigError("fd_check needs grad or analytic")
        analytic = float(np.sum(np.asarray(grad(x)) * v))
    scale = max(abs(fd), abs(analytic), 1e-300)
    return abs(fd - analytic) / scale


# ---------------------------------------------------------------------------
# tiled versus global audit


@dataclass
class AuditRow:
    plan: str
    halo: int
    seed: int
    mode: str
    max_disc: float
    mean_disc: float


@dataclass
class AuditReport:
    rows: list

    def to_csv(self) -> str:
        lines = [AUDIT_HEADER] + [
            f"{r.plan},{r.halo},{r.seed},{r.mode},{r.max_disc!r},{r.mean_disc!r}" for r in self.rows
        ]
        return "\n".join(lines) + "\n"

    def select(self, mode: str) -> list:
        return [r for r in self.rows if r.mode == mode]

    def curve(self, mode: str, seed: int, stat: str = "max_disc") -> list:
        rows = sorted((r for r in self.rows if r.mode == mode and r.seed == seed), key=lambda r: r.halo)
        return [getattr(r, stat) for r in rows]


def plan_label(plan) -> str:
    return f"c{plan.core}h{plan.halo}"


def tiled_vs_global_audit(D, plans: Sequence, schedule, ctx=None, obs=None, seeds: Sequence[int] = (0,),
                          modes: Sequence[str] = ("sde",), spec=None) -> AuditReport:
    """Run the same seeded trajectory globally and under each plan.

    For every (plan, seed, mode) two rows are written: ``<mode>`` compares the
    final samples, ``<mode>/denoised`` compares the tiled and global denoiser
    outputs evaluated on the states of the global trajectory at every step.
    ``obs`` is an optional ``(y, op, guidance)`` triple for posterior sampling.
    """
    from .diffusion import make_denoise_fn, run_reverse
    from .guidance import likelihood_score
    from .tiling import tiled_denoise

    spec = spec or plans[0].grid
    if spec.ny > 64 or spec.nx > 64:
        raise ConfigError("audit domain is limited to 64x64 (global path must be affordable)")

    def extra_for(tiling):
        if obs is None:
            return None
        y, op, sched = obs

        def extra(z, s, xhat):
            return likelihood_score(z, s, y, op, D, ctx, sched, xhat=xhat, tiling=tiling,
                                    sigma_floor=schedule.sigma_floor)

        return extra

    rows = []
    for mode in modes:
        for seed in seeds:
            states = []
            glob = run_reverse(make_denoise_fn(D, ctx), spec.shape, schedule, seed, mode,
                               extra_score=extra_for(None),
                               trajectory=lambda i, z: states.append((i - 1, z.copy())))
            # (k, z): z left step k and is denoised next at sigmas[k + 1]
            inputs = states
            for plan in plans:
                tiled = run_reverse(make_denoise_fn(D, ctx, plan), spec.shape, schedule, seed, mode,
                                    extra_score=extra_for(plan))
                d = np.abs(tiled - glob)
                rows.append(AuditRow(plan_label(plan), plan.halo, seed, mode, float(d.max()), float(d.mean())))
                step_max, step_mean = 0.0, []
                for i, z in inputs:
                    s = schedule.sigmas[i + 1]
                    e = np.abs(tiled_denoise(D, z, s, ctx, plan) - D.evaluate(z, s, ctx))
                    step_max = max(step_max, float(e.max()))
                    step_mean.append(float(e.mean()))
                rows.append(AuditRow(plan_label(plan), plan.halo, seed, mode + "/denoised", step_max,
                                     float(np.mean(step_mean)) if step_mean else 0.0))
    return AuditReport(rows)
