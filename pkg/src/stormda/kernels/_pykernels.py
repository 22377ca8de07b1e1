"""Pure-numpy reference versions of the compiled kernels."""
from __future__ import annotations

import numpy as np


def blend_accumulate(acc: np.ndarray, tile: np.ndarray, weight: np.ndarray, r0: int, c0: int) -> None:
    """In place: ``acc[:, r0:r0+h, c0:c0+w] += weight * tile``."""
    h, w = weight.shape
    acc[:, r0:r0 + h, c0:c0 + w] += weight * tile


def crps_ensemble(members: np.ndarray, obs: np.ndarray) -> np.ndarray:
    """Per-column CRPS of an (M, n) ensemble against ``obs`` (n,).

    ``mean|X - y| - 0.5 mean|X - X'|`` with the pair mean over all M^2 ordered
    pairs, evaluated in O(M log M) from the order statistics.
    """
    x = np.sort(np.asarray(members, dtype=np.float64), axis=0)
    M = x.shape[0]
    skill = np.mean(np.abs(x - obs), axis=0)
    coef = 2.0 * np.arange(1, M + 1) - M - 1.0
    return skill - (coef @ x) / (M * M)
