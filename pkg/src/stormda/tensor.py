"""Instrumented tensor primitives.

Every dense contraction and large temporary in the denoisers goes through
this module so that benchmarks can count flops exactly and track the peak
working-set of the tensor layer.  Counting is off unless a :class:`Profiler`
is active, in which case the overhead is one dictionary update per call.

Flop convention: one multiply-add is 2 flops.  Category ``attn_scores`` holds
only the query-key score products of the transformer layers; it is the
quantity compared across attention layouts.
"""
from __future__ import annotations

import threading
from collections import defaultdict
from contextlib import contextmanager

import numpy as np

_lock = threading.Lock()
_active: "Profiler | None" = None


class Profiler:
    def __init__(self):
        self.flops: dict[str, int] = defaultdict(int)
        self.live = 0
        self.peak = 0

    @property
    def total_flops(self) -> int:
        return sum(self.flops.values())

    def __enter__(self):
        global _active
        with _lock:
            self._prev = _active
            _active = self
        return self

    def __exit__(self, *exc):
        global _active
        with _lock:
            _active = self._prev
        return False


def profiling() -> bool:
    return _active is not None


def count(category: str, flops: int) -> None:
    p = _active
    if p is not None:
        with _lock:
            p.flops[category] += int(flops)


def track(arr: np.ndarray) -> np.ndarray:
    p = _active
    if p is not None:
        with _lock:
            p.live += arr.nbytes
            if p.live > p.peak:
                p.peak = p.live
    return arr


@contextmanager
def scope():
    """Temporaries tracked inside the block are released when it exits."""
    p = _active
    start = p.live if p is not None else 0
    try:
        yield
    finally:
        if p is not None:
            with _lock:
                p.live = start


def mm(a: np.ndarray, b: np.ndarray, category: str = "proj") -> np.ndarray:
    """Batched matmul ``a @ b`` with flop accounting."""
    out = np.matmul(a, b)
    if _active is not None:
        k = a.shape[-1]
        count(category, 2 * out.size * k)
        track(out)
    return out


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    e /= np.sum(e, axis=axis, keepdims=True)
    if _active is not None:
        count("softmax", 4 * x.size)
        track(e)
    return e


def masked_softmax(x: np.ndarray, mask: np.ndarray | None, axis: int = -1) -> np.ndarray:
    """Softmax where entries with ``mask == False`` get exactly zero weight."""
    if mask is None:
        return softmax(x, axis)
    x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.where(mask, np.exp(x - m), 0.0)
    s = np.sum(e, axis=axis, keepdims=True)
    e = e / np.where(s > 0, s, 1.0)
    if _active is not None:
        count("softmax", 4 * x.size)
        track(e)
    return e
