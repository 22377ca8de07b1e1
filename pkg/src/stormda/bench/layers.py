"""Reference attention layouts used only for measurement.

All of them run through the same instrumented primitives as the learned
denoiser, so flop counts and timings differ only by the attention pattern.
"""
from __future__ import annotations

import math

import numpy as np

from .. import tensor as T


def init_layer(d: int, rng, dtype=np.float32) -> dict:
    gen = np.random.default_rng(rng)
    return {k: (gen.standard_normal((d, d)) / math.sqrt(d)).astype(dtype) for k in ("wq", "wk", "wv", "wo")}


def _heads(x, H):
    *lead, n, d = x.shape
    return x.reshape(*lead, n, H, d // H).swapaxes(-2, -3)


def _unheads(x):
    *lead, H, n, dh = x.shape
    return x.swapaxes(-2, -3).reshape(*lead, n, H * dh)


def attention(x, p, H, chunk: int | None = None):
    """Self-attention over axis -2 of ``x`` (..., n, d), queries processed in chunks."""
    with T.scope():
        q = _heads(T.mm(x, p["wq"]), H)
        k = _heads(T.mm(x, p["wk"]), H)
        v = _heads(T.mm(x, p["wv"]), H)
        scale = 1.0 / math.sqrt(q.shape[-1])
        n = x.shape[-2]
        chunk = chunk or n
        kt = np.swapaxes(k, -1, -2)
        outs = []
        for s in range(0, n, chunk):
            with T.scope():
                sc = T.mm(q[..., s:s + chunk, :], kt, "attn_scores")
                sc *= scale
                pr = T.softmax(sc, -1)
                outs.append(T.mm(pr, v, "attn_values"))
            T.track(outs[-1])
        o = _unheads(np.concatenate(outs, axis=-2))
        return x + T.mm(o, p["wo"])


def vit_global_layer(u, p, H=2, chunk=2048):
    """``u`` (K, N, d): one attention over all K*N tokens."""
    K, N, d = u.shape
    return attention(u.reshape(1, K * N, d), p, H, chunk).reshape(K, N, d)


def timesformer_layer(u, p_space, p_time, H=2, chunk=2048):
    """Divided attention: spatial within each frame, then temporal per location."""
    x = attention(u, p_space, H, chunk)                          # K x (N x N)
    x = attention(np.swapaxes(x, 0, 1), p_time, H, chunk)        # N x (K x K)
    return np.swapaxes(x, 0, 1)
