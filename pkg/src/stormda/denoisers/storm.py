"""Miniature spatiotemporal transformer denoiser.

Layout of one forward pass (batch ``B``, ``N`` spatial tokens, ``K`` frames)::

    z  --c_in--> patch tokens --per-variable embed--> variable pooling ---+
                                            + position/noise/resolution    |
    context frames --per-variable embed--> variable pooling               |
        + calendar --> temporal pooling (per token) + position            |
        --> M learned queries cross-attend --> compressed context C       |
                                                                           v
    layer l:  u += (1-g) SelfAttn(LN u) + g CrossAttn(LN u, C);  u += FFN(LN u)
    LN --> linear decode --> unpatchify = F;   D = c_skip z + c_out F

``g = sigma^2 / (sigma^2 + sigma_data^2)`` is the noise gate: at high noise
the block leans on the context, at low noise on the current state.  The
reverse pass is written out by hand for exactly this architecture; it returns
the input gradient (used for guidance) and, when asked, parameter gradients
(used for training).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .. import tensor as T
from ..errors import ConfigError, NumericalError
from ..fields import GridSpec, patchify, unpatchify
from .base import Denoiser, context_arrays

_GELU_K = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class StormConfig:
    n_vars: int = 1
    patch: int = 2
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    n_ctx_tokens: int = 16
    ffn_mult: int = 2
    sigma_data: float = 0.5

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError("n_heads must divide d_model")
        if self.d_model % 4:
            raise ConfigError("d_model must be a multiple of 4 (sinusoidal embeddings)")
        if self.sigma_data <= 0:
            raise ConfigError("sigma_data must be > 0")
        for k in ("n_vars", "patch", "n_layers", "n_heads", "n_ctx_tokens", "ffn_mult"):
            if getattr(self, k) < 1:
                raise ConfigError(f"{k} must be >= 1")

    @property
    def token_dim(self) -> int:
        return self.patch * self.patch


def noise_gate(sigma, sigma_data: float):
    """``sigma^2 / (sigma^2 + sigma_data^2)``: 0 at sigma=0, 1/2 at sigma_data, -> 1."""
    if sigma_data <= 0:
        raise ConfigError("sigma_data must be > 0")
    s2 = np.square(np.asarray(sigma, dtype=np.float64))
    if np.any(s2 < 0) or np.any(np.asarray(sigma) < 0):
        raise ConfigError("sigma must be >= 0")
    g = s2 / (s2 + sigma_data * sigma_data)
    return float(g) if np.ndim(g) == 0 else g


def precond(sigma, sigma_data):
    """EDM preconditioning coefficients (c_skip, c_out, c_in, c_noise)."""
    s = np.asarray(sigma, dtype=np.float64)
    sd2 = sigma_data * sigma_data
    c_skip = sd2 / (s * s + sd2)
    c_out = s * sigma_data / np.sqrt(s * s + sd2)
    c_in = 1.0 / np.sqrt(s * s + sd2)
    c_noise = np.log(s) / 4.0
    return c_skip, c_out, c_in, c_noise


# ---------------------------------------------------------------------------
# parameters


def param_shapes(cfg: StormConfig) -> dict[str, tuple]:
    V, P, d, M = cfg.n_vars, cfg.token_dim, cfg.d_model, cfg.n_ctx_tokens
    F = cfg.ffn_mult * d
    shapes = {
        "z_emb_w": (V, P, d), "z_emb_b": (V, d), "z_var_q": (d,),
        "c_emb_w": (V, P, d), "c_emb_b": (V, d), "c_var_q": (d,),
        "c_time_q": (d,), "c_q": (M, d), "c_wk": (d, d), "c_wv": (d, d),
        "noise_w": (d, d),
        "lnf_g": (d,), "lnf_b": (d,), "dec_w": (d, V * P), "dec_b": (V * P,),
    }
    for l in range(cfg.n_layers):
        p = f"l{l}."
        shapes.update({
            p + "ln1_g": (d,), p + "ln1_b": (d,),
            p + "sa_wq": (d, d), p + "sa_wk": (d, d), p + "sa_wv": (d, d), p + "sa_wo": (d, d),
            p + "ca_wq": (d, d), p + "ca_wk": (d, d), p + "ca_wv": (d, d), p + "ca_wo": (d, d),
            p + "ln2_g": (d,), p + "ln2_b": (d,),
            p + "ff_w1": (d, F), p + "ff_b1": (F,), p + "ff_w2": (F, d), p + "ff_b2": (d,),
        })
    return shapes


_ZERO_OUT = ("sa_wo", "ca_wo", "ff_w2", "dec_w")


def init_params(cfg: StormConfig, rng, zero_out: bool = True, dtype=np.float32) -> dict[str, np.ndarray]:
    """Gaussian fan-in init; residual output projections and the decoder start at
    zero when ``zero_out`` so that the untrained model is the skip path."""
    from ..rng import as_generator

    gen = as_generator(rng)
    out = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.split(".")[-1]
        if leaf.endswith("_g"):
            a = np.ones(shape)
        elif leaf.endswith("_b") or leaf.startswith("ff_b") or (zero_out and leaf in _ZERO_OUT):
            a = np.zeros(shape)
        else:
            fan_in = shape[-2] if len(shape) >= 2 else shape[0]
            a = gen.standard_normal(shape) / math.sqrt(fan_in)
        out[name] = a.astype(dtype)
    return out


# ---------------------------------------------------------------------------
# fixed sinusoidal embeddings


def _sincos(x: np.ndarray, n: int, lo: float, hi: float) -> np.ndarray:
    """``n`` features (n/2 sin, n/2 cos) at geometric frequencies in [lo, hi]."""
    freqs = np.exp(np.linspace(math.log(lo), math.log(hi), n // 2))
    a = np.asarray(x, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.sin(a), np.cos(a)], axis=-1)


def position_embedding(ty: int, tx: int, d: int, origin=(0, 0)) -> np.ndarray:
    """``(N, d)`` for a ``ty x tx`` token window whose first token sits at ``origin`` (tokens).

    ``origin`` may also be an array of shape (B, 2), giving ``(B, N, d)``.
    """
    org = np.asarray(origin, dtype=np.float64)
    rr, cc = np.meshgrid(np.arange(ty), np.arange(tx), indexing="ij")
    rr = rr.reshape(-1)
    cc = cc.reshape(-1)
    if org.ndim == 2:
        rr = rr[None] + org[:, :1]
        cc = cc[None] + org[:, 1:]
    else:
        rr = rr + org[0]
        cc = cc + org[1]
    h = d // 2
    return np.concatenate([_sincos(rr, h, 1.0, 1e-2), _sincos(cc, h, 1.0, 1e-2)], axis=-1)


def calendar_embedding(times: np.ndarray, d: int) -> np.ndarray:
    return _sincos(times, d, 1.0, 1e-2)


def noise_features(c_noise: np.ndarray, d: int) -> np.ndarray:
    return _sincos(c_noise, d, 1.0, 32.0)


def resolution_embedding(patch: int, d: int) -> np.ndarray:
    return 0.1 * _sincos(np.log(float(patch)), d, 1.0, 8.0)


# ---------------------------------------------------------------------------
# layer primitives: forward returns (out, cache); backward returns grads


def _layernorm(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xh = xc * rstd
    return T.track(xh * g + b), (xh, rstd, g)


def _layernorm_bwd(dy, cache):
    xh, rstd, g = cache
    dg = (dy * xh).reshape(-1, dy.shape[-1]).sum(0)
    db = dy.reshape(-1, dy.shape[-1]).sum(0)
    dxh = dy * g
    dx = rstd * (dxh - dxh.mean(-1, keepdims=True) - xh * (dxh * xh).mean(-1, keepdims=True))
    return dx, dg, db


def _gelu(x):
    t = np.tanh(_GELU_K * (x + 0.044715 * x ** 3))
    return 0.5 * x * (1.0 + t), t


def _gelu_bwd(dy, x, t):
    dt = _GELU_K * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dt)


def _pool(x, q, mask=None):
    """Single-query attention pooling over axis -2 of ``x`` (..., L, d)."""
    scale = 1.0 / math.sqrt(x.shape[-1])
    s = (x @ q) * scale
    a = T.masked_softmax(s, mask, axis=-1)
    out = np.einsum("...l,...ld->...d", a, x)
    return T.track(out), (x, q, a, scale)


def _pool_bwd(dout, cache):
    x, q, a, scale = cache
    da = np.einsum("...d,...ld->...l", dout, x)
    ds = a * (da - (a * da).sum(-1, keepdims=True))
    dx = a[..., None] * dout[..., None, :] + (ds * scale)[..., None] * q
    dq = (ds[..., None] * x).reshape(-1, x.shape[-1]).sum(0) * scale
    return dx, dq


def _split(x, H):
    B, N, d = x.shape
    return x.reshape(B, N, H, d // H).transpose(0, 2, 1, 3)


def _merge(x):
    B, H, N, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, N, H * dh)


def _mha(a, c, wq, wk, wv, wo, H, keep):
    """Multi-head attention of queries from ``a`` over keys/values from ``c``."""
    q = _split(T.mm(a, wq), H)
    k = _split(T.mm(c, wk), H)
    v = _split(T.mm(c, wv), H)
    scale = 1.0 / math.sqrt(q.shape[-1])
    s = T.mm(q, k.transpose(0, 1, 3, 2), "attn_scores") * scale
    p = T.softmax(s, -1)
    o = _merge(T.mm(p, v, "attn_values"))
    out = T.mm(o, wo)
    cache = (a, c, q, k, v, p, o, scale, wq, wk, wv, wo, H) if keep else None
    return out, cache


def _mha_bwd(dout, cache, self_attn):
    a, c, q, k, v, p, o, scale, wq, wk, wv, wo, H = cache
    dwo = np.einsum("bnd,bne->de", o, dout)
    do = _split(dout @ wo.T, H)
    dp = do @ v.transpose(0, 1, 3, 2)
    dv = p.transpose(0, 1, 3, 2) @ do
    ds = p * (dp - (p * dp).sum(-1, keepdims=True)) * scale
    dq = _merge(ds @ k)
    dk = _merge(ds.transpose(0, 1, 3, 2) @ q)
    dv = _merge(dv)
    dwq = np.einsum("bnd,bne->de", a, dq)
    dwk = np.einsum("bnd,bne->de", c, dk)
    dwv = np.einsum("bnd,bne->de", c, dv)
    da = dq @ wq.T
    dc = dk @ wk.T + dv @ wv.T
    if self_attn:
        da = da + dc
        dc = None
    return da, dc, (dwq, dwk, dwv, dwo)


# ---------------------------------------------------------------------------
# the network


class StormDenoiser(Denoiser):
    """Learned conditional denoiser ``D_theta(z, sigma; context)``."""

    #: accepts a leading batch axis with per-item origins (tiles)
    batched = True

    def __init__(self, cfg: StormConfig, params: dict[str, np.ndarray] | None = None,
                 dtype=np.float32, rng=0):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        if params is None:
            params = init_params(cfg, rng)
        expected = param_shapes(cfg)
        missing = set(expected) - set(params)
        if missing:
            raise ConfigError(f"missing parameters: {sorted(missing)}")
        for k, shp in expected.items():
            if tuple(params[k].shape) != shp:
                raise ConfigError(f"parameter {k} has shape {params[k].shape}, expected {shp}")
            if not np.all(np.isfinite(params[k])):
                raise ConfigError(f"parameter {k} is not finite")
        self.params = {k: np.asarray(params[k], dtype=self.dtype) for k in expected}

    # -- convenience ---------------------------------------------------------
    def astype(self, dtype) -> "StormDenoiser":
        return StormDenoiser(self.cfg, self.params, dtype)

    def grid(self, shape) -> GridSpec:
        return GridSpec(shape[-2], shape[-1], self.cfg.n_vars, self.cfg.patch)

    def posterior_variance(self, sigma, shape, origin=(0, 0)):
        sd2 = self.cfg.sigma_data ** 2
        return np.full(shape, sd2 * sigma * sigma / (sd2 + sigma * sigma))

    # -- public API ----------------------------------------------------------
    def evaluate(self, z, sigma, ctx=None, origin=(0, 0)):
        z = np.asarray(z)
        if np.all(np.asarray(sigma) == 0):
            return np.array(z, dtype=np.float64)
        out, _ = self.forward(z, sigma, ctx, origin, keep=False)
        return out.astype(np.float64)

    def vjp(self, z, sigma, ctx, cotangent, origin=(0, 0)):
        z = np.asarray(z)
        if np.all(np.asarray(sigma) == 0):
            return np.array(cotangent, dtype=np.float64)
        _, cache = self.forward(z, sigma, ctx, origin, keep=True)
        dz, _ = self.backward(np.asarray(cotangent, dtype=self.dtype), cache, need_params=False)
        return dz.astype(np.float64)

    # -- context compression -------------------------------------------------
    def compress_context(self, frames, times, origin=(0, 0), frame_mask=None, keep=False):
        """Context frames (B, K, V, h, w) -> compressed tokens (B, M, d)."""
        P = self.params
        cfg = self.cfg
        d = cfg.d_model
        B, K = frames.shape[:2]
        spec = self.grid(frames.shape)
        tok = patchify(frames, spec)                                  # B,K,N,P*V
        N = tok.shape[-2]
        tok = tok.reshape(B, K, N, cfg.token_dim, cfg.n_vars).transpose(0, 1, 2, 4, 3)
        e = np.einsum("bknvp,vpd->bknvd", tok, P["c_emb_w"]) + P["c_emb_b"]
        T.track(e)
        cv, cv_cache = _pool(e, P["c_var_q"])                          # B,K,N,d
        times = np.asarray(times, dtype=np.float64)
        cal = calendar_embedding(times, d).astype(self.dtype)           # K,d or B,K,d
        cal = cal[:, None, :] if cal.ndim == 2 else cal[:, :, None, :]
        x = (cv + cal).transpose(0, 2, 1, 3)                            # B,N,K,d
        mask = None
        if frame_mask is not None:
            fm = np.asarray(frame_mask, dtype=bool)
            mask = np.broadcast_to(fm.reshape((-1, 1, K) if fm.ndim == 2 else (1, 1, K)), (B, N, K))
        h, t_cache = _pool(x, P["c_time_q"], mask)                       # B,N,d
        ty, tx = spec.token_grid
        pos = position_embedding(ty, tx, d, _token_origin(origin, cfg.patch)).astype(self.dtype)
        h = h + pos
        k = T.mm(h, P["c_wk"])
        v = T.mm(h, P["c_wv"])
        scale = 1.0 / math.sqrt(d)
        s = T.mm(np.broadcast_to(P["c_q"], (B,) + P["c_q"].shape), k.transpose(0, 2, 1), "ctx_scores") * scale
        a = T.softmax(s, -1)                                             # B,M,N
        C = T.mm(a, v, "ctx_values")                                     # B,M,d
        cache = None
        if keep:
            cache = dict(tok=tok, e_shape=e.shape, cv_cache=cv_cache, t_cache=t_cache,
                         h=h, k=k, v=v, a=a, scale=scale, B=B, K=K, N=N)
        return C, cache

    def _compress_bwd(self, dC, cache, grads):
        P = self.params
        a, v, k, h, scale = cache["a"], cache["v"], cache["k"], cache["h"], cache["scale"]
        da = dC @ v.transpose(0, 2, 1)
        dv = a.transpose(0, 2, 1) @ dC
        ds = a * (da - (a * da).sum(-1, keepdims=True)) * scale          # B,M,N
        grads["c_q"] += np.einsum("bmn,bnd->md", ds, k)
        dk = ds.transpose(0, 2, 1) @ P["c_q"]                            # B,N,d
        grads["c_wk"] += np.einsum("bnd,bne->de", h, dk)
        grads["c_wv"] += np.einsum("bnd,bne->de", h, dv)
        dh = dk @ P["c_wk"].T + dv @ P["c_wv"].T
        dx, dq = _pool_bwd(dh, cache["t_cache"])                          # B,N,K,d
        grads["c_time_q"] += dq
        dcv = dx.transpose(0, 2, 1, 3)                                   # B,K,N,d
        de, dq = _pool_bwd(dcv, cache["cv_cache"])                        # B,K,N,V,d
        grads["c_var_q"] += dq
        tok = cache["tok"]
        grads["c_emb_w"] += np.einsum("bknvp,bknvd->vpd", tok, de)
        grads["c_emb_b"] += de.reshape(-1, *de.shape[-2:]).sum(0)

    # -- forward / backward --------------------------------------------------
    def forward(self, z, sigma, ctx=None, origin=(0, 0), keep=False, frame_mask=None):
        """Returns ``(D(z), cache)``; ``z`` is (V, h, w) or (B, V, h, w)."""
        cfg, P, dt = self.cfg, self.params, self.dtype
        d = cfg.d_model
        single = z.ndim == 3
        zb = (z[None] if single else z).astype(dt, copy=False)
        B = zb.shape[0]
        spec = self.grid(zb.shape)
        if zb.shape[1] != cfg.n_vars:
            raise ConfigError(f"expected {cfg.n_vars} variables, got {zb.shape[1]}")
        sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (B,))
        if np.any(sig <= 0):
            raise ConfigError("sigma must be > 0 for the network path")
        c_skip, c_out, c_in, c_noise = precond(sig, cfg.sigma_data)
        gate = noise_gate(sig, cfg.sigma_data)
        gate = np.asarray(gate).reshape(B, 1, 1).astype(dt)

        with T.scope():
            # current-state embedding
            tok = patchify(zb * c_in.reshape(B, 1, 1, 1).astype(dt), spec)
            N = tok.shape[1]
            tok = tok.reshape(B, N, cfg.token_dim, cfg.n_vars).transpose(0, 1, 3, 2)
            e = np.einsum("bnvp,vpd->bnvd", tok, P["z_emb_w"]) + P["z_emb_b"]
            T.track(e)
            u, zv_cache = _pool(e, P["z_var_q"])
            ty, tx = spec.token_grid
            pos = position_embedding(ty, tx, d, _token_origin(origin, cfg.patch)).astype(dt)
            nfeat = noise_features(c_noise, d).astype(dt)                 # B,d
            u = u + pos + (nfeat @ P["noise_w"])[:, None, :] + resolution_embedding(cfg.patch, d).astype(dt)

            ca = context_arrays(ctx)
            C = c_cache = None
            if ca is not None:
                frames = np.asarray(ca.frames, dtype=dt)
                if frames.shape[-3:] != zb.shape[-3:]:
                    raise ConfigError(f"context frames {frames.shape[-3:]} do not match state {zb.shape[-3:]}")
                if frames.ndim == 4:
                    frames = np.broadcast_to(frames, (B,) + frames.shape)
                C, c_cache = self.compress_context(frames, ca.times, origin, frame_mask, keep)

            layers = []
            for l in range(cfg.n_layers):
                p = f"l{l}."
                a, ln1 = _layernorm(u, P[p + "ln1_g"], P[p + "ln1_b"])
                sa, sa_c = _mha(a, a, P[p + "sa_wq"], P[p + "sa_wk"], P[p + "sa_wv"], P[p + "sa_wo"],
                                cfg.n_heads, keep)
                if C is not None:
                    xa, ca_c = _mha(a, C, P[p + "ca_wq"], P[p + "ca_wk"], P[p + "ca_wv"], P[p + "ca_wo"],
                                    cfg.n_heads, keep)
                    u = u + (1 - gate) * sa + gate * xa
                else:
                    ca_c = None
                    u = u + (1 - gate) * sa
                b, ln2 = _layernorm(u, P[p + "ln2_g"], P[p + "ln2_b"])
                h1 = T.mm(b, P[p + "ff_w1"], "ffn") + P[p + "ff_b1"]
                g1, t1 = _gelu(h1)
                u = u + T.mm(g1, P[p + "ff_w2"], "ffn") + P[p + "ff_b2"]
                if not np.all(np.isfinite(u)):
                    raise NumericalError(f"non-finite activations after layer {l}")
                if keep:
                    layers.append((ln1, sa_c, ca_c, ln2, b, h1, g1, t1))
            y, lnf = _layernorm(u, P["lnf_g"], P["lnf_b"])
            out_tok = T.mm(y, P["dec_w"], "decode") + P["dec_b"]
            Fz = unpatchify(out_tok, spec)
            D = c_skip.reshape(B, 1, 1, 1) * zb + c_out.reshape(B, 1, 1, 1) * Fz
        if not np.all(np.isfinite(D)):
            raise NumericalError("non-finite denoiser output")
        cache = None
        if keep:
            cache = dict(B=B, N=N, spec=spec, single=single, tok=tok, e=e, zv_cache=zv_cache,
                         nfeat=nfeat, c_cache=c_cache, C=C, layers=layers, y=y, lnf=lnf,
                         gate=gate, c_skip=c_skip, c_out=c_out, c_in=c_in)
        return (D[0] if single else D), cache

    def backward(self, dD, cache, need_params=True):
        """Reverse pass.  Returns ``(dz, grads)``; grads is None unless requested."""
        cfg, P = self.cfg, self.params
        B, spec = cache["B"], cache["spec"]
        dD = dD[None] if cache["single"] else dD
        dD = dD.astype(self.dtype, copy=False)
        grads = {k: np.zeros_like(v) for k, v in P.items()} if need_params else _Sink()
        bshape = (B, 1, 1, 1)
        dz = cache["c_skip"].reshape(bshape).astype(self.dtype) * dD
        dF = cache["c_out"].reshape(bshape).astype(self.dtype) * dD
        dtok = patchify(dF, spec)                                         # B,N,VP
        grads["dec_w"] += np.einsum("bnd,bne->de", cache["y"], dtok)
        grads["dec_b"] += dtok.reshape(-1, dtok.shape[-1]).sum(0)
        dy = dtok @ P["dec_w"].T
        du, dg, db = _layernorm_bwd(dy, cache["lnf"])
        grads["lnf_g"] += dg
        grads["lnf_b"] += db
        gate = cache["gate"]
        dC = None
        for l in reversed(range(cfg.n_layers)):
            p = f"l{l}."
            ln1, sa_c, ca_c, ln2, b, h1, g1, t1 = cache["layers"][l]
            # FFN
            grads[p + "ff_b2"] += du.reshape(-1, du.shape[-1]).sum(0)
            grads[p + "ff_w2"] += np.einsum("bnf,bnd->fd", g1, du)
            dg1 = du @ P[p + "ff_w2"].T
            dh1 = _gelu_bwd(dg1, h1, t1)
            grads[p + "ff_b1"] += dh1.reshape(-1, dh1.shape[-1]).sum(0)
            grads[p + "ff_w1"] += np.einsum("bnd,bnf->df", b, dh1)
            db_ = dh1 @ P[p + "ff_w1"].T
            dx, dg, dbeta = _layernorm_bwd(db_, ln2)
            grads[p + "ln2_g"] += dg
            grads[p + "ln2_b"] += dbeta
            du = du + dx
            # attention
            da, _, (dwq, dwk, dwv, dwo) = _mha_bwd((1 - gate) * du, sa_c, True)
            for n, g in zip(("sa_wq", "sa_wk", "sa_wv", "sa_wo"), (dwq, dwk, dwv, dwo)):
                grads[p + n] += g
            if ca_c is not None:
                da2, dc, (dwq, dwk, dwv, dwo) = _mha_bwd(gate * du, ca_c, False)
                for n, g in zip(("ca_wq", "ca_wk", "ca_wv", "ca_wo"), (dwq, dwk, dwv, dwo)):
                    grads[p + n] += g
                da = da + da2
                dC = dc if dC is None else dC + dc
            dx, dg, dbeta = _layernorm_bwd(da, ln1)
            grads[p + "ln1_g"] += dg
            grads[p + "ln1_b"] += dbeta
            du = du + dx
        # embeddings
        grads["noise_w"] += np.einsum("bd,be->de", cache["nfeat"], du.sum(1))
        de, dq = _pool_bwd(du, cache["zv_cache"])
        grads["z_var_q"] += dq
        tok = cache["tok"]
        grads["z_emb_w"] += np.einsum("bnvp,bnvd->vpd", tok, de)
        grads["z_emb_b"] += de.reshape(-1, *de.shape[-2:]).sum(0)
        dtok_in = np.einsum("bnvd,vpd->bnpv", de, P["z_emb_w"]).reshape(B, cache["N"], -1)
        dz = dz + cache["c_in"].reshape(bshape).astype(self.dtype) * unpatchify(dtok_in, spec)
        if need_params and dC is not None:
            self._compress_bwd(dC, cache["c_cache"], grads)
        dz = dz[0] if cache["single"] else dz
        return dz, (grads if need_params else None)


class _Sink(dict):
    """Gradient accumulator that discards everything (input-gradient-only pass)."""

    def __getitem__(self, key):
        return _NULL


class _Null:
    def __iadd__(self, other):
        return self


_NULL = _Null()


def _token_origin(origin, patch):
    org = np.asarray(origin)
    if org.ndim == 2:
        return org // patch
    return (int(org[0]) // patch, int(org[1]) // patch)


def storm_config_dict(cfg: StormConfig) -> dict:
    return asdict(cfg)
