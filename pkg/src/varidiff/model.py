"""Patch-transformer denoiser with cross-attention or FiLM conditioning.

Pipeline: patchify -> add learned positional embedding -> pre-norm
transformer blocks -> final norm -> zero-initialized linear projection
back to patches. Every block is modulated by scale/shift vectors
derived from the timestep embedding (plus, in film mode, the projected
CLS vector). In cross-attention mode each self-attention is followed by
a cross-attention over the context tokens; the context tokens carry no
positional encoding, so the model is invariant to their order.

A learned null context (tokens + CLS) stands in whenever the context is
absent or dropped, which is what classifier-free guidance samples
against at generation time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import fileio
from . import tensor as T
from .tensor import Tensor

CONDITIONING_MODES = ("cross-attention", "film", "none")


@dataclass(frozen=True)
class DenoiserConfig:
    height: int = 16
    width: int = 16
    channels: int = 3
    patch_size: int = 2
    d_model: int = 64
    num_blocks: int = 4
    num_heads: int = 4
    conditioning_mode: str = "cross-attention"
    t_c: int = 16
    d_c: int = 32
    time_embed_dim: int = 64
    context_dropout_prob: float = 0.1
    mlp_ratio: int = 2

    def __post_init__(self):
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ValueError("image dims must be divisible by patch_size")
        if self.d_model % self.num_heads:
            raise ValueError("d_model must be divisible by num_heads")
        if self.conditioning_mode not in CONDITIONING_MODES:
            raise ValueError(f"unknown conditioning mode {self.conditioning_mode!r}")
        if not (0.0 <= self.context_dropout_prob <= 1.0):
            raise ValueError("context_dropout_prob must lie in [0, 1]")

    @property
    def num_tokens(self):
        return (self.height // self.patch_size) * (self.width // self.patch_size)

    @property
    def patch_dim(self):
        return self.patch_size * self.patch_size * self.channels

    @property
    def num_sublayers(self):
        return 3 if self.conditioning_mode == "cross-attention" else 2


@dataclass
class BatchedContext:
    """Per-batch conditioning arrays plus an optional keep mask.

    keep[i] False means item i was dropped: the learned null context is
    substituted for it inside forward.
    """

    tokens: np.ndarray | None  # [B, T_c, D_c]
    cls: np.ndarray | None  # [B, D_c]
    keep: np.ndarray | None = None  # [B] bool


def drop_context(context, prob, rng):
    """Return None with probability prob, else pass the context through."""
    if not (0.0 <= prob <= 1.0):
        raise ValueError("drop probability must lie in [0, 1]")
    if prob > 0.0 and rng.random() < prob:
        return None
    return context


class Denoiser:
    """Stateless module: parameters live in a plain dict of Tensors."""

    def __init__(self, cfg: DenoiserConfig):
        self.cfg = cfg

    # ----- parameters -----

    def init_params(self, seed, dtype=np.float32):
        """Deterministic init: scaled-normal weights, zero biases and a
        zero final projection so the fresh model predicts v ~ 0."""
        cfg = self.cfg
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD15C]))
        p = {}

        def dense(name, fan_in, fan_out, zero=False, small=False):
            if zero:
                w = np.zeros((fan_in, fan_out))
            elif small:
                w = 0.02 * rng.standard_normal((fan_in, fan_out))
            else:
                w = rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in)
            p[name + "/w"] = w
            p[name + "/b"] = np.zeros(fan_out)

        dense("patch_embed", cfg.patch_dim, cfg.d_model)
        p["pos_embed"] = 0.02 * rng.standard_normal((cfg.num_tokens, cfg.d_model))
        dense("time_mlp/fc1", cfg.time_embed_dim, cfg.d_model)
        dense("time_mlp/fc2", cfg.d_model, cfg.d_model)
        if cfg.conditioning_mode == "film":
            dense("cls_proj", cfg.d_c, cfg.d_model)
        if cfg.conditioning_mode in ("cross-attention", "film"):
            p["null_ctx/tokens"] = 0.1 * rng.standard_normal((cfg.t_c, cfg.d_c))
            p["null_ctx/cls"] = 0.1 * rng.standard_normal(cfg.d_c)
        d = cfg.d_model
        for i in range(cfg.num_blocks):
            b = f"block{i}"
            p[f"{b}/ln1/g"] = np.ones(d)
            p[f"{b}/ln1/b"] = np.zeros(d)
            for nm in ("wq", "wk", "wv", "wo"):
                p[f"{b}/attn/{nm}"] = rng.standard_normal((d, d)) / math.sqrt(d)
            if cfg.conditioning_mode == "cross-attention":
                p[f"{b}/lnx/g"] = np.ones(d)
                p[f"{b}/lnx/b"] = np.zeros(d)
                p[f"{b}/xattn/wq"] = rng.standard_normal((d, d)) / math.sqrt(d)
                p[f"{b}/xattn/wk"] = rng.standard_normal((cfg.d_c, d)) / math.sqrt(cfg.d_c)
                p[f"{b}/xattn/wv"] = rng.standard_normal((cfg.d_c, d)) / math.sqrt(cfg.d_c)
                p[f"{b}/xattn/wo"] = rng.standard_normal((d, d)) / math.sqrt(d)
            p[f"{b}/ln2/g"] = np.ones(d)
            p[f"{b}/ln2/b"] = np.zeros(d)
            # small (not zero) init so the modulation path carries gradient
            dense(f"{b}/mod", d, cfg.num_sublayers * 2 * d, small=True)
            dense(f"{b}/mlp/fc1", d, cfg.mlp_ratio * d)
            dense(f"{b}/mlp/fc2", cfg.mlp_ratio * d, d)
        p["final/ln/g"] = np.ones(d)
        p["final/ln/b"] = np.zeros(d)
        dense("final/proj", d, cfg.patch_dim, zero=True)
        return {k: Tensor(v.astype(dtype), requires_grad=True) for k, v in p.items()}

    def param_count(self, params):
        return sum(int(t.size) for t in params.values())

    # ----- forward -----

    def forward(self, params, z_t, t, context: BatchedContext | None):
        """Predict v for a noised batch.

        z_t: [B, H, W, C]; t: [B] times in (0, 1); context: batched
        conditioning or None (null context substituted).
        """
        cfg = self.cfg
        z_t = np.asarray(z_t)
        if z_t.shape[1:] != (cfg.height, cfg.width, cfg.channels):
            raise ValueError(f"bad input shape {z_t.shape}")
        batch = z_t.shape[0]
        dtype = params["pos_embed"].dtype

        x = Tensor(_patchify(z_t, cfg.patch_size).astype(dtype))
        x = T.add(
            T.add(T.matmul(x, params["patch_embed/w"]), params["patch_embed/b"]),
            params["pos_embed"],
        )

        temb = Tensor(_sinusoidal_time(np.asarray(t), cfg.time_embed_dim).astype(dtype))
        temb = T.add(T.matmul(temb, params["time_mlp/fc1/w"]), params["time_mlp/fc1/b"])
        temb = T.gelu(temb)
        cvec = T.add(T.matmul(temb, params["time_mlp/fc2/w"]), params["time_mlp/fc2/b"])

        tokens_t = cls_t = None
        if cfg.conditioning_mode in ("cross-attention", "film"):
            tokens_t, cls_t = self._mix_context(params, context, batch, dtype)
        if cfg.conditioning_mode == "film":
            ones = Tensor(np.ones(cfg.d_c, dtype=dtype))
            zeros = Tensor(np.zeros(cfg.d_c, dtype=dtype))
            cls_n = T.layer_norm(cls_t, ones, zeros)
            cvec = T.add(
                cvec, T.add(T.matmul(cls_n, params["cls_proj/w"]), params["cls_proj/b"])
            )

        for i in range(cfg.num_blocks):
            x = self._block(params, f"block{i}", x, cvec, tokens_t)

        x = T.layer_norm(x, params["final/ln/g"], params["final/ln/b"])
        x = T.add(T.matmul(x, params["final/proj/w"]), params["final/proj/b"])
        return _unpatchify(x, cfg)

    def bind(self, params):
        """Close over parameters: the (z_t, t, context) callable the
        sampler and loss expect."""

        def fn(z_t, t, context):
            return self.forward(params, z_t, t, context)

        return fn

    # ----- internals -----

    def _mix_context(self, params, context, batch, dtype):
        cfg = self.cfg
        null_tok = T.reshape(params["null_ctx/tokens"], (1, cfg.t_c, cfg.d_c))
        null_cls = T.reshape(params["null_ctx/cls"], (1, cfg.d_c))
        if context is None:
            return null_tok, null_cls
        if cfg.conditioning_mode == "film" and context.cls is None:
            raise ValueError("film conditioning requires a CLS vector")
        tok = np.asarray(context.tokens, dtype=dtype) if context.tokens is not None else None
        cls = np.asarray(context.cls, dtype=dtype) if context.cls is not None else None
        if tok is not None and tok.shape[1:] != (cfg.t_c, cfg.d_c):
            raise ValueError(f"context tokens shape {tok.shape} != (B, {cfg.t_c}, {cfg.d_c})")
        if context.keep is None:
            return (
                Tensor(tok) if tok is not None else null_tok,
                Tensor(cls) if cls is not None else null_cls,
            )
        keep = np.asarray(context.keep, dtype=dtype).reshape(batch, 1, 1)
        tok_t = null_tok
        if tok is not None:
            tok_t = T.add(T.mul(Tensor(tok), Tensor(keep)), T.mul(null_tok, Tensor(1.0 - keep)))
        keep_c = keep.reshape(batch, 1)
        cls_tensor = null_cls
        if cls is not None:
            cls_tensor = T.add(
                T.mul(Tensor(cls), Tensor(keep_c)), T.mul(null_cls, Tensor(1.0 - keep_c))
            )
        return tok_t, cls_tensor

    def _block(self, params, b, x, cvec, ctx_tokens):
        cfg = self.cfg
        mods = T.add(T.matmul(cvec, params[f"{b}/mod/w"]), params[f"{b}/mod/b"])
        n_sub, d = cfg.num_sublayers, cfg.d_model
        mods = T.reshape(mods, (-1, 1, n_sub * 2 * d))

        def modulate(h, j):
            s = mods[:, :, 2 * j * d : (2 * j + 1) * d]
            sh = mods[:, :, (2 * j + 1) * d : (2 * j + 2) * d]
            return T.add(T.mul(h, T.add(s, 1.0)), sh)

        h = T.layer_norm(x, params[f"{b}/ln1/g"], params[f"{b}/ln1/b"])
        h = modulate(h, 0)
        x = T.add(x, self._self_attention(params, b, h))
        j = 1
        if cfg.conditioning_mode == "cross-attention":
            h = T.layer_norm(x, params[f"{b}/lnx/g"], params[f"{b}/lnx/b"])
            h = modulate(h, 1)
            x = T.add(x, self._cross_attention(params, b, h, ctx_tokens))
            j = 2
        h = T.layer_norm(x, params[f"{b}/ln2/g"], params[f"{b}/ln2/b"])
        h = modulate(h, j)
        h = T.add(T.matmul(h, params[f"{b}/mlp/fc1/w"]), params[f"{b}/mlp/fc1/b"])
        h = T.gelu(h)
        h = T.add(T.matmul(h, params[f"{b}/mlp/fc2/w"]), params[f"{b}/mlp/fc2/b"])
        return T.add(x, h)

    def _self_attention(self, params, b, h):
        cfg = self.cfg
        q = T.matmul(h, params[f"{b}/attn/wq"])
        k = T.matmul(h, params[f"{b}/attn/wk"])
        v = T.matmul(h, params[f"{b}/attn/wv"])
        o = _mha(q, k, v, cfg.num_heads)
        return T.matmul(o, params[f"{b}/attn/wo"])

    def _cross_attention(self, params, b, h, ctx_tokens):
        cfg = self.cfg
        q = T.matmul(h, params[f"{b}/xattn/wq"])
        k = T.matmul(ctx_tokens, params[f"{b}/xattn/wk"])
        v = T.matmul(ctx_tokens, params[f"{b}/xattn/wv"])
        o = _mha(q, k, v, cfg.num_heads)
        return T.matmul(o, params[f"{b}/xattn/wo"])


def _mha(q, k, v, heads):
    """Multi-head scaled dot-product attention over the token axis."""
    bq, tq, d = q.shape
    dh = d // heads
    tk = k.shape[-2]

    def split(x, tl):
        x = T.reshape(x, (-1, tl, heads, dh))
        return T.transpose(x, (0, 2, 1, 3))

    # scaling q (not the scores) touches the smaller array
    qh, kh, vh = split(T.scale(q, 1.0 / math.sqrt(dh)), tq), split(k, tk), split(v, tk)
    scores = T.matmul(qh, T.transpose(kh, (0, 1, 3, 2)))
    att = T.softmax(scores, axis=-1)
    o = T.matmul(att, vh)
    o = T.transpose(o, (0, 2, 1, 3))
    return T.reshape(o, (-1, tq, d))


def _patchify(z, p):
    b, h, w, c = z.shape
    x = z.reshape(b, h // p, p, w // p, p, c)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(b, (h // p) * (w // p), p * p * c)


def _unpatchify(x, cfg: DenoiserConfig):
    p = cfg.patch_size
    gh, gw = cfg.height // p, cfg.width // p
    x = T.reshape(x, (-1, gh, gw, p, p, cfg.channels))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (-1, cfg.height, cfg.width, cfg.channels))


def _sinusoidal_time(t, dim):
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    angles = 1000.0 * np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


# ---------------------------------------------------------------------------
# checkpoints


def config_to_kv(cfg: DenoiserConfig):
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}


def config_from_kv(kv):
    kwargs = {}
    for f in fields(DenoiserConfig):
        if f.name not in kv:
            continue
        raw = kv[f.name]
        if f.type in ("int", int):
            kwargs[f.name] = int(raw)
        elif f.type in ("float", float):
            kwargs[f.name] = float(raw)
        else:
            kwargs[f.name] = raw
    return DenoiserConfig(**kwargs)


def save_checkpoint(path, cfg: DenoiserConfig, params, ema_params=None):
    data = {k: v.data if isinstance(v, Tensor) else v for k, v in params.items()}
    ema = None
    if ema_params is not None:
        ema = {k: v.data if isinstance(v, Tensor) else v for k, v in ema_params.items()}
    fileio.write_checkpoint(path, fileio.kv_text(config_to_kv(cfg)), data, ema)


def load_checkpoint(path):
    """Returns (cfg, params, ema_params); param arrays are float32."""
    text, raw, ema = fileio.read_checkpoint(path)
    kv = {}
    for line in text.splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            kv[k.strip()] = v.strip()
    cfg = config_from_kv(kv)
    params = {k: Tensor(v, requires_grad=True) for k, v in raw.items()}
    return cfg, params, ema
