"""Clean-target transformer over per-frame motion features.

The network reads a feature window x (B, T, D), a scalar time tau per
sample, prompt token ids, and a flat skeleton descriptor S, and predicts the
clean feature window. Internally each frame is split into J joint tokens of
width hidden_dim/J; every block runs

  joint self-attention   (within a frame, rotary-coded joint index)
  joint text cross-attn  (joint tokens query the prompt)
  frame self-attention   (across time, rotary-coded frame index)
  frame text cross-attn  (whole frames query the prompt)
  SwiGLU feed-forward

each wrapped in adaptive layer-norm modulation: the condition c(tau, S)
produces per-block (shift, scale, gate), the gate multiplies the residual
branch, and both the modulation heads and the output head start at zero, so
a freshly initialized model is exactly the zero map and every block starts
as the identity.

Prompt padding ids are embedded and attended like any token: the all-pad
prompt is the learned null condition, so no attention masks exist anywhere.
Dropout (attention probabilities and FFN hidden) runs only when train=True
with an explicit rng.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = ["ModelConfig", "init_parameters", "model_forward", "build_condition",
           "text_embeddings", "attention", "parameter_count"]


@dataclass(frozen=True)
class ModelConfig:
    joints: int
    feat_dim: int
    hidden_dim: int = 128
    n_layers: int = 4
    frame_heads: int = 4
    joint_heads: int = 1
    ff_ratio: int = 3
    dropout: float = 0.1
    vocab_size: int = 17
    text_dim: int = 32
    prompt_len: int = 16

    @property
    def token_dim(self) -> int:
        return self.hidden_dim // self.joints

    @property
    def skel_dim(self) -> int:
        return 12 * self.joints

    def __post_init__(self):
        if self.hidden_dim % self.joints != 0:
            raise ValueError("hidden_dim must divide evenly into joint tokens")
        d = self.hidden_dim // self.joints
        if d % self.joint_heads != 0 or (d // self.joint_heads) % 2 != 0:
            raise ValueError("joint head dim must be a positive even integer")
        if self.hidden_dim % self.frame_heads != 0 or (self.hidden_dim // self.frame_heads) % 2 != 0:
            raise ValueError("frame head dim must be a positive even integer")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if min(self.feat_dim, self.n_layers, self.vocab_size, self.text_dim,
               self.prompt_len) < 1:
            raise ValueError("all dimensions must be positive")


# -- parameters ----------------------------------------------------------------------

def _w(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in)


def init_parameters(cfg: ModelConfig, rng: np.random.Generator,
                    zero_init: bool = True) -> Dict[str, Tensor]:
    """Fresh parameter dict. zero_init zeroes the modulation and output
    heads (the production initialization); disable it for gradient checks,
    where a zero output would hide broken backward paths upstream."""
    d = cfg.token_dim
    D = cfg.hidden_dim
    out: Dict[str, np.ndarray] = {}

    def head(fan_in: int, fan_out: int) -> np.ndarray:
        return np.zeros((fan_in, fan_out)) if zero_init else _w(rng, fan_in, fan_out)

    out["in.W"] = _w(rng, cfg.feat_dim, D)
    out["in.b"] = np.zeros(D)
    out["text.embed"] = rng.standard_normal((cfg.vocab_size, cfg.text_dim)) / math.sqrt(cfg.text_dim)
    out["text.frm.W"] = _w(rng, cfg.text_dim, D)
    out["text.frm.b"] = np.zeros(D)
    out["text.jnt.W"] = _w(rng, cfg.text_dim, d)
    out["text.jnt.b"] = np.zeros(d)
    out["tmlp.W1"] = _w(rng, D, D)
    out["tmlp.b1"] = np.zeros(D)
    out["tmlp.W2"] = _w(rng, D, D)
    out["tmlp.b2"] = np.zeros(D)
    out["smlp.W1"] = _w(rng, cfg.skel_dim, D)
    out["smlp.b1"] = np.zeros(D)
    out["smlp.W2"] = _w(rng, D, D)
    out["smlp.b2"] = np.zeros(D)
    out["cond.W"] = _w(rng, D, D)
    out["cond.b"] = np.zeros(D)

    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        for name, width in (("jattn", d), ("jxattn", d), ("fattn", D), ("fxattn", D)):
            for proj in ("Wq", "Wk", "Wv", "Wo"):
                out[f"{p}{name}.{proj}"] = _w(rng, width, width)
        out[f"{p}ffn.W1"] = _w(rng, D, cfg.ff_ratio * D)
        out[f"{p}ffn.Wg"] = _w(rng, D, cfg.ff_ratio * D)
        out[f"{p}ffn.W2"] = _w(rng, cfg.ff_ratio * D, D)
        for name, width in (("jattn", d), ("jx", d), ("fattn", D), ("fx", D), ("ffn", D)):
            out[f"{p}mod.{name}.W"] = head(D, 3 * width)
            out[f"{p}mod.{name}.b"] = np.zeros(3 * width)

    out["out.W"] = head(D, cfg.feat_dim)
    out["out.b"] = np.zeros(cfg.feat_dim)
    return {k: ad.parameter(v, name=k) for k, v in out.items()}


def parameter_count(params: Dict[str, Tensor]) -> int:
    return sum(int(np.prod(p.shape)) for p in params.values())


# -- building blocks -------------------------------------------------------------------

def _dropout(x: Tensor, p: float, train: bool, rng: Optional[np.random.Generator]) -> Tensor:
    if not train or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return ad.mul(x, ad.constant(mask))


def attention(x: Tensor, Wq: Tensor, Wk: Tensor, Wv: Tensor, Wo: Tensor, heads: int,
              rope: Optional[Tuple[np.ndarray, np.ndarray]] = None,
              kv: Optional[Tensor] = None, dropout: float = 0.0,
              train: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Multi-head attention over x (B*, n, D). Self-attention when kv is
    None, cross-attention against kv (B*, L, D) otherwise; rope tables apply
    to q and k in self-attention only."""
    src = x if kv is None else kv
    q = ad.matmul(x, Wq)
    k = ad.matmul(src, Wk)
    v = ad.matmul(src, Wv)
    B, n, D = q.shape
    L = k.shape[1]
    dh = D // heads
    q = ad.transpose(ad.reshape(q, (B, n, heads, dh)), 1, 2)
    k = ad.transpose(ad.reshape(k, (B, L, heads, dh)), 1, 2)
    v = ad.transpose(ad.reshape(v, (B, L, heads, dh)), 1, 2)
    if rope is not None:
        cos, sin = rope
        q = ad.rope_rotate(q, cos, sin)
        k = ad.rope_rotate(k, cos, sin)
    scores = ad.scale(ad.matmul(q, ad.transpose(k, -1, -2)), 1.0 / math.sqrt(dh))
    probs = _dropout(ad.softmax(scores), dropout, train, rng)
    ctx = ad.matmul(probs, v)                       # (B, h, n, dh)
    ctx = ad.reshape(ad.transpose(ctx, 1, 2), (B, n, D))
    return ad.matmul(ctx, Wo)


def _chunk3(m: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
    w = m.shape[-1] // 3
    return (ad.slice_axis(m, -1, 0, w),
            ad.slice_axis(m, -1, w, 2 * w),
            ad.slice_axis(m, -1, 2 * w, 3 * w))


def _spread(v: Tensor, like_shape: Tuple[int, ...]) -> Tensor:
    """(B, w) -> broadcast over the middle axes of (B, ..., w)."""
    shp = (like_shape[0],) + (1,) * (len(like_shape) - 2) + (like_shape[-1],)
    return ad.broadcast_to(ad.reshape(v, shp), like_shape)


def _modulated(x: Tensor, shift_v: Tensor, scale_v: Tensor) -> Tensor:
    ln = ad.layer_norm(x)
    return ad.add(ad.mul(ln, ad.shift(_spread(scale_v, x.shape), 1.0)),
                  _spread(shift_v, x.shape))


def _gated_residual(x: Tensor, y: Tensor, gate_v: Tensor) -> Tensor:
    return ad.add(x, ad.mul(y, _spread(gate_v, x.shape)))


def _ffn(x: Tensor, W1: Tensor, Wg: Tensor, W2: Tensor, dropout: float,
         train: bool, rng: Optional[np.random.Generator]) -> Tensor:
    hidden = ad.mul(ad.silu(ad.matmul(x, W1)), ad.matmul(x, Wg))
    return ad.matmul(_dropout(hidden, dropout, train, rng), W2)


def build_condition(params: Dict[str, Tensor], tau: np.ndarray, skel: np.ndarray,
                    cfg: ModelConfig) -> Tensor:
    """c(tau, S): sinusoidal tau features and the skeleton descriptor pass
    through their own two-layer MLPs, fuse additively, and project. (B, D)."""
    tau = np.atleast_1d(np.asarray(tau, dtype=np.float64))
    emb = ad.constant(ad.sinusoidal_embedding(tau, cfg.hidden_dim))
    s_in = ad.constant(np.asarray(skel, dtype=np.float64))
    t = ad.silu(ad.add_bias(ad.matmul(emb, params["tmlp.W1"]), params["tmlp.b1"]))
    t = ad.add_bias(ad.matmul(t, params["tmlp.W2"]), params["tmlp.b2"])
    s = ad.silu(ad.add_bias(ad.matmul(s_in, params["smlp.W1"]), params["smlp.b1"]))
    s = ad.add_bias(ad.matmul(s, params["smlp.W2"]), params["smlp.b2"])
    fused = ad.silu(ad.add(t, s))
    return ad.add_bias(ad.matmul(fused, params["cond.W"]), params["cond.b"])


def text_embeddings(params: Dict[str, Tensor], tokens: np.ndarray,
                    cfg: ModelConfig) -> Tuple[Tensor, Tensor]:
    """Prompt ids -> (frame-level (B, L, D), joint-level (B, L, d)) keys."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2 or tokens.shape[1] != cfg.prompt_len:
        raise ValueError(f"tokens must be (B, {cfg.prompt_len}), got {tokens.shape}")
    e = ad.gather_rows(params["text.embed"], tokens)
    frm = ad.add_bias(ad.matmul(e, params["text.frm.W"]), params["text.frm.b"])
    jnt = ad.add_bias(ad.matmul(e, params["text.jnt.W"]), params["text.jnt.b"])
    return frm, jnt


def _layer(h: Tensor, c: Tensor, e_frm: Tensor, e_jnt: Tensor,
           params: Dict[str, Tensor], i: int, cfg: ModelConfig,
           ropes: Dict[str, Tuple[np.ndarray, np.ndarray]],
           train: bool, rng: Optional[np.random.Generator]) -> Tensor:
    p = f"layers.{i}."
    B, T, J, d = h.shape
    D = cfg.hidden_dim

    def mods(name: str) -> Tuple[Tensor, Tensor, Tensor]:
        m = ad.add_bias(ad.matmul(c, params[f"{p}mod.{name}.W"]), params[f"{p}mod.{name}.b"])
        return _chunk3(m)

    def attn(name: str, x: Tensor, **kw) -> Tensor:
        return attention(x, params[f"{p}{name}.Wq"], params[f"{p}{name}.Wk"],
                         params[f"{p}{name}.Wv"], params[f"{p}{name}.Wo"],
                         dropout=cfg.dropout, train=train, rng=rng, **kw)

    # joint self-attention: frames are independent batch elements
    sh, sc, g = mods("jattn")
    y = attn("jattn", ad.reshape(_modulated(h, sh, sc), (B * T, J, d)),
             heads=cfg.joint_heads, rope=ropes["joint"])
    h = _gated_residual(h, ad.reshape(y, (B, T, J, d)), g)

    # joint-level text cross-attention: every joint token queries the prompt
    sh, sc, g = mods("jx")
    y = attn("jxattn", ad.reshape(_modulated(h, sh, sc), (B, T * J, d)),
             heads=cfg.joint_heads, kv=e_jnt)
    h = _gated_residual(h, ad.reshape(y, (B, T, J, d)), g)

    # frame-token stream
    f = ad.reshape(h, (B, T, D))
    sh, sc, g = mods("fattn")
    y = attn("fattn", _modulated(f, sh, sc), heads=cfg.frame_heads, rope=ropes["frame"])
    f = _gated_residual(f, y, g)

    sh, sc, g = mods("fx")
    y = attn("fxattn", _modulated(f, sh, sc), heads=cfg.frame_heads, kv=e_frm)
    f = _gated_residual(f, y, g)

    sh, sc, g = mods("ffn")
    y = _ffn(_modulated(f, sh, sc), params[f"{p}ffn.W1"], params[f"{p}ffn.Wg"],
             params[f"{p}ffn.W2"], cfg.dropout, train, rng)
    f = _gated_residual(f, y, g)

    return ad.reshape(f, (B, T, J, d))


def model_forward(params: Dict[str, Tensor], x: np.ndarray, tau: np.ndarray,
                  tokens: np.ndarray, skel: np.ndarray, cfg: ModelConfig,
                  train: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Predict the clean feature window. x (B, T, D), tau (B,), tokens
    (B, L) ids, skel (B, 12J) normalized descriptors -> (B, T, D)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != cfg.feat_dim:
        raise ValueError(f"x must be (B, T, {cfg.feat_dim}), got {x.shape}")
    B, T, _ = x.shape
    J, d = cfg.joints, cfg.token_dim
    tau = np.asarray(tau, dtype=np.float64)
    if tau.ndim == 0:
        tau = np.full(B, float(tau))
    if tau.shape != (B,):
        raise ValueError(f"tau must be scalar or ({B},), got {tau.shape}")
    skel = np.asarray(skel, dtype=np.float64)
    if skel.ndim == 1:
        skel = np.repeat(skel[None, :], B, axis=0)
    if skel.shape != (B, cfg.skel_dim):
        raise ValueError(f"skel must be ({B}, {cfg.skel_dim}), got {skel.shape}")

    h = ad.add_bias(ad.matmul(ad.constant(x), params["in.W"]), params["in.b"])
    h = ad.reshape(h, (B, T, J, d))
    c = build_condition(params, tau, skel, cfg)
    e_frm, e_jnt = text_embeddings(params, tokens, cfg)
    ropes = {
        "joint": ad.rope_tables(np.arange(J), d // cfg.joint_heads),
        "frame": ad.rope_tables(np.arange(T), cfg.hidden_dim // cfg.frame_heads),
    }
    for i in range(cfg.n_layers):
        h = _layer(h, c, e_frm, e_jnt, params, i, cfg, ropes, train, rng)
    y = ad.reshape(ad.layer_norm(h), (B, T, cfg.hidden_dim))
    return ad.add_bias(ad.matmul(y, params["out.W"]), params["out.b"])
