"""Segmented transformer encoder with hand-written backward passes.

Parameters live in a flat ``dict[str, ndarray]`` (float64). Backbone names
start with ``embed.``, ``layers.`` or ``final_ln.``; task heads are stored
under ``head.<name>.``. Activations are batched as ``(B, L, ...)``.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass
from typing import Dict

import numpy as np

from . import kernels as K

Params = Dict[str, np.ndarray]

STD_EPS = 1e-8
POS_BASE = 1e5

# head name -> (kind, output width resolver)
RECON_HEADS = ("randmask", "lastmask", "peakmask")
POOLED_HEADS = ("forecast", "scalar", "week", "onset")


class NumericError(FloatingPointError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    P: int = 4
    S: int = 1
    D: int = 64
    n_layers: int = 6
    n_heads: int = 8
    ffn_width: int | None = None
    seed: int = 0
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.P < 1:
            raise ConfigError("P must be >= 1")
        if not 1 <= self.S <= self.P:
            raise ConfigError("S must satisfy 1 <= S <= P")
        if self.D < 2 or self.D % 2:
            raise ConfigError("D must be even and >= 2")
        if self.n_heads < 1 or self.D % self.n_heads:
            raise ConfigError(f"D={self.D} not divisible by n_heads={self.n_heads}")
        if self.n_layers < 0:
            raise ConfigError("n_layers must be >= 0")

    @property
    def ffn(self) -> int:
        return self.ffn_width or 4 * self.D

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# tokenization and normalization


@dataclass
class SegmentSequence:
    segments: np.ndarray  # (L, P)
    segment_months: np.ndarray | None = None  # (L, P)

    @property
    def L(self) -> int:
        return self.segments.shape[0]


def segment_count(T: int, P: int, S: int) -> int:
    if T < P:
        raise ValueError("series shorter than segment length")
    return (T - P) // S + 1


def segment_indices(T: int, P: int, S: int) -> np.ndarray:
    """``(L, P)`` integer index matrix; row l holds positions l*S .. l*S+P-1."""
    L = segment_count(T, P, S)
    return np.arange(L)[:, None] * S + np.arange(P)[None, :]


def segment(series, P: int, S: int, month_stamps=None) -> SegmentSequence:
    x = np.asarray(series, dtype=np.float64)
    idx = segment_indices(x.shape[-1], P, S)
    months = None if month_stamps is None else np.asarray(month_stamps)[..., idx]
    return SegmentSequence(x[..., idx], months)


def positional_encoding(l, D: int) -> np.ndarray:
    """Sinusoid indexed by embedding dimension, base 1e5.

    ``l`` may be a scalar or an array of positions; the result has a trailing
    axis of size ``D``.
    """
    if D % 2:
        raise ValueError("D must be even")
    pos = np.asarray(l, dtype=np.float64)[..., None]
    d = np.arange(D)
    even = d - (d % 2)
    angle = pos / np.power(POS_BASE, even / D)
    return np.where(d % 2 == 0, np.sin(angle), np.cos(angle))


_POS_CACHE: dict[tuple[int, int], np.ndarray] = {}


def position_table(L: int, D: int) -> np.ndarray:
    key = (L, D)
    if key not in _POS_CACHE:
        _POS_CACHE[key] = positional_encoding(np.arange(1, L + 1), D)
    return _POS_CACHE[key]


@dataclass
class InstanceStats:
    mean: np.ndarray | float
    std: np.ndarray | float


def instance_normalize(series, eps: float = STD_EPS):
    """Standardize along the last axis; returns ``(normalized, InstanceStats)``."""
    x = np.asarray(series, dtype=np.float64)
    if x.shape[-1] == 0:
        raise ValueError("series must be non-empty")
    mean = x.mean(axis=-1, keepdims=True)
    std = x.std(axis=-1, keepdims=True)
    return (x - mean) / np.maximum(std, eps), InstanceStats(mean, std)


def instance_denormalize(output, stats: InstanceStats, eps: float = STD_EPS):
    return np.asarray(output) * np.maximum(stats.std, eps) + stats.mean


# ---------------------------------------------------------------------------
# parameters


def _uniform(rng, fan_in, shape):
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg: ModelConfig) -> Params:
    rng = np.random.default_rng(cfg.seed)
    D, F = cfg.D, cfg.ffn
    p: Params = {"embed.w": _uniform(rng, cfg.P, (cfg.P, D))}
    for i in range(cfg.n_layers):
        pre = f"layers.{i}."
        p[pre + "ln1.g"] = np.ones(D)
        p[pre + "ln1.b"] = np.zeros(D)
        p[pre + "attn.wqkv"] = _uniform(rng, D, (D, 3 * D))
        p[pre + "attn.bqkv"] = np.zeros(3 * D)
        p[pre + "attn.wo"] = _uniform(rng, D, (D, D))
        p[pre + "attn.bo"] = np.zeros(D)
        p[pre + "ln2.g"] = np.ones(D)
        p[pre + "ln2.b"] = np.zeros(D)
        p[pre + "ffn.w1"] = _uniform(rng, D, (D, F))
        p[pre + "ffn.b1"] = np.zeros(F)
        p[pre + "ffn.w2"] = _uniform(rng, F, (F, D))
        p[pre + "ffn.b2"] = np.zeros(D)
    p["final_ln.g"] = np.ones(D)
    p["final_ln.b"] = np.zeros(D)
    return p


def head_output_width(name: str, cfg: ModelConfig, width: int | None = None) -> int:
    if name in RECON_HEADS:
        return cfg.P
    if name == "season":
        return 4
    if name == "scalar":
        return 1
    if name in POOLED_HEADS:
        if width is None:
            raise ConfigError(f"head {name!r} needs an output width")
        return width
    raise ConfigError(f"unknown head {name!r}")


def add_head(params: Params, cfg: ModelConfig, name: str, width: int | None = None) -> Params:
    """Attach (or re-initialize) a task head in place and return ``params``."""
    out = head_output_width(name, cfg, width)
    rng = np.random.default_rng([cfg.seed, zlib.crc32(name.encode())])
    for k in [k for k in params if k.startswith(f"head.{name}.")]:
        del params[k]
    pre = f"head.{name}."
    if name in RECON_HEADS:
        params[pre + "w1"] = _uniform(rng, cfg.D, (cfg.D, cfg.ffn))
        params[pre + "b1"] = np.zeros(cfg.ffn)
        params[pre + "w2"] = _uniform(rng, cfg.ffn, (cfg.ffn, out))
        params[pre + "b2"] = np.zeros(out)
    else:
        params[pre + "w"] = _uniform(rng, cfg.D, (cfg.D, out))
        params[pre + "b"] = np.zeros(out)
    return params


def is_backbone(name: str) -> bool:
    return not name.startswith("head.")


def head_names(params: Params, head: str) -> list[str]:
    return [k for k in params if k.startswith(f"head.{head}.")]


def copy_params(params: Params) -> Params:
    return {k: v.copy() for k, v in params.items()}


def n_layers_of(params: Params) -> int:
    return len({k.split(".")[1] for k in params if k.startswith("layers.")})


# ---------------------------------------------------------------------------
# encoder


def embed_segments(x, params: Params) -> np.ndarray:
    """``x @ W1 + pos`` for segments shaped ``(..., L, P)``."""
    x = np.asarray(x, dtype=np.float64)
    w = params["embed.w"]
    if x.shape[-1] != w.shape[0]:
        raise ConfigError(f"segment length {x.shape[-1]} does not match embedding rows {w.shape[0]}")
    return x @ w + position_table(x.shape[-2], w.shape[1])


def _check(arr, where):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {where}")


def encode(params: Params, cfg: ModelConfig, x):
    """Run the encoder on segments ``(B, L, P)``; returns ``(z, cache)``."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    B, L, _ = x.shape
    D, H = cfg.D, cfg.n_heads
    dh = D // H
    scale = 1.0 / np.sqrt(dh)
    eps = cfg.ln_eps
    u = embed_segments(x, params).reshape(B * L, D)
    layers = []
    for i in range(n_layers_of(params)):
        pre = f"layers.{i}."
        h1, xh1, rs1 = K.layernorm_forward(u, params[pre + "ln1.g"], params[pre + "ln1.b"], eps)
        qkv = h1 @ params[pre + "attn.wqkv"] + params[pre + "attn.bqkv"]
        qkv = qkv.reshape(B, L, 3, H, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = (np.ascontiguousarray(t) for t in qkv)
        o, probs = K.attention_forward(q, k, v, scale)
        o2 = np.ascontiguousarray(o.transpose(0, 2, 1, 3)).reshape(B * L, D)
        u = u + o2 @ params[pre + "attn.wo"] + params[pre + "attn.bo"]
        h2, xh2, rs2 = K.layernorm_forward(u, params[pre + "ln2.g"], params[pre + "ln2.b"], eps)
        f1 = h2 @ params[pre + "ffn.w1"] + params[pre + "ffn.b1"]
        g1 = K.gelu_forward(f1)
        u = u + g1 @ params[pre + "ffn.w2"] + params[pre + "ffn.b2"]
        _check(u, f"encoder layer {i}")
        layers.append((h1, xh1, rs1, q, k, v, probs, o2, h2, xh2, rs2, f1, g1))
    z, xhf, rsf = K.layernorm_forward(u, params["final_ln.g"], params["final_ln.b"], eps)
    cache = {"x": x, "shape": (B, L), "layers": layers, "final": (xhf, rsf), "scale": scale}
    return z.reshape(B, L, D), cache


def attention_maps(cache) -> list[np.ndarray]:
    """Per-layer attention probabilities ``(B, H, L, L)``."""
    return [layer[6] for layer in cache["layers"]]


def encode_backward(params: Params, cfg: ModelConfig, dz, cache) -> Params:
    B, L = cache["shape"]
    D, H = cfg.D, cfg.n_heads
    dh = D // H
    grads: Params = {}
    xhf, rsf = cache["final"]
    du, grads["final_ln.g"], grads["final_ln.b"] = K.layernorm_backward(
        np.ascontiguousarray(dz.reshape(B * L, D)), xhf, rsf, params["final_ln.g"]
    )
    for i in reversed(range(len(cache["layers"]))):
        pre = f"layers.{i}."
        h1, xh1, rs1, q, k, v, probs, o2, h2, xh2, rs2, f1, g1 = cache["layers"][i]
        # feed-forward block
        grads[pre + "ffn.b2"] = du.sum(axis=0)
        grads[pre + "ffn.w2"] = g1.T @ du
        dg1 = du @ params[pre + "ffn.w2"].T
        df1 = K.gelu_backward(f1, dg1)
        grads[pre + "ffn.b1"] = df1.sum(axis=0)
        grads[pre + "ffn.w1"] = h2.T @ df1
        dh2 = np.ascontiguousarray(df1 @ params[pre + "ffn.w1"].T)
        dx, grads[pre + "ln2.g"], grads[pre + "ln2.b"] = K.layernorm_backward(dh2, xh2, rs2, params[pre + "ln2.g"])
        du = du + dx
        # attention block
        grads[pre + "attn.bo"] = du.sum(axis=0)
        grads[pre + "attn.wo"] = o2.T @ du
        do2 = du @ params[pre + "attn.wo"].T
        do = np.ascontiguousarray(do2.reshape(B, L, H, dh).transpose(0, 2, 1, 3))
        dq, dk, dv = K.attention_backward(do, q, k, v, probs, cache["scale"])
        dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(B * L, 3 * D)
        grads[pre + "attn.bqkv"] = dqkv.sum(axis=0)
        grads[pre + "attn.wqkv"] = h1.T @ dqkv
        dh1 = np.ascontiguousarray(dqkv @ params[pre + "attn.wqkv"].T)
        dx, grads[pre + "ln1.g"], grads[pre + "ln1.b"] = K.layernorm_backward(dh1, xh1, rs1, params[pre + "ln1.g"])
        du = du + dx
    x = cache["x"]
    grads["embed.w"] = x.reshape(B * L, -1).T @ du
    return grads


# ---------------------------------------------------------------------------
# heads


def head_forward(params: Params, name: str, z):
    """Apply head ``name`` to encoder output ``z`` ``(B, L, D)``; returns ``(out, cache)``.

    Reconstruction heads are a two-layer tokenwise network giving ``(B, L, P)``;
    the season head is a tokenwise linear map giving ``(B, L, 4)``; pooled
    heads average the tokens and apply one linear map, giving ``(B, width)``.
    """
    pre = f"head.{name}."
    if name in RECON_HEADS:
        a = z @ params[pre + "w1"] + params[pre + "b1"]
        g = K.gelu_forward(a)
        return g @ params[pre + "w2"] + params[pre + "b2"], (z, a, g)
    if name == "season":
        return z @ params[pre + "w"] + params[pre + "b"], (z,)
    zbar = z.mean(axis=1)
    return zbar @ params[pre + "w"] + params[pre + "b"], (zbar, z.shape[1])


def head_backward(params: Params, name: str, dout, cache):
    """Returns ``(dz, grads)`` for a head."""
    pre = f"head.{name}."
    if name in RECON_HEADS:
        z, a, g = cache
        D = z.shape[-1]
        grads = {
            pre + "b2": dout.reshape(-1, dout.shape[-1]).sum(axis=0),
            pre + "w2": g.reshape(-1, g.shape[-1]).T @ dout.reshape(-1, dout.shape[-1]),
        }
        da = K.gelu_backward(a, dout @ params[pre + "w2"].T)
        grads[pre + "b1"] = da.reshape(-1, da.shape[-1]).sum(axis=0)
        grads[pre + "w1"] = z.reshape(-1, D).T @ da.reshape(-1, da.shape[-1])
        return da @ params[pre + "w1"].T, grads
    if name == "season":
        (z,) = cache
        D = z.shape[-1]
        grads = {
            pre + "w": z.reshape(-1, D).T @ dout.reshape(-1, dout.shape[-1]),
            pre + "b": dout.reshape(-1, dout.shape[-1]).sum(axis=0),
        }
        return dout @ params[pre + "w"].T, grads
    zbar, L = cache
    grads = {pre + "w": zbar.T @ dout, pre + "b": dout.sum(axis=0)}
    dzbar = dout @ params[pre + "w"].T
    return np.repeat(dzbar[:, None, :] / L, L, axis=1), grads


# ---------------------------------------------------------------------------
# losses shared by pre-training and fine-tuning


def mse_loss(pred, target):
    """Mean squared error and its gradient w.r.t. ``pred``."""
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def cross_entropy_loss(logits, labels):
    """Mean cross-entropy over leading axes; ``labels`` are 0-based class ids."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    C = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise ValueError(f"label shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"labels out of range for {C} classes")
    flat = logits.reshape(-1, C)
    lab = labels.reshape(-1)
    m = flat.max(axis=1, keepdims=True)
    logp = flat - m - np.log(np.exp(flat - m).sum(axis=1, keepdims=True))
    n = flat.shape[0]
    loss = -float(logp[np.arange(n), lab].mean())
    grad = np.exp(logp)
    grad[np.arange(n), lab] -= 1.0
    return loss, (grad / n).reshape(logits.shape)


def add_grads(acc: Params, new: Params) -> Params:
    for k, g in new.items():
        if k in acc:
            acc[k] = acc[k] + g
        else:
            acc[k] = g
    return acc
