"""Small frozen Transformer encoder with per-layer plugin insertion.

The encoder is a standard post-norm stack (attention, residual, norm, feed
forward, residual, norm); a plugin instance, when configured, transforms every
position's vector after each layer's final norm. Backbone weights are randomly
initialized and frozen; only plugin parameters and the classification head
train. The rest of this module is a manual reverse-mode pass through the stack
that produces gradients for exactly those trainable tensors.

Tokenization is hash-bucketed: lowercased word tokens map to ids via FNV-1a,
so identical text always yields identical ids with no vocabulary files.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from . import adapter as adapter_mod
from . import memory as memory_mod
from .numerics import (
    MacCounter,
    ParameterError,
    ShapeError,
    gelu_cached,
    gelu_grad_cached,
    layer_norm,
    layer_norm_backward,
    sample_gaussian,
)

BOS_ID = 0
PLUGIN_KINDS = ("none", "spartan", "adapter", "adapterx2")

_TOKEN_RE = re.compile(r"[a-z0-9']+")
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


@dataclass
class BackboneConfig:
    d: int = 128
    layers: int = 4
    heads: int = 4
    ffn_dim: int = 256
    vocab_hash_buckets: int = 4096
    max_seq_len: int = 64
    pooling: str = "first"

    def __post_init__(self):
        if self.layers < 1:
            raise ParameterError(f"layers must be >= 1, got {self.layers}")
        if self.d % self.heads != 0:
            raise ParameterError(f"d={self.d} not divisible by heads={self.heads}")
        if self.pooling == "first-token":
            self.pooling = "first"
        if self.pooling not in ("first", "mean"):
            raise ParameterError(
                f"pooling must be 'first' ('first-token') or 'mean', got {self.pooling!r}")
        if self.vocab_hash_buckets < 2:
            raise ParameterError("vocab_hash_buckets must be >= 2")


@dataclass
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    bq: np.ndarray
    bk: np.ndarray
    bv: np.ndarray
    bo: np.ndarray
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray


@dataclass
class BackboneParams:
    token_emb: np.ndarray       # (buckets, d)
    pos_emb: np.ndarray         # (max_seq_len, d)
    layers: list[LayerWeights]
    head_weight: np.ndarray     # (num_labels, d)
    head_bias: np.ndarray       # (num_labels,)

    @property
    def num_labels(self) -> int:
        return self.head_weight.shape[0]


@dataclass
class PluginSpec:
    """One plugin instance per encoder layer, inserted after the layer's final norm."""

    kind: str = "none"
    layers: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in PLUGIN_KINDS:
            raise ParameterError(f"plugin kind {self.kind!r} not one of {PLUGIN_KINDS}")


@dataclass
class Model:
    cfg: BackboneConfig
    params: BackboneParams
    plugin: PluginSpec


def _fnv1a(token: str) -> int:
    h = _FNV_OFFSET
    for byte in token.encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def tokenize(text: str, cfg: BackboneConfig) -> np.ndarray:
    """Deterministic hash-bucketed ids, BOS-prefixed, truncated to max_seq_len.

    Id 0 is reserved for the BOS marker; word tokens land in [1, buckets).
    """
    words = _TOKEN_RE.findall(text.lower())
    ids = [BOS_ID] + [1 + _fnv1a(w) % (cfg.vocab_hash_buckets - 1) for w in words]
    return np.asarray(ids[: cfg.max_seq_len], dtype=np.int64)


def init_backbone(cfg: BackboneConfig, num_labels: int, rng: np.random.Generator) -> BackboneParams:
    """Random frozen weights; the head starts at zero so initial logits are uniform."""
    if num_labels < 2:
        raise ParameterError(f"num_labels must be >= 2, got {num_labels}")
    d, f = cfg.d, cfg.ffn_dim
    sd = 1.0 / np.sqrt(d)

    def mat(rows, cols, std):
        return sample_gaussian(rng, rows * cols, std).reshape(rows, cols)

    token_emb = mat(cfg.vocab_hash_buckets, d, 1.0)
    pos_emb = mat(cfg.max_seq_len, d, 1.0)
    layers = []
    for _ in range(cfg.layers):
        layers.append(LayerWeights(
            wq=mat(d, d, sd), wk=mat(d, d, sd), wv=mat(d, d, sd), wo=mat(d, d, sd),
            bq=np.zeros(d), bk=np.zeros(d), bv=np.zeros(d), bo=np.zeros(d),
            ln1_gain=np.ones(d), ln1_bias=np.zeros(d),
            w1=mat(f, d, sd), b1=np.zeros(f),
            w2=mat(d, f, 1.0 / np.sqrt(f)), b2=np.zeros(d),
            ln2_gain=np.ones(d), ln2_bias=np.zeros(d),
        ))
    return BackboneParams(
        token_emb=token_emb,
        pos_emb=pos_emb,
        layers=layers,
        head_weight=np.zeros((num_labels, d)),
        head_bias=np.zeros(num_labels),
    )


def make_plugin(kind: str, cfg: BackboneConfig, rng: np.random.Generator,
                spartan_cfg: memory_mod.SpartanConfig | None = None,
                adapter_cfg: adapter_mod.AdapterConfig | None = None) -> PluginSpec:
    """Fresh per-layer plugin parameters for the given kind."""
    if kind == "none":
        return PluginSpec("none", [None] * cfg.layers)
    if kind == "spartan":
        scfg = spartan_cfg or memory_mod.SpartanConfig(d=cfg.d)
        if scfg.d != cfg.d:
            raise ParameterError(f"plugin d={scfg.d} does not match backbone d={cfg.d}")
        return PluginSpec("spartan", [memory_mod.init_params(scfg, rng) for _ in range(cfg.layers)])
    acfg = adapter_cfg or adapter_mod.AdapterConfig(d=cfg.d)
    if acfg.d != cfg.d:
        raise ParameterError(f"plugin d={acfg.d} does not match backbone d={cfg.d}")
    if kind == "adapter":
        return PluginSpec("adapter", [adapter_mod.init_adapter(acfg, rng) for _ in range(cfg.layers)])
    if kind == "adapterx2":
        return PluginSpec("adapterx2", [
            (adapter_mod.init_adapter(acfg, rng), adapter_mod.init_adapter(acfg, rng))
            for _ in range(cfg.layers)
        ])
    raise ParameterError(f"unknown plugin kind {kind!r}")


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    b, s, d = x.shape
    return x.reshape(b, s, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, s, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, s, h * dh)


def _attention_forward(lw: LayerWeights, h: np.ndarray, heads: int):
    q = _split_heads(h @ lw.wq.T + lw.bq, heads)
    k = _split_heads(h @ lw.wk.T + lw.bk, heads)
    v = _split_heads(h @ lw.wv.T + lw.bv, heads)
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = (q @ k.transpose(0, 1, 3, 2)) * scale
    scores -= scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    ctx = _merge_heads(scores @ v)
    return ctx @ lw.wo.T + lw.bo, (q, k, v, scores, scale)


def _attention_backward(lw: LayerWeights, cache, d_out: np.ndarray) -> np.ndarray:
    q, k, v, attn, scale = cache
    heads = q.shape[1]
    d_ctx = _split_heads(d_out @ lw.wo, heads)
    d_attn = d_ctx @ v.transpose(0, 1, 3, 2)
    d_v = attn.transpose(0, 1, 3, 2) @ d_ctx
    d_scores = attn * (d_attn - (d_attn * attn).sum(axis=-1, keepdims=True))
    d_q = (d_scores @ k) * scale
    d_k = (d_scores.transpose(0, 1, 3, 2) @ q) * scale
    return (_merge_heads(d_q) @ lw.wq
            + _merge_heads(d_k) @ lw.wk
            + _merge_heads(d_v) @ lw.wv)


def _ffn_forward(lw: LayerWeights, h: np.ndarray):
    u = h @ lw.w1.T + lw.b1
    act, cdf = gelu_cached(u)
    return act @ lw.w2.T + lw.b2, (u, cdf)


def _ffn_backward(lw: LayerWeights, cache, d_out: np.ndarray) -> np.ndarray:
    u, cdf = cache
    return (d_out @ lw.w2 * gelu_grad_cached(u, cdf)) @ lw.w1


def _plugin_forward(plugin: PluginSpec, layer: int, x_flat: np.ndarray,
                    counter: MacCounter | None, collect: bool):
    if plugin.kind == "none":
        return x_flat, None
    if plugin.kind == "spartan":
        return memory_mod.forward_batch(plugin.layers[layer], x_flat, counter, collect)
    if plugin.kind == "adapter":
        return adapter_mod.adapter_forward(plugin.layers[layer], x_flat, counter, collect)
    a0, a1 = plugin.layers[layer]
    mid, t0 = adapter_mod.adapter_forward(a0, x_flat, counter, collect)
    out, t1 = adapter_mod.adapter_forward(a1, mid, counter, collect)
    return out, (t0, t1)


def _plugin_backward(plugin: PluginSpec, layer: int, trace, d_out: np.ndarray):
    """Returns (d_input, {local tensor name: gradient})."""
    if plugin.kind == "spartan":
        g = memory_mod.backward_batch(plugin.layers[layer], trace, d_out)
        return g.d_input, {"parents": g.parents, "child_keys": g.child_keys,
                           "child_values": g.child_values}
    if plugin.kind == "adapter":
        g = adapter_mod.adapter_backward(plugin.layers[layer], trace, d_out)
        return g.d_input, {"down": g.down, "down_bias": g.down_bias, "up": g.up,
                           "up_bias": g.up_bias, "norm_gain": g.norm_gain,
                           "norm_bias": g.norm_bias}
    a0, a1 = plugin.layers[layer]
    t0, t1 = trace
    g1 = adapter_mod.adapter_backward(a1, t1, d_out)
    g0 = adapter_mod.adapter_backward(a0, t0, g1.d_input)
    grads = {}
    for tag, g in (("a0", g0), ("a1", g1)):
        grads.update({f"{tag}.down": g.down, f"{tag}.down_bias": g.down_bias,
                      f"{tag}.up": g.up, f"{tag}.up_bias": g.up_bias,
                      f"{tag}.norm_gain": g.norm_gain, f"{tag}.norm_bias": g.norm_bias})
    return g0.d_input, grads


def encode(model: Model, ids: np.ndarray, counter: MacCounter | None = None,
           collect: bool = False, capture_routing: bool = False):
    """Run the stack over a batch of equal-length id sequences.

    ids is (B, S). Returns (hidden (B, S, d), bundle, routing) where bundle
    carries per-layer caches when collect=True and routing, when requested,
    holds each layer's parent probabilities at the first position of every
    sequence (spartan plugin only).
    """
    cfg = model.cfg
    ids = np.atleast_2d(np.asarray(ids))
    b, s = ids.shape
    if s > cfg.max_seq_len:
        raise ShapeError(f"sequence length {s} exceeds max_seq_len {cfg.max_seq_len}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_hash_buckets:
        raise ShapeError("token ids out of vocabulary range")
    if capture_routing and model.plugin.kind != "spartan":
        raise ParameterError("routing capture requires the spartan plugin")

    h = model.params.token_emb[ids] + model.params.pos_emb[:s]
    layer_caches = []
    routing = [] if capture_routing else None
    collect_plugin = collect or capture_routing
    for l, lw in enumerate(model.params.layers):
        a, attn_cache = _attention_forward(lw, h, cfg.heads)
        h1, ln1_cache = layer_norm(h + a, lw.ln1_gain, lw.ln1_bias)
        f, ffn_cache = _ffn_forward(lw, h1)
        h2, ln2_cache = layer_norm(h1 + f, lw.ln2_gain, lw.ln2_bias)
        out_flat, ptrace = _plugin_forward(model.plugin, l, h2.reshape(b * s, cfg.d),
                                           counter, collect_plugin)
        h = out_flat.reshape(b, s, cfg.d)
        if capture_routing:
            routing.append(ptrace.parent_probs[np.arange(b) * s])
        if collect:
            layer_caches.append((attn_cache, ln1_cache, ffn_cache, ln2_cache, ptrace))
    bundle = layer_caches if collect else None
    return h, bundle, routing


def pool(cfg: BackboneConfig, hidden: np.ndarray) -> np.ndarray:
    if cfg.pooling == "first":
        return hidden[:, 0, :]
    return hidden.mean(axis=1)


def classify(params: BackboneParams, pooled: np.ndarray) -> np.ndarray:
    """Affine task head over pooled vectors; (B, d) -> (B, num_labels)."""
    pooled = np.atleast_2d(pooled)
    if pooled.shape[-1] != params.head_weight.shape[1]:
        raise ShapeError(
            f"pooled dim {pooled.shape[-1]} != head dim {params.head_weight.shape[1]}")
    return pooled @ params.head_weight.T + params.head_bias


def classify_forward(model: Model, ids: np.ndarray, counter: MacCounter | None = None,
                     collect: bool = False):
    hidden, bundle, _ = encode(model, ids, counter=counter, collect=collect)
    pooled = pool(model.cfg, hidden)
    logits = classify(model.params, pooled)
    return logits, (bundle, pooled, hidden.shape)


def classify_backward(model: Model, fw_state, d_logits: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients for the trainable tensors only: head plus plugin parameters.

    The frozen backbone contributes activation gradients but none of its
    weights receive one; the walk stops once the lowest plugin has been
    differentiated.
    """
    bundle, pooled, (b, s, d) = fw_state
    if bundle is None:
        raise ParameterError("classify_backward needs a forward pass run with collect=True")
    grads: dict[str, np.ndarray] = {
        "head.weight": d_logits.T @ pooled,
        "head.bias": d_logits.sum(axis=0),
    }
    if model.plugin.kind == "none":
        return grads

    d_pooled = d_logits @ model.params.head_weight
    if model.cfg.pooling == "first":
        d_h = np.zeros((b, s, d), dtype=d_pooled.dtype)
        d_h[:, 0, :] = d_pooled
    else:
        d_h = np.broadcast_to(d_pooled[:, None, :] / s, (b, s, d)).copy()

    for l in range(model.cfg.layers - 1, -1, -1):
        attn_cache, ln1_cache, ffn_cache, ln2_cache, ptrace = bundle[l]
        lw = model.params.layers[l]
        d_flat, pgrads = _plugin_backward(model.plugin, l, ptrace, d_h.reshape(b * s, d))
        for name, g in pgrads.items():
            grads[f"plugin.layer{l}.{name}"] = g
        if l == 0:
            break  # nothing trainable below the first layer's plugin
        d_r2 = layer_norm_backward(ln2_cache, lw.ln2_gain, d_flat.reshape(b, s, d))
        d_h1 = d_r2 + _ffn_backward(lw, ffn_cache, d_r2)
        d_r1 = layer_norm_backward(ln1_cache, lw.ln1_gain, d_h1)
        d_h = d_r1 + _attention_backward(lw, attn_cache, d_r1)
    return grads


def iter_named_tensors(model: Model):
    """Yields (name, array, trainable) over every tensor in the model.

    The order is fixed so checkpoints and optimizer state are reproducible.
    """
    p = model.params
    yield "backbone.token_emb", p.token_emb, False
    yield "backbone.pos_emb", p.pos_emb, False
    for l, lw in enumerate(p.layers):
        for fname in ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo",
                      "ln1_gain", "ln1_bias", "w1", "b1", "w2", "b2",
                      "ln2_gain", "ln2_bias"):
            yield f"backbone.layer{l}.{fname}", getattr(lw, fname), False
    yield "head.weight", p.head_weight, True
    yield "head.bias", p.head_bias, True
    plugin = model.plugin
    for l in range(model.cfg.layers):
        if plugin.kind == "spartan":
            sp = plugin.layers[l]
            yield f"plugin.layer{l}.parents", sp.parents, True
            yield f"plugin.layer{l}.child_keys", sp.child_keys, True
            yield f"plugin.layer{l}.child_values", sp.child_values, True
        elif plugin.kind == "adapter":
            ap = plugin.layers[l]
            for fname in ("down", "down_bias", "up", "up_bias", "norm_gain", "norm_bias"):
                yield f"plugin.layer{l}.{fname}", getattr(ap, fname), True
        elif plugin.kind == "adapterx2":
            for tag, ap in zip(("a0", "a1"), plugin.layers[l]):
                for fname in ("down", "down_bias", "up", "up_bias", "norm_gain", "norm_bias"):
                    yield f"plugin.layer{l}.{tag}.{fname}", getattr(ap, fname), True


def get_tensor(model: Model, name: str) -> np.ndarray:
    for n, arr, _ in iter_named_tensors(model):
        if n == name:
            return arr
    raise KeyError(name)


def set_tensor(model: Model, name: str, value: np.ndarray) -> None:
    """In-place overwrite, preserving shape; used by the optimizer and loader."""
    arr = get_tensor(model, name)
    if arr.shape != value.shape:
        raise ShapeError(f"tensor {name}: shape {value.shape} != {arr.shape}")
    arr[...] = value
