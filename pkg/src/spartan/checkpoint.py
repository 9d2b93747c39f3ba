"""JSON checkpoint format: config echo, label manifest, and every named tensor.

Scalars are serialized through Python's shortest-exact float repr, so a
save/load round trip reproduces float64 tensors bit for bit. Desk-scale models
keep the files small enough that human-inspectable text storage is worth it.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import adapter as adapter_mod
from . import memory as memory_mod
from .backbone import BackboneConfig, BackboneParams, LayerWeights, Model, PluginSpec, iter_named_tensors
from .data import DataError

FORMAT_VERSION = 1


def plugin_config_dict(model: Model) -> dict:
    spec = model.plugin
    if spec.kind == "none":
        return {"kind": "none"}
    if spec.kind == "spartan":
        return {"kind": "spartan", **asdict(spec.layers[0].cfg)}
    entry = spec.layers[0]
    acfg = (entry[0] if isinstance(entry, tuple) else entry).cfg
    return {"kind": spec.kind, **asdict(acfg)}


def save_checkpoint(path, model: Model, seed: int, label_manifest: dict | None = None,
                    extra_config: dict | None = None) -> None:
    tensors = {}
    for name, arr, trainable in iter_named_tensors(model):
        tensors[name] = {
            "shape": list(arr.shape),
            "dtype": str(arr.dtype),
            "trainable": trainable,
            "values": [float(v) for v in arr.ravel()],
        }
    payload = {
        "format_version": FORMAT_VERSION,
        "seed": seed,
        "label_manifest": label_manifest or {},
        "config": {
            "backbone": asdict(model.cfg),
            "plugin": plugin_config_dict(model),
            "num_labels": model.params.num_labels,
            **(extra_config or {}),
        },
        "tensors": tensors,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def _empty_model(backbone_cfg: BackboneConfig, num_labels: int, plugin_cfg: dict) -> Model:
    d, f = backbone_cfg.d, backbone_cfg.ffn_dim
    zeros = np.zeros
    layers = [
        LayerWeights(
            wq=zeros((d, d)), wk=zeros((d, d)), wv=zeros((d, d)), wo=zeros((d, d)),
            bq=zeros(d), bk=zeros(d), bv=zeros(d), bo=zeros(d),
            ln1_gain=zeros(d), ln1_bias=zeros(d),
            w1=zeros((f, d)), b1=zeros(f), w2=zeros((d, f)), b2=zeros(d),
            ln2_gain=zeros(d), ln2_bias=zeros(d),
        )
        for _ in range(backbone_cfg.layers)
    ]
    params = BackboneParams(
        token_emb=zeros((backbone_cfg.vocab_hash_buckets, d)),
        pos_emb=zeros((backbone_cfg.max_seq_len, d)),
        layers=layers,
        head_weight=zeros((num_labels, d)),
        head_bias=zeros(num_labels),
    )
    kind = plugin_cfg["kind"]
    if kind == "none":
        spec = PluginSpec("none", [None] * backbone_cfg.layers)
    elif kind == "spartan":
        scfg = memory_mod.SpartanConfig(
            d=plugin_cfg["d"], num_parents=plugin_cfg["num_parents"],
            children_per_parent=plugin_cfg["children_per_parent"], top_k=plugin_cfg["top_k"])
        n, c = scfg.num_parents, scfg.children_per_parent
        spec = PluginSpec("spartan", [
            memory_mod.SpartanLayerParams(scfg, zeros((n, scfg.d)), zeros((n, c, scfg.d)),
                                          zeros((n, c, scfg.d)))
            for _ in range(backbone_cfg.layers)
        ])
    else:
        acfg = adapter_mod.AdapterConfig(d=plugin_cfg["d"], bottleneck=plugin_cfg["bottleneck"])
        b = acfg.bottleneck

        def blank():
            return adapter_mod.AdapterParams(acfg, zeros((b, d)), zeros(b), zeros((d, b)),
                                             zeros(d), zeros(d), zeros(d))

        entries = [(blank(), blank()) if kind == "adapterx2" else blank()
                   for _ in range(backbone_cfg.layers)]
        spec = PluginSpec(kind, entries)
    return Model(backbone_cfg, params, spec)


def load_checkpoint(path):
    """Rebuilds the model; returns (model, metadata dict with seed/config/labels)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint format version {payload.get('format_version')}")

    cfg = BackboneConfig(**payload["config"]["backbone"])
    model = _empty_model(cfg, payload["config"]["num_labels"], payload["config"]["plugin"])
    stored = payload["tensors"]
    for name, arr, _ in iter_named_tensors(model):
        if name not in stored:
            raise DataError(f"checkpoint missing tensor {name}")
        entry = stored[name]
        values = np.asarray(entry["values"], dtype=entry["dtype"]).reshape(entry["shape"])
        if values.shape != arr.shape:
            raise DataError(f"tensor {name}: shape {values.shape} != expected {arr.shape}")
        arr[...] = values
    meta = {
        "seed": payload["seed"],
        "label_manifest": payload["label_manifest"],
        "config": payload["config"],
    }
    return model, meta
