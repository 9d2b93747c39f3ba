"""CPU throughput harness for the plugin architectures.

Three modes: `inference` runs the full encoder stack, `finetune` measures
training steps (forward + backward + optimizer update), and `micro` measures a
single plugin layer in isolation. End-to-end numbers are dominated by the
frozen backbone, so the layer-level contrast between architectures is read
from micro mode.

Thread budgets are enforced by capping the worker pool that batch items are
split across; no cgroup or frequency emulation. Timing uses the monotonic
clock. Wall-clock comparisons between architectures should interleave their
measurement windows (see compare_throughput) because machine load drifts on
shared hosts; a single pair of back-to-back runs is not trustworthy.
"""

from __future__ import annotations

import csv
import json
import os
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from . import adapter as adapter_mod
from . import memory as memory_mod
from .backbone import (
    BackboneConfig,
    Model,
    PluginSpec,
    _plugin_forward,
    classify_backward,
    classify_forward,
    init_backbone,
    make_plugin,
    encode,
)
from .numerics import MacCounter, ParameterError, make_rng
from .training import TrainConfig, adam_step, cross_entropy_batch, init_optimizer

ARCHITECTURES = ("spartan", "spartan-dense", "adapter", "adapterx2", "none")
MODES = ("inference", "finetune", "micro")


@dataclass
class BenchConfig:
    architecture: str = "spartan"
    threads: int = 1
    batch_size: int = 32
    seq_len: int = 32
    warmup_batches: int = 2
    measure_seconds: float = 2.0
    seed: int = 0
    precision: str = "f32"
    # model shapes; defaults are the full-size comparison configuration
    d: int = 768
    layers: int = 12
    heads: int = 12
    ffn_dim: int = 3072
    num_parents: int = 16
    children_per_parent: int = 3
    top_k: int = 8
    bottleneck: int = 64
    num_labels: int = 2
    vocab_hash_buckets: int = 2048

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ParameterError(
                f"architecture {self.architecture!r} not one of {ARCHITECTURES}")
        if self.threads < 1:
            raise ParameterError(f"threads must be >= 1, got {self.threads}")
        if self.measure_seconds < 1:
            raise ParameterError(f"measure_seconds must be >= 1, got {self.measure_seconds}")
        if self.precision not in ("f32", "f64"):
            raise ParameterError(f"precision must be f32 or f64, got {self.precision!r}")
        if self.batch_size < 1 or self.seq_len < 1:
            raise ParameterError("batch_size and seq_len must be >= 1")


@dataclass
class BenchReport:
    instances_per_minute: float
    macs_per_instance: int
    macs_per_position_per_plugin: int
    instances: int
    elapsed_seconds: float
    mode: str
    config: dict
    environment: dict


def environment_fingerprint(cfg: BenchConfig) -> dict:
    return {
        "cores": os.cpu_count(),
        "worker_threads": cfg.threads,
        "precision": cfg.precision,
        "machine": platform.machine(),
        "python": platform.python_version(),
        "numpy": np.__version__,
    }


def count_macs(architecture: str, d: int, num_parents: int = 16,
               children_per_parent: int = 3, top_k: int = 8, bottleneck: int = 64) -> int:
    """Closed-form multiply-accumulates per position for the plugin alone.

    Sparse memory: N*d parent scoring plus K*c*2*d child key/value work.
    Adapter: 2*d*b for the two projections; its normalization is element ops,
    counted separately by count_norm_element_ops.
    """
    if architecture == "spartan":
        return num_parents * d + 2 * top_k * children_per_parent * d
    if architecture == "spartan-dense":
        return num_parents * d + 2 * num_parents * children_per_parent * d
    if architecture == "adapter":
        return 2 * d * bottleneck
    if architecture == "adapterx2":
        return 4 * d * bottleneck
    if architecture == "none":
        return 0
    raise ParameterError(f"architecture {architecture!r} not one of {ARCHITECTURES}")


def count_norm_element_ops(architecture: str, d: int) -> int:
    """Element-op estimate (6*d per normalization) reported alongside MACs."""
    if architecture == "adapter":
        return 6 * d
    if architecture == "adapterx2":
        return 12 * d
    return 0


def _cfg_macs(cfg: BenchConfig) -> int:
    return count_macs(cfg.architecture, cfg.d, cfg.num_parents,
                      cfg.children_per_parent, cfg.top_k, cfg.bottleneck)


def _dtype(cfg: BenchConfig):
    return np.float32 if cfg.precision == "f32" else np.float64


def _spartan_cfg(cfg: BenchConfig, dense: bool) -> memory_mod.SpartanConfig:
    k = cfg.num_parents if dense else cfg.top_k
    return memory_mod.SpartanConfig(d=cfg.d, num_parents=cfg.num_parents,
                                    children_per_parent=cfg.children_per_parent, top_k=k)


def build_plugin_spec(cfg: BenchConfig, layers: int, rng: np.random.Generator) -> PluginSpec:
    """Plugin parameters for `layers` instances at the bench shapes, randomized
    (child values included; identity-at-init would undercount real work)."""
    # heads=1: the throwaway config only sizes plugin tensors
    bb_cfg = BackboneConfig(d=cfg.d, layers=layers, heads=1, ffn_dim=cfg.ffn_dim,
                            vocab_hash_buckets=cfg.vocab_hash_buckets,
                            max_seq_len=max(cfg.seq_len, 2))
    if cfg.architecture in ("spartan", "spartan-dense"):
        spec = make_plugin("spartan", bb_cfg, rng,
                           spartan_cfg=_spartan_cfg(cfg, cfg.architecture == "spartan-dense"))
        for sp in spec.layers:
            sp.child_values[...] = rng.normal(0.0, 1.0 / np.sqrt(cfg.d), sp.child_values.shape)
    elif cfg.architecture in ("adapter", "adapterx2"):
        spec = make_plugin(cfg.architecture, bb_cfg, rng,
                           adapter_cfg=adapter_mod.AdapterConfig(d=cfg.d, bottleneck=cfg.bottleneck))
        instances = [a for entry in spec.layers for a in (entry if isinstance(entry, tuple) else (entry,))]
        for ap in instances:
            ap.up[...] = rng.normal(0.0, 1.0 / np.sqrt(cfg.bottleneck), ap.up.shape)
    else:
        spec = make_plugin("none", bb_cfg, rng)
    _cast_plugin(spec, _dtype(cfg))
    return spec


def _cast_plugin(spec: PluginSpec, dtype) -> None:
    for l, entry in enumerate(spec.layers):
        if entry is None:
            continue
        if isinstance(entry, tuple):
            for ap in entry:
                _cast_adapter(ap, dtype)
        elif isinstance(entry, memory_mod.SpartanLayerParams):
            entry.parents = entry.parents.astype(dtype)
            entry.child_keys = entry.child_keys.astype(dtype)
            entry.child_values = entry.child_values.astype(dtype)
        else:
            _cast_adapter(entry, dtype)


def _cast_adapter(ap, dtype) -> None:
    for name in ("down", "down_bias", "up", "up_bias", "norm_gain", "norm_bias"):
        setattr(ap, name, getattr(ap, name).astype(dtype))


def build_bench_model(cfg: BenchConfig, rng: np.random.Generator) -> Model:
    bb_cfg = BackboneConfig(d=cfg.d, layers=cfg.layers, heads=cfg.heads, ffn_dim=cfg.ffn_dim,
                            vocab_hash_buckets=cfg.vocab_hash_buckets,
                            max_seq_len=max(cfg.seq_len, 2))
    params = init_backbone(bb_cfg, cfg.num_labels, rng)
    spec = build_plugin_spec(cfg, cfg.layers, rng)
    model = Model(bb_cfg, params, spec)
    dtype = _dtype(cfg)
    if dtype is not np.float64:
        params.token_emb = params.token_emb.astype(dtype)
        params.pos_emb = params.pos_emb.astype(dtype)
        for lw in params.layers:
            for fname in ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo", "ln1_gain",
                          "ln1_bias", "w1", "b1", "w2", "b2", "ln2_gain", "ln2_bias"):
                setattr(lw, fname, getattr(lw, fname).astype(dtype))
        params.head_weight = params.head_weight.astype(dtype)
        params.head_bias = params.head_bias.astype(dtype)
    return model


def _chunks(total: int, workers: int) -> list[np.ndarray]:
    return [c for c in np.array_split(np.arange(total), workers) if c.size]


def _timed_loop(step_fn, cfg: BenchConfig, instances_per_step: int):
    """Warmup, then repeat step_fn until the measurement window closes."""
    for _ in range(cfg.warmup_batches):
        step_fn()
    instances = 0
    start = time.perf_counter()
    while True:
        step_fn()
        instances += instances_per_step
        elapsed = time.perf_counter() - start
        if elapsed >= cfg.measure_seconds:
            break
    return instances, elapsed


def run_micro_bench(cfg: BenchConfig) -> BenchReport:
    """Plugin layer alone over batch_size sequences of seq_len positions."""
    rng = make_rng(cfg.seed)
    spec = build_plugin_spec(cfg, 1, rng)
    t = cfg.batch_size * cfg.seq_len
    x = rng.standard_normal((t, cfg.d)).astype(_dtype(cfg))
    counter = MacCounter()

    if cfg.threads == 1:
        def step():
            _plugin_forward(spec, 0, x, counter, False)
    else:
        pool = ThreadPoolExecutor(max_workers=cfg.threads)
        parts = [x[c] for c in _chunks(t, cfg.threads)]

        def step():
            futures = [pool.submit(_plugin_forward, spec, 0, part, counter, False)
                       for part in parts]
            for f in futures:
                f.result()

    instances, elapsed = _timed_loop(step, cfg, cfg.batch_size)
    positions = (instances + cfg.warmup_batches * cfg.batch_size) * cfg.seq_len
    per_position = counter.total // positions if positions else 0
    return BenchReport(
        instances_per_minute=instances * 60.0 / elapsed,
        macs_per_instance=per_position * cfg.seq_len,
        macs_per_position_per_plugin=per_position,
        instances=instances,
        elapsed_seconds=elapsed,
        mode="micro",
        config={**asdict(cfg), "mode": "micro"},
        environment=environment_fingerprint(cfg),
    )


def run_inference_bench(cfg: BenchConfig) -> BenchReport:
    """End-to-end encoder throughput at the configured shapes."""
    rng = make_rng(cfg.seed)
    model = build_bench_model(cfg, rng)
    ids = rng.integers(0, cfg.vocab_hash_buckets, size=(cfg.batch_size, cfg.seq_len))
    counter = MacCounter()

    if cfg.threads == 1:
        def step():
            encode(model, ids, counter=counter)
    else:
        pool = ThreadPoolExecutor(max_workers=cfg.threads)
        parts = [ids[c] for c in _chunks(cfg.batch_size, cfg.threads)]

        def step():
            futures = [pool.submit(encode, model, part, counter) for part in parts]
            for f in futures:
                f.result()

    instances, elapsed = _timed_loop(step, cfg, cfg.batch_size)
    positions = (instances + cfg.warmup_batches * cfg.batch_size) * cfg.seq_len
    per_position = counter.total // (positions * cfg.layers) if positions else 0
    return BenchReport(
        instances_per_minute=instances * 60.0 / elapsed,
        macs_per_instance=per_position * cfg.seq_len * cfg.layers,
        macs_per_position_per_plugin=per_position,
        instances=instances,
        elapsed_seconds=elapsed,
        mode="inference",
        config={**asdict(cfg), "mode": "inference"},
        environment=environment_fingerprint(cfg),
    )


def run_finetune_bench(cfg: BenchConfig, train_cfg: TrainConfig | None = None) -> BenchReport:
    """Training-step throughput: forward, backward, and optimizer update.

    Thread workers each process a slice of the batch; gradients are summed in
    slice order and the update is one serialized step.
    """
    train_cfg = train_cfg or TrainConfig(batch_size=cfg.batch_size)
    rng = make_rng(cfg.seed)
    model = build_bench_model(cfg, rng)
    ids = rng.integers(0, cfg.vocab_hash_buckets, size=(cfg.batch_size, cfg.seq_len))
    labels = rng.integers(0, cfg.num_labels, size=cfg.batch_size)
    opt = init_optimizer(model)
    pool = ThreadPoolExecutor(max_workers=cfg.threads) if cfg.threads > 1 else None
    parts = _chunks(cfg.batch_size, cfg.threads)

    def part_grads(chunk):
        logits, state = classify_forward(model, ids[chunk], collect=True)
        _, d_logits = cross_entropy_batch(logits, labels[chunk])
        return classify_backward(model, state, d_logits)

    def step():
        if pool is None:
            grad_sets = [part_grads(chunk) for chunk in parts]
        else:
            grad_sets = list(pool.map(part_grads, parts))
        grads = grad_sets[0]
        for extra in grad_sets[1:]:
            for name, g in extra.items():
                grads[name] += g
        for name in grads:
            grads[name] = grads[name] / cfg.batch_size
        adam_step(opt, model, grads, train_cfg)

    instances, elapsed = _timed_loop(step, cfg, cfg.batch_size)
    # forward-pass plugin MACs; the backward pass is not instrumented
    per_position = _cfg_macs(cfg)
    return BenchReport(
        instances_per_minute=instances * 60.0 / elapsed,
        macs_per_instance=per_position * cfg.seq_len * cfg.layers,
        macs_per_position_per_plugin=per_position,
        instances=instances,
        elapsed_seconds=elapsed,
        mode="finetune",
        config={**asdict(cfg), "mode": "finetune"},
        environment=environment_fingerprint(cfg),
    )


_RUNNERS = {"inference": run_inference_bench, "micro": run_micro_bench}


def compare_throughput(arms: dict[str, BenchConfig], mode: str = "micro",
                       rounds: int = 5) -> dict[str, float]:
    """Median instances/minute per arm, measured in interleaved rounds.

    Round-robin interleaving cancels slow machine drift that would otherwise
    bias whichever arm happened to run during a quiet stretch.
    """
    if mode not in _RUNNERS:
        raise ParameterError(f"compare_throughput supports modes {tuple(_RUNNERS)}")
    runner = _RUNNERS[mode]
    samples: dict[str, list[float]] = {name: [] for name in arms}
    for _ in range(rounds):
        for name, cfg in arms.items():
            samples[name].append(runner(cfg).instances_per_minute)
    return {name: float(np.median(v)) for name, v in samples.items()}


def write_report_json(path, report: BenchReport) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(asdict(report), fh, indent=2)
        fh.write("\n")


def write_report_csv(path, report: BenchReport) -> None:
    flat = {
        "mode": report.mode,
        "architecture": report.config["architecture"],
        "instances_per_minute": report.instances_per_minute,
        "macs_per_instance": report.macs_per_instance,
        "macs_per_position_per_plugin": report.macs_per_position_per_plugin,
        "instances": report.instances,
        "elapsed_seconds": report.elapsed_seconds,
        "threads": report.config["threads"],
        "batch_size": report.config["batch_size"],
        "seq_len": report.config["seq_len"],
        "precision": report.config["precision"],
    }
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(flat))
        writer.writeheader()
        writer.writerow(flat)
