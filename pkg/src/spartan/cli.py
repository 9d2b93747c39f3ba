"""Command-line entry point: train, eval, bench, analyze, params.

Configuration comes from a JSON file (see README for the schema) with a small
set of flags that override file fields. Exit codes: 0 success, 1 usage or
configuration error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

from . import analysis as analysis_mod
from . import bench as bench_mod
from . import params as params_mod
from .adapter import AdapterConfig
from .backbone import BackboneConfig, Model, init_backbone, make_plugin
from .checkpoint import load_checkpoint, save_checkpoint
from .data import DataError, few_shot_sample, load_jsonl
from .memory import DegenerateSelectionError, SpartanConfig
from .numerics import ParameterError, ShapeError, make_rng
from .training import NumericalError, TrainConfig, evaluate, train, write_metrics_csv

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _default_run_config() -> dict:
    return {
        "seed": 0,
        "num_labels": None,
        "backbone": asdict(BackboneConfig()),
        "plugin": {"kind": "spartan"},
        "train": {k: v for k, v in asdict(TrainConfig()).items()},
    }


def load_run_config(path: str | None) -> dict:
    conf = _default_run_config()
    if path is None:
        return conf
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {p}")
    try:
        with open(p, encoding="utf-8") as fh:
            user = json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {p}: invalid JSON ({exc.msg})") from exc
    for key, val in user.items():
        if isinstance(val, dict) and isinstance(conf.get(key), dict):
            conf[key].update(val)
        else:
            conf[key] = val
    return conf


def _plugin_from_config(conf: dict, backbone_cfg: BackboneConfig):
    """(kind, spartan_cfg, adapter_cfg); rejects a d that disagrees with the backbone."""
    pconf = dict(conf.get("plugin", {}))
    kind = pconf.pop("kind", "spartan")
    d = pconf.pop("d", backbone_cfg.d)
    if d != backbone_cfg.d:
        raise UsageError(f"plugin d={d} does not match backbone d={backbone_cfg.d}")
    if kind == "spartan":
        allowed = {"num_parents", "children_per_parent", "top_k"}
        extra = set(pconf) - allowed
        if extra:
            raise UsageError(f"unknown spartan plugin fields: {sorted(extra)}")
        return kind, SpartanConfig(d=d, **pconf), None
    if kind in ("adapter", "adapterx2"):
        allowed = {"bottleneck"}
        extra = set(pconf) - allowed
        if extra:
            raise UsageError(f"unknown adapter plugin fields: {sorted(extra)}")
        return kind, None, AdapterConfig(d=d, **pconf)
    if kind == "none":
        return kind, None, None
    raise UsageError(f"unknown plugin kind {kind!r}")


def _load_examples(path: str):
    examples = load_jsonl(path)
    manifest_path = Path(path).parent / "labels.json"
    manifest = {}
    if manifest_path.exists():
        with open(manifest_path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    return examples, manifest


def cmd_train(args) -> int:
    conf = load_run_config(args.config)
    if args.seed is not None:
        conf["seed"] = args.seed
    seed = int(conf["seed"])

    examples, manifest = _load_examples(args.data)
    if not examples:
        raise DataError(f"no examples in {args.data}")
    num_labels = conf["num_labels"] or max(ex.label for ex in examples) + 1
    if any(not 0 <= ex.label < num_labels for ex in examples):
        raise DataError(f"labels outside [0, {num_labels}) in {args.data}")

    backbone_cfg = BackboneConfig(**conf["backbone"])
    kind, spartan_cfg, adapter_cfg = _plugin_from_config(conf, backbone_cfg)

    rng = make_rng(seed)
    params = init_backbone(backbone_cfg, num_labels, rng)
    plugin = make_plugin(kind, backbone_cfg, rng, spartan_cfg=spartan_cfg, adapter_cfg=adapter_cfg)
    model = Model(backbone_cfg, params, plugin)

    train_conf = dict(conf["train"])
    train_conf["seed"] = seed
    if args.lr is not None:
        train_conf["learning_rate"] = args.lr
    tcfg = TrainConfig(**train_conf)

    train_set = examples
    if args.few_shot is not None:
        train_set = few_shot_sample(examples, args.few_shot, make_rng(seed))
        if args.steps is None:
            tcfg.steps = tcfg.few_shot_steps
    if args.steps is not None:
        tcfg.steps = args.steps

    result = train(model, train_set, tcfg)

    out = Path(args.out)
    save_checkpoint(out, model, seed, label_manifest=manifest, extra_config={
        "train": asdict(tcfg),
        "plugin_kind": kind,
        "num_train_examples": len(train_set),
        "data_path": str(args.data),
    })
    metrics_path = args.metrics or str(out) + ".metrics.csv"
    write_metrics_csv(metrics_path, result.history)
    final_loss = result.history[-1]["loss"] if result.history else float("nan")
    print(f"trained {tcfg.steps} steps on {len(train_set)} examples; "
          f"final loss {final_loss:.6f}")
    print(f"checkpoint: {out}")
    print(f"metrics: {metrics_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, meta = load_checkpoint(args.model)
    examples = load_jsonl(args.data, label_map=meta["label_manifest"] or None)
    if not examples:
        raise DataError(f"no examples in {args.data}")
    acc = evaluate(model, examples)
    payload = {"accuracy": acc, "examples": len(examples), "model": str(args.model)}
    print(f"accuracy {acc:.4f}")
    print(json.dumps(payload))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = bench_mod.BenchConfig(
        architecture=args.arch,
        threads=args.threads,
        batch_size=args.batch,
        seq_len=args.seq_len,
        warmup_batches=args.warmup,
        measure_seconds=args.measure_seconds,
        seed=args.seed if args.seed is not None else 0,
        precision=args.precision,
        d=args.d,
        layers=args.layers,
        heads=args.heads,
        ffn_dim=args.ffn_dim,
        num_parents=args.num_parents,
        children_per_parent=args.children,
        top_k=args.top_k,
        bottleneck=args.bottleneck,
    )
    runner = {"inference": bench_mod.run_inference_bench,
              "finetune": bench_mod.run_finetune_bench,
              "micro": bench_mod.run_micro_bench}[args.mode]
    report = runner(cfg)
    prefix = Path(args.out)
    bench_mod.write_report_json(str(prefix) + ".json", report)
    bench_mod.write_report_csv(str(prefix) + ".csv", report)
    print(f"{args.mode} {args.arch}: {report.instances_per_minute:.1f} instances/min "
          f"({report.macs_per_position_per_plugin} plugin MACs/position)")
    print(f"reports: {prefix}.json {prefix}.csv")
    return EXIT_OK


def cmd_analyze(args) -> int:
    model, meta = load_checkpoint(args.model)
    examples = load_jsonl(args.data, label_map=meta["label_manifest"] or None)
    if not examples:
        raise DataError(f"no examples in {args.data}")
    layer = args.layer if args.layer == "last" else int(args.layer)
    records = analysis_mod.collect_selections(model, examples, layer)
    stats = analysis_mod.specialization_stats(records)
    analysis_mod.write_selection_csv(str(args.out) + ".csv", records)
    analysis_mod.write_summary_json(str(args.out) + ".json", stats)
    best = max(p for p in stats.per_parent_purity if p is not None)
    print(f"{len(records)} records at layer {records[0].layer}; "
          f"nmi {stats.nmi:.4f}; best parent purity {best:.4f}")
    print(f"outputs: {args.out}.csv {args.out}.json")
    return EXIT_OK


def cmd_params(args) -> int:
    if args.config:
        conf = load_run_config(args.config)
        backbone_cfg = BackboneConfig(**conf["backbone"])
        kind, spartan_cfg, adapter_cfg = _plugin_from_config(conf, backbone_cfg)
        num_labels = conf["num_labels"] or 2
    else:
        # full-size comparison shapes, matching the benchmark defaults
        bdefault = bench_mod.BenchConfig()
        backbone_cfg = BackboneConfig(d=bdefault.d, layers=bdefault.layers, heads=bdefault.heads,
                                      ffn_dim=bdefault.ffn_dim,
                                      vocab_hash_buckets=bdefault.vocab_hash_buckets,
                                      max_seq_len=128)
        kind, spartan_cfg, adapter_cfg = "spartan", SpartanConfig(d=bdefault.d), None
        num_labels = 2
    report = params_mod.build_report(backbone_cfg, num_labels, kind, tasks=args.tasks,
                                     spartan_cfg=spartan_cfg, adapter_cfg=adapter_cfg)
    print(params_mod.render_table(report))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(params_mod.report_to_dict(report), fh, indent=2)
            fh.write("\n")
        print(f"report: {args.out}")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="spartan", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="fine-tune plugin + head on JSONL data")
    p_train.add_argument("--config", default=None, help="JSON run config")
    p_train.add_argument("--data", required=True, help="training JSONL")
    p_train.add_argument("--out", required=True, help="checkpoint path")
    p_train.add_argument("--metrics", default=None, help="metrics CSV path (default: <out>.metrics.csv)")
    p_train.add_argument("--few-shot", type=int, default=None, metavar="N",
                         help="train on a stratified sample of N instances")
    p_train.add_argument("--steps", type=int, default=None)
    p_train.add_argument("--lr", type=float, default=None)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="accuracy of a checkpoint on JSONL data")
    p_eval.add_argument("--model", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--out", default=None, help="optional JSON output path")
    p_eval.set_defaults(func=cmd_eval)

    p_bench = sub.add_parser("bench", help="throughput benchmarks")
    p_bench.add_argument("--arch", default="spartan", choices=bench_mod.ARCHITECTURES)
    p_bench.add_argument("--mode", default="inference", choices=bench_mod.MODES)
    p_bench.add_argument("--threads", type=int, default=1)
    p_bench.add_argument("--batch", type=int, default=32)
    p_bench.add_argument("--seq-len", type=int, default=32)
    p_bench.add_argument("--warmup", type=int, default=2)
    p_bench.add_argument("--measure-seconds", type=float, default=2.0)
    p_bench.add_argument("--precision", default="f32", choices=("f32", "f64"))
    p_bench.add_argument("--d", type=int, default=768)
    p_bench.add_argument("--layers", type=int, default=12)
    p_bench.add_argument("--heads", type=int, default=12)
    p_bench.add_argument("--ffn-dim", type=int, default=3072)
    p_bench.add_argument("--num-parents", type=int, default=16)
    p_bench.add_argument("--children", type=int, default=3)
    p_bench.add_argument("--top-k", type=int, default=8)
    p_bench.add_argument("--bottleneck", type=int, default=64)
    p_bench.add_argument("--seed", type=int, default=None)
    p_bench.add_argument("--out", default="bench_report", help="output prefix")
    p_bench.set_defaults(func=cmd_bench)

    p_an = sub.add_parser("analyze", help="parent-specialization analysis")
    p_an.add_argument("--model", required=True)
    p_an.add_argument("--data", required=True)
    p_an.add_argument("--layer", default="last", help='layer index or "last"')
    p_an.add_argument("--out", required=True, help="output prefix for .csv and .json")
    p_an.set_defaults(func=cmd_analyze)

    p_par = sub.add_parser("params", help="parameter accounting report")
    p_par.add_argument("--config", default=None, help="JSON run config (default: full-size shapes)")
    p_par.add_argument("--tasks", type=int, default=1)
    p_par.add_argument("--out", default=None, help="optional JSON output path")
    p_par.set_defaults(func=cmd_params)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ParameterError, ShapeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, DegenerateSelectionError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
