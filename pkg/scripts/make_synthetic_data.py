#!/usr/bin/env python3
"""Generate synthetic topic-classification JSONL splits for the CLI workflows.

Example:
    python scripts/make_synthetic_data.py --out-dir data/ --topics 4 \
        --per-topic 250 --noise 0.05 --seed 100
"""

import argparse
from pathlib import Path

from spartan.data import SyntheticTopicTask, generate_topic_dataset, write_jsonl
from spartan.numerics import make_rng


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-dir", required=True)
    ap.add_argument("--topics", type=int, default=4)
    ap.add_argument("--per-topic", type=int, default=250)
    ap.add_argument("--words", type=int, default=10)
    ap.add_argument("--noise", type=float, default=0.05)
    ap.add_argument("--seed", type=int, default=100)
    args = ap.parse_args()

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    task = SyntheticTopicTask(num_topics=args.topics, examples_per_topic=args.per_topic,
                              words_per_example=args.words, noise_rate=args.noise)
    for split, seed_offset in (("train", 0), ("valid", 1)):
        examples = generate_topic_dataset(task, make_rng(args.seed + seed_offset))
        path = out / f"{split}.jsonl"
        write_jsonl(path, examples)
        print(f"wrote {len(examples)} examples to {path}")


if __name__ == "__main__":
    main()
