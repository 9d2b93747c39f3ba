"""Sparse hierarchical memory for parameter-efficient fine-tuning of frozen
Transformer encoders, with an adapter baseline, training harness, CPU
throughput benchmarks, parameter accounting, and routing analysis."""

__version__ = "0.1.0"
