"""Parameter-efficient fine-tuning loop: adaptive-moment optimization over the
plugin parameters and classification head, with the backbone left untouched.

Batch gradients are means over examples, so learning rates follow the usual
batch-size conventions. Examples are batched by grouping equal-length token
sequences; grouping only affects speed, not results.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .backbone import Model, classify_backward, classify_forward, iter_named_tensors, tokenize
from .data import Example
from .numerics import ParameterError, make_rng


class NumericalError(RuntimeError):
    """Raised when training produces a non-finite loss."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    steps: int = 1000
    few_shot_steps: int = 1000
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    eval_every: int = 0  # 0 = only record loss

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ParameterError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class OptimizerState:
    """First/second moment accumulators for the trainable tensors only."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0


@dataclass
class TrainResult:
    history: list = field(default_factory=list)  # dicts: step, loss, eval_accuracy?


def cross_entropy(logits: np.ndarray, label: int):
    """Negative log softmax probability of the true label.

    Returns (loss, d_logits) with d_logits = softmax(logits) - onehot(label).
    """
    logits = np.asarray(logits, dtype=np.float64)
    z = logits - logits.max()
    e = np.exp(z)
    p = e / e.sum()
    loss = -(z[label] - np.log(e.sum()))
    d = p.copy()
    d[label] -= 1.0
    return loss, d


def cross_entropy_batch(logits: np.ndarray, labels: np.ndarray):
    """Row-wise cross entropy; returns (per-example losses, per-example d_logits)."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    se = e.sum(axis=1, keepdims=True)
    p = e / se
    rows = np.arange(logits.shape[0])
    losses = -(z[rows, labels] - np.log(se[:, 0]))
    d = p.copy()
    d[rows, labels] -= 1.0
    return losses, d


def init_optimizer(model: Model) -> OptimizerState:
    m, v = {}, {}
    for name, arr, trainable in iter_named_tensors(model):
        if trainable:
            m[name] = np.zeros_like(arr)
            v[name] = np.zeros_like(arr)
    return OptimizerState(m=m, v=v)


def adam_step(state: OptimizerState, model: Model, grads: dict[str, np.ndarray],
              cfg: TrainConfig) -> None:
    """Bias-corrected adaptive-moment update, in place, trainable tensors only.

    Weight decay, when nonzero, is decoupled from the moment estimates.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, arr, trainable in iter_named_tensors(model):
        if not trainable:
            continue
        g = grads[name]
        if g.shape != arr.shape:
            raise ParameterError(f"gradient shape mismatch for {name}: {g.shape} != {arr.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.epsilon)
        if cfg.weight_decay:
            update = update + cfg.weight_decay * arr
        arr -= cfg.learning_rate * update


def _group_by_length(token_lists: list[np.ndarray]):
    groups: dict[int, list[int]] = {}
    for i, ids in enumerate(token_lists):
        groups.setdefault(len(ids), []).append(i)
    return [np.asarray(idx) for _, idx in sorted(groups.items())]


def compute_batch_gradients(model: Model, token_lists: list[np.ndarray], labels: np.ndarray):
    """Mean loss and mean gradients over one batch of tokenized examples.

    This is one optimization step's raw gradient, before any moment smoothing,
    which is what the exact-sparsity guarantees are about.
    """
    n = len(token_lists)
    total_loss = 0.0
    grads: dict[str, np.ndarray] = {}
    for idx in _group_by_length(token_lists):
        ids = np.stack([token_lists[i] for i in idx])
        logits, state = classify_forward(model, ids, collect=True)
        losses, d_logits = cross_entropy_batch(logits, labels[idx])
        total_loss += losses.sum()
        g = classify_backward(model, state, d_logits)
        for name, val in g.items():
            if name in grads:
                grads[name] += val
            else:
                grads[name] = val
    for name in grads:
        grads[name] /= n
    return total_loss / n, grads


def train(model: Model, dataset: list[Example], cfg: TrainConfig,
          eval_dataset: list[Example] | None = None) -> TrainResult:
    """Seed-deterministic fine-tuning of plugin + head on the given dataset.

    Batches walk shuffled epochs; a non-finite loss aborts immediately with
    the offending step in the message.
    """
    if not dataset:
        raise ParameterError("dataset must be nonempty")
    rng = make_rng(cfg.seed)
    token_lists = [tokenize(ex.text, model.cfg) for ex in dataset]
    labels = np.asarray([ex.label for ex in dataset])

    opt = init_optimizer(model)
    result = TrainResult()
    order = rng.permutation(len(dataset))
    cursor = 0
    for step in range(cfg.steps):
        take = []
        while len(take) < cfg.batch_size:
            if cursor == len(order):
                order = rng.permutation(len(dataset))
                cursor = 0
            take.append(order[cursor])
            cursor += 1
        batch_idx = np.asarray(take)
        loss, grads = compute_batch_gradients(
            model, [token_lists[i] for i in batch_idx], labels[batch_idx])
        if not np.isfinite(loss):
            raise NumericalError(f"non-finite loss at step {step}")
        adam_step(opt, model, grads, cfg)
        record = {"step": step, "loss": float(loss)}
        if cfg.eval_every and eval_dataset and (step + 1) % cfg.eval_every == 0:
            record["eval_accuracy"] = evaluate(model, eval_dataset)
        result.history.append(record)
    return result


def evaluate(model: Model, dataset: list[Example]) -> float:
    """Fraction of argmax-correct predictions; logit ties go to the lowest label id."""
    if not dataset:
        raise ParameterError("dataset must be nonempty")
    token_lists = [tokenize(ex.text, model.cfg) for ex in dataset]
    labels = np.asarray([ex.label for ex in dataset])
    preds = np.empty(len(dataset), dtype=np.int64)
    for idx in _group_by_length(token_lists):
        ids = np.stack([token_lists[i] for i in idx])
        logits, _ = classify_forward(model, ids, collect=False)
        preds[idx] = np.argmax(logits, axis=1)
    return float(np.mean(preds == labels))


def write_metrics_csv(path, history: list[dict]) -> None:
    """step, loss, and eval_accuracy where recorded."""
    with_acc = any("eval_accuracy" in rec for rec in history)
    fields = ["step", "loss"] + (["eval_accuracy"] if with_acc else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for rec in history:
            writer.writerow({k: rec.get(k, "") for k in fields})
