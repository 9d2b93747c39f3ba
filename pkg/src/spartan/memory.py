"""Sparse hierarchical memory layer: parent routing, child key-value attention,
renormalized aggregation, residual output, and an exact manual backward pass.

The layer holds N parent vectors; an input x routes to its top-K parents by
softmax score, each chosen parent produces a representation by attending over
its own c key-value child rows, and the K representations are combined with
the parent probabilities renormalized over the chosen set. The combined vector
is added back to x. No normalization layer and no logit scaling anywhere.

The renormalized weights p[i]/Z equal a softmax over the selected raw logits
(the global softmax denominator cancels), which is how the forward computes
them: it is immune to underflow of the global denominator, and it makes
gradients w.r.t. non-selected parents exactly zero, not merely small.

Two forward implementations exist: a per-position reference (`forward_position`)
and a batched dispatch path (`forward_batch`) that groups positions by selected
parent so child work runs as small matrix products. They compute the same
function; tests pin them against each other.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (
    MacCounter,
    ParameterError,
    ShapeError,
    matvec,
    sample_gaussian,
    softmax_rows,
    softmax_stable,
    topk_indices,
    topk_rows,
)


class DegenerateSelectionError(ArithmeticError):
    """Raised when the selected parent probabilities sum to exactly zero."""


class ConsistencyError(ValueError):
    """Raised when a trace does not match the parameters it is replayed against."""


@dataclass
class SpartanConfig:
    d: int
    num_parents: int = 16
    children_per_parent: int = 3
    top_k: int = 8

    def __post_init__(self):
        if self.d < 1:
            raise ParameterError(f"d must be >= 1, got {self.d}")
        if self.children_per_parent < 1:
            raise ParameterError(f"children_per_parent must be >= 1, got {self.children_per_parent}")
        if not 1 <= self.top_k <= self.num_parents:
            raise ParameterError(
                f"top_k must satisfy 1 <= K <= num_parents, got K={self.top_k}, N={self.num_parents}"
            )


@dataclass
class SpartanLayerParams:
    """Trainable state: parent matrix (N, d) plus per-parent child key/value (N, c, d)."""

    cfg: SpartanConfig
    parents: np.ndarray
    child_keys: np.ndarray
    child_values: np.ndarray

    def __post_init__(self):
        n, c, d = self.cfg.num_parents, self.cfg.children_per_parent, self.cfg.d
        if self.parents.shape != (n, d):
            raise ShapeError(f"parents shape {self.parents.shape} != ({n}, {d})")
        if self.child_keys.shape != (n, c, d):
            raise ShapeError(f"child_keys shape {self.child_keys.shape} != ({n}, {c}, {d})")
        if self.child_values.shape != (n, c, d):
            raise ShapeError(f"child_values shape {self.child_values.shape} != ({n}, {c}, {d})")


@dataclass
class ForwardTrace:
    """Everything the backward pass needs, cached per position."""

    input: np.ndarray          # (d,)
    parent_probs: np.ndarray   # (N,)
    selected: np.ndarray       # (K,) ascending parent indices
    child_attn: np.ndarray     # (K, c)
    child_outputs: np.ndarray  # (K, d)
    agg_weights: np.ndarray    # (K,)
    output: np.ndarray         # (d,)


@dataclass
class SpartanGradients:
    parents: np.ndarray
    child_keys: np.ndarray
    child_values: np.ndarray
    d_input: np.ndarray


@dataclass
class BatchTrace:
    """Batched counterpart of ForwardTrace for a block of positions.

    Child value outputs are not stored; the backward pass recomputes them from
    the cached attentions, which keeps trace memory at O(T*K*c) instead of
    O(T*K*d).
    """

    x: np.ndarray              # (T, d)
    parent_probs: np.ndarray   # (T, N)
    selected: np.ndarray       # (T, K)
    agg_weights: np.ndarray    # (T, K)
    groups: list               # (parent index, t_idx, k_idx, attn (G, c)) per nonempty parent
    output: np.ndarray         # (T, d)


def init_params(cfg: SpartanConfig, rng: np.random.Generator) -> SpartanLayerParams:
    """Parents and child keys ~ N(0, 1/d); child values zero.

    Zero values make the layer an exact identity at initialization: the
    residual passes the input through untouched until training writes to the
    value rows.
    """
    n, c, d = cfg.num_parents, cfg.children_per_parent, cfg.d
    std = 1.0 / np.sqrt(d)
    parents = sample_gaussian(rng, n * d, std).reshape(n, d)
    child_keys = sample_gaussian(rng, n * c * d, std).reshape(n, c, d)
    child_values = np.zeros((n, c, d))
    return SpartanLayerParams(cfg, parents, child_keys, child_values)


def choose_parents(params: SpartanLayerParams, x: np.ndarray, k: int):
    """Softmax-score all parents against x and pick the top k (probs, indices)."""
    probs = softmax_stable(matvec(params.parents, x))
    return probs, topk_indices(probs, k)


def child_representation(params: SpartanLayerParams, i: int, x: np.ndarray):
    """Attention over parent i's child keys, then the matching value combination.

    Returns (v_i, attn) where v_i = sum_j attn[j] * child_values[i][j]. The key
    logits are used as-is; there is no temperature or 1/sqrt(d) scaling.
    """
    if not 0 <= i < params.cfg.num_parents:
        raise ParameterError(f"parent index {i} out of range [0, {params.cfg.num_parents})")
    attn = softmax_stable(matvec(params.child_keys[i], x))
    v = attn @ params.child_values[i]
    return v, attn


def aggregate(parent_probs: np.ndarray, selected: np.ndarray, child_outputs: np.ndarray):
    """Convex combination of child outputs under renormalized parent probabilities.

    agg_weights[i] = parent_probs[selected[i]] / Z with Z the selected mass.
    """
    selected = np.asarray(selected)
    child_outputs = np.asarray(child_outputs)
    if selected.shape[0] != child_outputs.shape[0]:
        raise ShapeError(
            f"{selected.shape[0]} selected parents but {child_outputs.shape[0]} child outputs"
        )
    p_sel = parent_probs[selected]
    z = p_sel.sum()
    if z == 0.0:
        raise DegenerateSelectionError("selected parent probabilities sum to zero")
    w = p_sel / z
    return w @ child_outputs, w


def forward_position(params: SpartanLayerParams, x: np.ndarray):
    """Full layer for one position: route, attend, aggregate, add residual.

    The aggregation weights are computed as a softmax over the selected raw
    logits, which equals parent_probs[i]/Z exactly but cannot underflow.
    """
    cfg = params.cfg
    x = np.asarray(x)
    if x.shape != (cfg.d,):
        raise ShapeError(f"input shape {x.shape} != ({cfg.d},)")
    logits = params.parents @ x
    probs = softmax_stable(logits)
    selected = topk_indices(probs, cfg.top_k)
    w = softmax_stable(logits[selected])

    attns = np.empty((cfg.top_k, cfg.children_per_parent), dtype=x.dtype)
    vs = np.empty((cfg.top_k, cfg.d), dtype=x.dtype)
    for k, i in enumerate(selected):
        vs[k], attns[k] = child_representation(params, int(i), x)
    output = x + w @ vs
    trace = ForwardTrace(
        input=x,
        parent_probs=probs,
        selected=selected,
        child_attn=attns,
        child_outputs=vs,
        agg_weights=w,
        output=output,
    )
    return output, trace


def forward_sequence(params: SpartanLayerParams, xs):
    """Position-wise independent application with shared parameters."""
    outputs, traces = [], []
    for x in xs:
        out, tr = forward_position(params, x)
        outputs.append(out)
        traces.append(tr)
    return outputs, traces


def backward_position(params: SpartanLayerParams, trace: ForwardTrace, d_output: np.ndarray) -> SpartanGradients:
    """Exact reverse-mode gradients of forward_position.

    The top-K index set is treated as piecewise-constant. Because the
    aggregation weights are a softmax over the selected logits only, rows of
    the parent/child gradients at non-selected indices stay exactly zero.
    """
    cfg = params.cfg
    n, c, d = cfg.num_parents, cfg.children_per_parent, cfg.d
    if trace.input.shape != (d,) or trace.selected.shape != (cfg.top_k,):
        raise ConsistencyError(
            f"trace shapes {trace.input.shape}/{trace.selected.shape} do not match "
            f"params (d={d}, K={cfg.top_k})"
        )
    if trace.child_attn.shape != (cfg.top_k, c):
        raise ConsistencyError(f"trace child_attn shape {trace.child_attn.shape} != ({cfg.top_k}, {c})")
    if trace.selected.min() < 0 or trace.selected.max() >= n:
        raise ConsistencyError(f"trace selects parents outside [0, {n})")
    d_output = np.asarray(d_output)
    if d_output.shape != (d,):
        raise ShapeError(f"d_output shape {d_output.shape} != ({d},)")

    x, w, sel = trace.input, trace.agg_weights, trace.selected
    g_parents = np.zeros_like(params.parents)
    g_keys = np.zeros_like(params.child_keys)
    g_values = np.zeros_like(params.child_values)
    d_x = d_output.copy()

    # restricted softmax over selected logits
    u = trace.child_outputs @ d_output            # dL/d agg_weights
    d_logits_sel = w * (u - (u @ w))
    g_parents[sel] = np.outer(d_logits_sel, x)
    d_x += d_logits_sel @ params.parents[sel]

    for k, i in enumerate(sel):
        i = int(i)
        attn = trace.child_attn[k]
        d_v = w[k] * d_output
        g_values[i] = np.outer(attn, d_v)
        d_attn = params.child_values[i] @ d_v
        d_klog = attn * (d_attn - (d_attn @ attn))
        g_keys[i] = np.outer(d_klog, x)
        d_x += d_klog @ params.child_keys[i]
    return SpartanGradients(g_parents, g_keys, g_values, d_x)


def dense_reference_forward(params: SpartanLayerParams, x: np.ndarray) -> np.ndarray:
    """No-sparsity oracle: every parent contributes with its full softmax weight.

    Independent of the sparse path on purpose; used by tests and as the K=N
    comparison arm in benchmarks.
    """
    x = np.asarray(x)
    probs = softmax_stable(params.parents @ x)
    out = x.astype(x.dtype, copy=True)
    for i in range(params.cfg.num_parents):
        attn = softmax_stable(params.child_keys[i] @ x)
        out = out + probs[i] * (attn @ params.child_values[i])
    return out


def forward_batch(params: SpartanLayerParams, x: np.ndarray, counter: MacCounter | None = None,
                  collect_trace: bool = False):
    """Layer forward over a block of positions (T, d), dispatched by parent.

    Positions are grouped per selected parent so each parent's child work runs
    as one (G, d) x (d, c) product. Within a group the position indices are
    unique (a position selects a parent at most once), so fancy-indexed
    accumulation into the output is safe.
    """
    cfg = params.cfg
    n, c, d, K = cfg.num_parents, cfg.children_per_parent, cfg.d, cfg.top_k
    if x.ndim != 2 or x.shape[1] != d:
        raise ShapeError(f"batch input shape {x.shape} incompatible with d={d}")
    t = x.shape[0]

    logits = x @ params.parents.T                      # (T, N)
    probs = softmax_rows(logits.copy())
    selected = topk_rows(probs, K)                     # (T, K)
    w = softmax_rows(np.take_along_axis(logits, selected, axis=1))
    if counter is not None:
        counter.add("parent_scores", t * n * d)

    out = x.copy()
    groups = []
    for i in range(n):
        t_idx, k_idx = np.nonzero(selected == i)
        if t_idx.size == 0:
            continue
        xg = x[t_idx]
        attn = softmax_rows(xg @ params.child_keys[i].T)    # (G, c)
        v = attn @ params.child_values[i]                   # (G, d)
        out[t_idx] += w[t_idx, k_idx][:, None] * v
        if counter is not None:
            counter.add("child_keys", t_idx.size * c * d)
            counter.add("child_values", t_idx.size * c * d)
        if collect_trace:
            groups.append((i, t_idx, k_idx, attn))
    if not collect_trace:
        return out, None
    return out, BatchTrace(x=x, parent_probs=probs, selected=selected,
                           agg_weights=w, groups=groups, output=out)


def backward_batch(params: SpartanLayerParams, trace: BatchTrace, d_out: np.ndarray) -> SpartanGradients:
    """Batched backward; parameter gradients are summed over positions and
    d_input is the full (T, d) activation gradient."""
    cfg = params.cfg
    t = trace.x.shape[0]
    if d_out.shape != trace.x.shape:
        raise ShapeError(f"d_out shape {d_out.shape} != {trace.x.shape}")

    x, w, sel = trace.x, trace.agg_weights, trace.selected
    d_x = d_out.copy()
    g_parents = np.zeros_like(params.parents)
    g_keys = np.zeros_like(params.child_keys)
    g_values = np.zeros_like(params.child_values)

    # u[t, k] = d_out[t] . v[t, k], recomputing v group-wise from cached attention
    u = np.zeros((t, cfg.top_k), dtype=x.dtype)
    for i, t_idx, k_idx, attn in trace.groups:
        v = attn @ params.child_values[i]
        u[t_idx, k_idx] = np.einsum("gd,gd->g", v, d_out[t_idx])
    d_logits_sel = w * (u - (u * w).sum(axis=1, keepdims=True))

    for i, t_idx, k_idx, attn in trace.groups:
        xg = x[t_idx]
        dl = d_logits_sel[t_idx, k_idx]
        g_parents[i] = dl @ xg
        d_x[t_idx] += np.outer(dl, params.parents[i])
        d_v = w[t_idx, k_idx][:, None] * d_out[t_idx]       # (G, d)
        g_values[i] = attn.T @ d_v
        d_attn = d_v @ params.child_values[i].T             # (G, c)
        d_klog = attn * (d_attn - (d_attn * attn).sum(axis=1, keepdims=True))
        g_keys[i] = d_klog.T @ xg
        d_x[t_idx] += d_klog @ params.child_keys[i]
    return SpartanGradients(g_parents, g_keys, g_values, d_x)
