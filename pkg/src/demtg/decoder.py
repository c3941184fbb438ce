"""Task-aware gating transformer decoder.

Task interaction runs self-attention over all tasks' deformed features at
once. Each task then queries the interacted tokens with its own deformed
feature, and the result passes through a spatial gating layer whose
parameters are shared by every task. No positional encodings are used.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .autodiff import (ConfigError, ContractError, ParamStore, Tensor, add, concat,
                       gelu, layer_norm, linear, matmul, mul, reshape, scale, slice_last,
                       softmax_lastdim, transpose, conv1d_depthwise, upsample_bilinear)
from .tasks import TaskSpec

INIT_STD = 0.02  # depthwise gate conv
HEAD_UPSAMPLE = 4


def _add_ln(store: ParamStore, path: str, c: int) -> None:
    store.add(f"{path}.gain", np.ones(c))
    store.add(f"{path}.bias", np.zeros(c))


def _ln(x: Tensor, store: ParamStore, path: str) -> Tensor:
    return layer_norm(x, store[f"{path}.gain"], store[f"{path}.bias"])


def _add_linear(store: ParamStore, path: str, cin: int, cout: int, rng, bias: bool = True) -> None:
    # 1/sqrt(fan_in): the decoder has no batch norm to undo a shrinking signal
    store.add(f"{path}.w", rng.normal(0.0, 1.0 / np.sqrt(cin), (cin, cout)))
    if bias:
        store.add(f"{path}.b", np.zeros(cout))


def _linear(x: Tensor, store: ParamStore, path: str, rule: str = "matmul") -> Tensor:
    b = store[f"{path}.b"] if f"{path}.b" in store else None
    return linear(x, store[f"{path}.w"], b, rule=rule)


# ---------------------------------------------------------------------------
# Multi-head attention and sMLP
# ---------------------------------------------------------------------------

def init_mhsa(store: ParamStore, path: str, c: int, rng) -> None:
    for proj in ("q", "k", "v"):
        _add_linear(store, f"{path}.{proj}", c, c, rng, bias=False)
    _add_linear(store, f"{path}.out", c, c, rng)


def mhsa(q_in: Tensor, kv_in: Tensor, store: ParamStore, path: str, heads: int,
         attn_log: list | None = None) -> Tensor:
    """Scaled dot-product attention with ``heads`` heads; rows of q_in attend over kv_in."""
    c = q_in.shape[1]
    if heads < 1 or c % heads:
        raise ConfigError(f"width {c} is not divisible by {heads} heads")
    if kv_in.shape[1] != c:
        raise ContractError(f"query width {c} vs key/value width {kv_in.shape[1]}")
    dk = c // heads
    q = _linear(q_in, store, f"{path}.q")
    k = _linear(kv_in, store, f"{path}.k")
    v = _linear(kv_in, store, f"{path}.v")
    outs = []
    for h in range(heads):
        lo, hi = h * dk, (h + 1) * dk
        qh, kh, vh = slice_last(q, lo, hi), slice_last(k, lo, hi), slice_last(v, lo, hi)
        logits = scale(matmul(qh, transpose(kh)), 1.0 / np.sqrt(dk))
        attn = softmax_lastdim(logits, rule="mhsa")
        if attn_log is not None:
            attn_log.append(attn.data)
        outs.append(matmul(attn, vh))
    o = outs[0] if heads == 1 else concat(outs, axis=-1)
    return _linear(o, store, f"{path}.out")


def init_smlp(store: ParamStore, path: str, c: int, rng) -> None:
    _add_linear(store, f"{path}.fc", c, c, rng)
    _add_ln(store, f"{path}.ln", c)


def smlp(x: Tensor, store: ParamStore, path: str) -> Tensor:
    """A linear layer followed by LayerNorm."""
    return _ln(_linear(x, store, f"{path}.fc"), store, f"{path}.ln")


# ---------------------------------------------------------------------------
# Shared spatial gating
# ---------------------------------------------------------------------------

def init_ssg(store: ParamStore, c: int, depth: int, kernel: int, rng, prefix: str = "ssg") -> None:
    if kernel % 2 == 0 or kernel < 1:
        raise ConfigError(f"SSG kernel must be odd, got {kernel}")
    if depth < 1:
        raise ConfigError(f"SSG depth must be >= 1, got {depth}")
    for i in range(depth):
        p = f"{prefix}.layer{i}"
        _add_ln(store, f"{p}.ln_in", c)
        _add_linear(store, f"{p}.expand", c, 2 * c, rng)
        _add_ln(store, f"{p}.ln_gate", c)
        # near-identity gate at init: small weights, unit bias
        store.add(f"{p}.conv.w", rng.normal(0.0, INIT_STD, (kernel, c)))
        store.add(f"{p}.conv.b", np.ones(c))
        _add_linear(store, f"{p}.exit", c, c, rng)


def ssg_depth(store: ParamStore, prefix: str = "ssg") -> int:
    d = 0
    while f"{prefix}.layer{d}.expand.w" in store:
        d += 1
    return d


def ssg_gate(x: Tensor, store: ParamStore, layer: str) -> tuple[Tensor, Tensor]:
    """One gating layer's inner step; returns (gated X'_g, first half X_g^1)."""
    c = x.shape[1]
    xg = gelu(_linear(_ln(x, store, f"{layer}.ln_in"), store, f"{layer}.expand"))
    x1, x2 = slice_last(xg, 0, c), slice_last(xg, c, 2 * c)
    gate = conv1d_depthwise(_ln(x2, store, f"{layer}.ln_gate"),
                            store[f"{layer}.conv.w"], store[f"{layer}.conv.b"])
    return mul(x1, gate), x1


def apply_ssg(x: Tensor, store: ParamStore, hw: tuple[int, int], prefix: str = "ssg") -> Tensor:
    """Stacked gating layers on [N, C'] tokens, reshaped to an [h, w, C'] map."""
    h, w = hw
    if x.shape[0] != h * w:
        raise ContractError(f"SSG input has {x.shape[0]} tokens, expected {h}x{w}")
    y = x
    for i in range(ssg_depth(store, prefix)):
        layer = f"{prefix}.layer{i}"
        gated, _ = ssg_gate(y, store, layer)
        y = _linear(gated, store, f"{layer}.exit")
    return reshape(y, (h, w, x.shape[1]))


# ---------------------------------------------------------------------------
# Task interaction, task query gating, heads
# ---------------------------------------------------------------------------

def init_decoder(store: ParamStore, tasks: Sequence[TaskSpec], c: int, ssg_layers: int,
                 ssg_kernel: int, rng) -> None:
    _add_ln(store, "interact.ln", c)
    init_mhsa(store, "interact.attn", c, rng)
    init_smlp(store, "interact.smlp", c, rng)
    init_ssg(store, c, ssg_layers, ssg_kernel, rng)
    for t in tasks:
        p = f"task.{t.name}.query"
        _add_ln(store, f"{p}.ln_q", c)
        _add_ln(store, f"{p}.ln_kv", c)
        init_mhsa(store, f"{p}.attn", c, rng)
        init_smlp(store, f"{p}.smlp", c, rng)
        _add_linear(store, f"task.{t.name}.head", c, t.out_channels, rng)


def task_interaction(deformed: Sequence[Tensor], store: ParamStore, heads: int,
                     attn_log: list | None = None) -> Tensor:
    """Self-attention plus sMLP over the task-major concatenation of all deformed features."""
    if not deformed:
        raise ContractError("task_interaction needs at least one task")
    n, c = deformed[0].shape
    for d in deformed[1:]:
        if d.shape != (n, c):
            raise ContractError(f"deformed features disagree in shape: {d.shape} vs {(n, c)}")
    fused = deformed[0] if len(deformed) == 1 else concat(deformed, axis=0)
    normed = _ln(fused, store, "interact.ln")
    return smlp(mhsa(normed, normed, store, "interact.attn", heads, attn_log),
                store, "interact.smlp")


def task_query_gating(x_q: Tensor, interacted: Tensor, store: ParamStore, task: str,
                      heads: int, hw: tuple[int, int], n_tasks: int | None = None,
                      attn_log: list | None = None) -> Tensor:
    """Query the interacted tokens with one task's deformed feature, add the residual, gate."""
    if n_tasks is not None and interacted.shape[0] != n_tasks * x_q.shape[0]:
        raise ContractError(
            f"interacted feature has {interacted.shape[0]} tokens, expected {n_tasks}x{x_q.shape[0]}")
    p = f"task.{task}.query"
    q = _ln(x_q, store, f"{p}.ln_q")
    kv = _ln(interacted, store, f"{p}.ln_kv")
    attended = mhsa(q, kv, store, f"{p}.attn", heads, attn_log)
    aware = add(x_q, smlp(attended, store, f"{p}.smlp"))
    return apply_ssg(aware, store, hw)


def prediction_head(x: Tensor, task: TaskSpec, store: ParamStore) -> Tensor:
    """1x1 conv to the task's output channels, then bilinear upsampling by 4."""
    h, w, c = x.shape
    y = _linear(reshape(x, (h * w, c)), store, f"task.{task.name}.head")
    return upsample_bilinear(reshape(y, (h, w, task.out_channels)), HEAD_UPSAMPLE)


def decode_all(deformed: Sequence[Tensor], tasks: Sequence[TaskSpec], store: ParamStore,
               heads: int, hw: tuple[int, int], attn_log: list | None = None) -> list[Tensor]:
    if len(deformed) != len(tasks) or not tasks:
        raise ContractError(f"{len(deformed)} deformed features for {len(tasks)} tasks")
    interacted = task_interaction(deformed, store, heads, attn_log)
    preds = []
    for x_q, spec in zip(deformed, tasks):
        gated = task_query_gating(x_q, interacted, store, spec.name, heads, hw, len(tasks), attn_log)
        preds.append(prediction_head(gated, spec, store))
    return preds
