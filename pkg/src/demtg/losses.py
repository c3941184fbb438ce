"""Task losses and their weighted multi-task sum."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .autodiff import ContractError, Tensor, _make, add, scale
from .tasks import TaskSpec


class DataError(ValueError):
    """Labels or targets outside the domain a loss or metric accepts."""


class DegenerateInputError(ValueError):
    """Nothing left to average over (e.g. every pixel ignored)."""


def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_label: int | None = None) -> Tensor:
    """Mean softmax cross-entropy over non-ignored pixels of [H, W, K] logits."""
    K = logits.shape[-1]
    labels = np.asarray(labels).astype(np.int64)
    if labels.shape != logits.shape[:-1]:
        raise DataError(f"cross_entropy: labels {labels.shape} vs logits {logits.shape}")
    valid = np.ones(labels.shape, bool) if ignore_label is None else labels != ignore_label
    bad = valid & ((labels < 0) | (labels >= K))
    if bad.any():
        raise DataError(f"cross_entropy: label {int(labels[bad][0])} outside [0, {K})")
    count = int(valid.sum())
    if count == 0:
        raise DegenerateInputError("cross_entropy: every pixel is ignored")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    safe = np.where(valid, labels, 0)
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    loss = -(picked * valid).sum() / count

    def vjp(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe[..., None], 1.0, axis=-1)
        return (float(g) * (p - onehot) * valid[..., None] / count,)

    return _make(np.array(loss), (logits,), vjp, "cross_entropy")


def l1_loss(pred: Tensor, target: np.ndarray, valid_mask: np.ndarray | None = None) -> Tensor:
    """Mean absolute error over valid entries; subgradient 0 where pred equals target."""
    target = np.asarray(target, dtype=np.float64)
    if target.shape != pred.shape:
        raise DataError(f"l1_loss: target {target.shape} vs prediction {pred.shape}")
    mask = np.ones(pred.shape) if valid_mask is None else np.broadcast_to(
        np.asarray(valid_mask, dtype=np.float64).reshape(
            np.shape(valid_mask) + (1,) * (pred.ndim - np.ndim(valid_mask))), pred.shape)
    count = mask.sum()
    if count == 0:
        raise DegenerateInputError("l1_loss: empty valid mask")
    diff = pred.data - target

    def vjp(g):
        return (float(g) * np.sign(diff) * mask / count,)

    return _make(np.array((np.abs(diff) * mask).sum() / count), (pred,), vjp, "l1")


def bce_logits(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean binary cross-entropy on logits, ``max(z,0) - z*y + log(1+exp(-|z|))``."""
    y = np.asarray(target, dtype=np.float64)
    if y.shape != logits.shape:
        if y.shape + (1,) == logits.shape:
            y = y[..., None]
        else:
            raise DataError(f"bce_logits: target {y.shape} vs logits {logits.shape}")
    if not np.isin(y, (0.0, 1.0)).all():
        raise DataError("bce_logits: targets must be 0 or 1")
    z = logits.data
    n = z.size
    loss = (np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))).sum() / n

    def vjp(g):
        sig = 0.5 * (1.0 + np.tanh(0.5 * z))
        return (float(g) * (sig - y) / n,)

    return _make(np.array(loss), (logits,), vjp, "bce")


def task_loss(pred: Tensor, label: np.ndarray, spec: TaskSpec,
              valid_mask: np.ndarray | None = None) -> Tensor:
    if spec.kind == "multiclass-seg":
        return cross_entropy(pred, label, spec.ignore_label)
    if spec.kind == "binary-map":
        return bce_logits(pred, label)
    label = np.asarray(label, dtype=np.float64)
    if label.ndim == pred.ndim - 1:
        label = label[..., None]
    return l1_loss(pred, label, valid_mask)


def total_loss(predictions: Sequence[Tensor], labels: Sequence[np.ndarray],
               specs: Sequence[TaskSpec]) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of per-task losses; also returns the unweighted breakdown."""
    if not (len(predictions) == len(labels) == len(specs)) or not specs:
        raise ContractError(
            f"total_loss: {len(predictions)} predictions, {len(labels)} labels, {len(specs)} specs")
    total = None
    parts = {}
    for pred, lab, spec in zip(predictions, labels, specs):
        lt = task_loss(pred, lab, spec)
        parts[spec.name] = lt.item()
        term = scale(lt, spec.alpha)
        total = term if total is None else add(total, term)
    return total, parts
