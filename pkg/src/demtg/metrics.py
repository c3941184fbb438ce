"""Dense-prediction metrics with mergeable accumulators, and the multi-task Δm score.

Every accumulator supports ``merge``: evaluating disjoint sample sets
separately and merging gives exactly the sequential result.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .losses import DataError
from .tasks import TaskSpec

N_THRESHOLDS = 255


class ConfusionMatrix:
    """Accumulated K×K counts, rows are ground truth, columns predictions."""

    def __init__(self, num_classes: int, ignore_label: int | None = None):
        self.K = num_classes
        self.ignore_label = ignore_label
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred: np.ndarray, gt: np.ndarray) -> None:
        pred = np.asarray(pred).astype(np.int64).ravel()
        gt = np.asarray(gt).astype(np.int64).ravel()
        keep = np.ones(gt.shape, bool) if self.ignore_label is None else gt != self.ignore_label
        pred, gt = pred[keep], gt[keep]
        if ((gt < 0) | (gt >= self.K) | (pred < 0) | (pred >= self.K)).any():
            raise DataError(f"label outside [0, {self.K})")
        self.counts += np.bincount(gt * self.K + pred, minlength=self.K ** 2).reshape(self.K, self.K)

    def merge(self, other: ConfusionMatrix) -> ConfusionMatrix:
        self.counts += other.counts
        return self

    def iou_per_class(self) -> np.ndarray:
        tp = np.diag(self.counts).astype(np.float64)
        fp = self.counts.sum(axis=0) - tp
        fn = self.counts.sum(axis=1) - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            return tp / (tp + fp + fn)

    def miou(self) -> float:
        # only classes that occur in the ground truth take part in the mean
        present = self.counts.sum(axis=1) > 0
        if not present.any():
            return float("nan")
        return float(self.iou_per_class()[present].mean())


def miou(pred_labels: np.ndarray, gt: np.ndarray, num_classes: int,
         ignore_label: int | None = None) -> float:
    cm = ConfusionMatrix(num_classes, ignore_label)
    cm.update(pred_labels, gt)
    return cm.miou()


def _unit(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norm = np.linalg.norm(v, axis=-1)
    ok = norm > 0
    out = np.zeros_like(v)
    out[ok] = v[ok] / norm[ok][:, None]
    return out, ok


class RegressionAccumulator:
    """Running sums for rmse, aErr (mean absolute) and mErr (mean angle in degrees)."""

    def __init__(self, kind: str):
        if kind not in ("rmse", "aErr", "mErr"):
            raise ValueError(f"unknown regression metric {kind!r}")
        self.kind = kind
        # per-update partial sums, totalled with fsum so that merged and
        # sequential evaluation round identically
        self.parts: list[float] = []
        self.count = 0

    @property
    def total(self) -> float:
        return math.fsum(self.parts)

    def update(self, pred: np.ndarray, gt: np.ndarray, valid: np.ndarray | None = None) -> None:
        pred = np.asarray(pred, dtype=np.float64)
        gt = np.asarray(gt, dtype=np.float64)
        if pred.shape != gt.shape:
            raise DataError(f"prediction {pred.shape} vs ground truth {gt.shape}")
        if self.kind == "mErr":
            p, okp = _unit(pred.reshape(-1, pred.shape[-1]))
            g, okg = _unit(gt.reshape(-1, gt.shape[-1]))
            ok = okp & okg
            if valid is not None:
                ok &= np.asarray(valid, bool).ravel()
            cos = np.clip((p[ok] * g[ok]).sum(axis=1), -1.0, 1.0)
            self.parts.append(math.fsum(np.degrees(np.arccos(cos))))
            self.count += int(ok.sum())
            return
        d = (pred - gt).ravel()
        if valid is not None:
            d = d[np.broadcast_to(np.asarray(valid, bool).reshape(
                np.shape(valid) + (1,) * (pred.ndim - np.ndim(valid))), pred.shape).ravel()]
        self.parts.append(math.fsum(d * d if self.kind == "rmse" else np.abs(d)))
        self.count += d.size

    def merge(self, other: RegressionAccumulator) -> RegressionAccumulator:
        self.parts.extend(other.parts)
        self.count += other.count
        return self

    def value(self) -> float:
        if self.count == 0:
            return float("nan")
        mean = self.total / self.count
        return float(np.sqrt(mean)) if self.kind == "rmse" else float(mean)


def regression_errors(pred: np.ndarray, gt: np.ndarray, kind: str) -> float:
    acc = RegressionAccumulator(kind)
    acc.update(pred, gt)
    return acc.value()


def thresholds(n: int = N_THRESHOLDS) -> np.ndarray:
    """``n`` uniform thresholds strictly inside (0, 1); a pixel is positive when prob >= t."""
    return np.arange(1, n + 1) / (n + 1)


class FMeasureAccumulator:
    """Per-threshold pixel counts pooled over a dataset."""

    def __init__(self, n_thresholds: int = N_THRESHOLDS):
        self.t = thresholds(n_thresholds)
        self.tp = np.zeros(n_thresholds, dtype=np.int64)
        self.fp = np.zeros(n_thresholds, dtype=np.int64)
        self.n_pos = 0

    def update(self, prob: np.ndarray, gt: np.ndarray) -> None:
        prob = np.asarray(prob, dtype=np.float64).ravel()
        gt = np.asarray(gt).ravel().astype(bool)
        if prob.shape != gt.shape:
            raise DataError("probability map and ground truth differ in size")
        if (prob < 0).any() or (prob > 1).any() or np.isnan(prob).any():
            raise DataError("probabilities must lie in [0, 1]")
        pos = np.sort(prob[gt])
        neg = np.sort(prob[~gt])
        self.tp += pos.size - np.searchsorted(pos, self.t, side="left")
        self.fp += neg.size - np.searchsorted(neg, self.t, side="left")
        self.n_pos += int(pos.size)

    def merge(self, other: FMeasureAccumulator) -> FMeasureAccumulator:
        self.tp += other.tp
        self.fp += other.fp
        self.n_pos += other.n_pos
        return self

    def f_curve(self) -> np.ndarray:
        tp = self.tp.astype(np.float64)
        pred_pos = tp + self.fp
        with np.errstate(invalid="ignore", divide="ignore"):
            precision = np.where(pred_pos > 0, tp / pred_pos, 0.0)
            recall = tp / self.n_pos if self.n_pos else np.zeros_like(tp)
            denom = precision + recall
            return np.where(denom > 0, 2 * precision * recall / np.where(denom > 0, denom, 1), 0.0)

    def value(self) -> float:
        return float(self.f_curve().max())


def f_measure(pred_prob: np.ndarray, gt: np.ndarray, mode: str = "maxF",
              n_thresholds: int = N_THRESHOLDS) -> float:
    """Best F1 over a shared threshold sweep.

    ``odsF`` here is the pixel-wise simplification (no distance-tolerant
    boundary matching), so both modes evaluate the same curve.
    """
    if mode not in ("odsF", "maxF"):
        raise ValueError(f"unknown F-measure mode {mode!r}")
    acc = FMeasureAccumulator(n_thresholds)
    acc.update(pred_prob, gt)
    return acc.value()


def delta_m(multi: Sequence[float], single: Sequence[float], better: Sequence[str]) -> float:
    """Mean relative change vs single-task scores in percent, positive meaning better."""
    if not (len(multi) == len(single) == len(better)) or not multi:
        raise ValueError("delta_m: score vectors must be nonempty and of equal length")
    terms = []
    for m, s, b in zip(multi, single, better):
        if s == 0:
            raise ZeroDivisionError("delta_m: single-task score is zero")
        if b not in ("higher", "lower"):
            raise ValueError(f"delta_m: direction must be 'higher' or 'lower', got {b!r}")
        term = (m - s) / s * 100.0
        terms.append(-term if b == "lower" else term)
    return float(np.mean(terms))


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

@dataclass
class TaskScore:
    name: str
    metric: str
    score: float


@dataclass
class MetricReport:
    tasks: list[TaskScore] = field(default_factory=list)
    delta_m: float | None = None

    def scores(self) -> list[float]:
        return [t.score for t in self.tasks]

    def to_dict(self) -> dict:
        out = {"tasks": [{"name": t.name, "metric": t.metric, "score": round(t.score, 4)}
                         for t in self.tasks]}
        if self.delta_m is not None:
            out["delta_m"] = round(self.delta_m, 4)
        return out

    def to_json(self) -> str:
        # fixed 4-decimal rendering; json.dumps would drop trailing zeros
        lines = []
        for t in self.tasks:
            lines.append(f'    {{"name": {json.dumps(t.name)}, "metric": {json.dumps(t.metric)}, '
                         f'"score": {t.score:.4f}}}')
        body = '{\n  "tasks": [\n' + ",\n".join(lines) + "\n  ]"
        if self.delta_m is not None:
            body += f',\n  "delta_m": {self.delta_m:.4f}'
        return body + "\n}\n"

    @classmethod
    def from_json(cls, text: str) -> MetricReport:
        raw = json.loads(text)
        return cls([TaskScore(t["name"], t["metric"], float(t["score"])) for t in raw["tasks"]],
                   raw.get("delta_m"))


class TaskEvaluator:
    """Accumulates one task's metric over a dataset from raw model outputs."""

    def __init__(self, spec: TaskSpec, n_thresholds: int = N_THRESHOLDS):
        self.spec = spec
        if spec.metric == "mIoU":
            self.acc = ConfusionMatrix(spec.out_channels, spec.ignore_label)
        elif spec.metric in ("odsF", "maxF"):
            self.acc = FMeasureAccumulator(n_thresholds)
        else:
            self.acc = RegressionAccumulator(spec.metric)

    def update(self, output: np.ndarray, label: np.ndarray) -> None:
        if self.spec.metric == "mIoU":
            self.acc.update(output.argmax(axis=-1), label)
        elif self.spec.metric in ("odsF", "maxF"):
            prob = 0.5 * (1.0 + np.tanh(0.5 * output[..., 0]))
            self.acc.update(prob, label)
        else:
            label = np.asarray(label, dtype=np.float64)
            if label.ndim == output.ndim - 1:
                label = label[..., None]
            self.acc.update(output, label)

    def merge(self, other: TaskEvaluator) -> TaskEvaluator:
        self.acc.merge(other.acc)
        return self

    def value(self) -> float:
        return self.acc.miou() if self.spec.metric == "mIoU" else self.acc.value()
