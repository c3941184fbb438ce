"""SGD training loop and dataset evaluation."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import ContractError, Tape, make_rng
from .config import RunConfig
from .data import Sample, TaskInfo
from .losses import total_loss
from .metrics import MetricReport, TaskEvaluator, TaskScore, delta_m
from .model import DeMTG
from .tasks import TaskSpec

log = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"loss became {value} at step {step}")
        self.step = step


def num_classes(tasks: Sequence[TaskInfo], default: int = 3) -> int:
    for t in tasks:
        if t.kind == "multiclass-seg":
            return t.channels
    return default


def check_tasks(specs: Sequence[TaskSpec], tasks: Sequence[TaskInfo]) -> None:
    by_name = {t.name: t for t in tasks}
    for s in specs:
        info = by_name.get(s.name)
        if info is None:
            raise ContractError(f"dataset has no task {s.name!r} (has {sorted(by_name)})")
        if info.kind != s.kind or info.channels != s.out_channels:
            raise ContractError(f"task {s.name}: dataset declares {info.kind}/{info.channels}, "
                                f"model expects {s.kind}/{s.out_channels}")


def build_model(cfg: RunConfig, tasks: Sequence[TaskInfo]) -> DeMTG:
    model = DeMTG(cfg.model_config(num_classes(tasks)), seed=cfg.seed)
    check_tasks(model.tasks, tasks)
    return model


def _decays(path: str) -> bool:
    # norm gains and biases are not decayed
    parent, _, leaf = path.rpartition(".")
    return not (leaf in ("gain", "bias") and parent.rsplit(".", 1)[-1].startswith(("ln", "bn")))


@dataclass
class SGD:
    lr: float
    weight_decay: float
    momentum: float = 0.0

    def __post_init__(self):
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, model: DeMTG) -> None:
        store = model.store
        for path, t in list(store.items()):
            g = store.grad(path)
            if self.weight_decay and _decays(path):
                g = g + self.weight_decay * t.data
            if self.momentum:
                v = self.velocity.get(path)
                g = g if v is None else self.momentum * v + g
                self.velocity[path] = g
            store.set(path, t.data - self.lr * g)


def epoch_order(seed: int, n: int, epoch: int) -> np.ndarray:
    return make_rng(seed * 1_000_003 + epoch).permutation(n)


def train(model: DeMTG, samples: Sequence[Sample], cfg: RunConfig,
          on_step: Callable[[dict], None] | None = None) -> list[dict]:
    """Batch-size-1 SGD for ``cfg.optim_steps`` steps; returns one record per step."""
    opt = SGD(cfg.optim_lr, cfg.optim_weight_decay, cfg.optim_momentum)
    names = [t.name for t in model.tasks]
    records = []
    order: np.ndarray = np.empty(0, dtype=np.int64)
    for step in range(1, cfg.optim_steps + 1):
        pos = (step - 1) % len(samples)
        if pos == 0:
            order = epoch_order(cfg.seed, len(samples), (step - 1) // len(samples))
        sample = samples[order[pos]]
        model.store.zero_grad()
        with Tape() as tape:
            preds = model.forward(sample.image, "train")
            loss, parts = total_loss(preds, [sample.labels[n] for n in names], model.tasks)
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteLossError(step, value)
        tape.backward(loss)
        opt.step(model)
        rec = {"step": step, "sample": int(order[pos]), "loss": value, "tasks": parts}
        records.append(rec)
        if on_step is not None:
            on_step(rec)
    return records


def log_line(rec: dict) -> str:
    return json.dumps(rec, sort_keys=False)


def evaluate(model: DeMTG, samples: Sequence[Sample], n_thresholds: int = 255,
             baseline: Sequence[float] | None = None) -> MetricReport:
    evaluators = [TaskEvaluator(t, n_thresholds) for t in model.tasks]
    for s in samples:
        for ev, pred in zip(evaluators, model.forward(s.image, "eval")):
            ev.update(pred.data, s.labels[ev.spec.name])
    report = MetricReport([TaskScore(t.name, t.metric, ev.value())
                           for t, ev in zip(model.tasks, evaluators)])
    if baseline is not None:
        report.delta_m = delta_m(report.scores(), baseline, [t.better for t in model.tasks])
    return report
