"""Per-task descriptors: output arity, loss weight, metric and its direction."""
from __future__ import annotations

from dataclasses import dataclass

from .autodiff import ConfigError

KINDS = ("multiclass-seg", "binary-map", "regression-1ch", "regression-3ch")
METRIC_DIRECTION = {
    "mIoU": "higher",
    "odsF": "higher",
    "maxF": "higher",
    "rmse": "lower",
    "aErr": "lower",
    "mErr": "lower",
}


@dataclass(frozen=True)
class TaskSpec:
    name: str
    kind: str
    out_channels: int
    alpha: float
    metric: str
    better: str
    ignore_label: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"task {self.name}: unknown kind {self.kind!r}")
        if self.alpha <= 0:
            raise ConfigError(f"task {self.name}: alpha must be positive, got {self.alpha}")
        if METRIC_DIRECTION.get(self.metric) != self.better:
            raise ConfigError(f"task {self.name}: metric {self.metric} is {METRIC_DIRECTION.get(self.metric)}"
                              f"-better, not {self.better}")
        if self.out_channels < 1:
            raise ConfigError(f"task {self.name}: out_channels must be >= 1")


# Loss weights follow the published NYUD-v2 / PASCAL-Context settings; depth
# has no published weight and uses 1.0.
DEFAULT_ALPHA = {
    "semseg": 1.0,
    "partseg": 2.0,
    "sal": 5.0,
    "normal": 10.0,
    "bound": 50.0,
    "depth": 1.0,
}

IGNORE_LABEL = 255


def default_task(name: str, num_classes: int = 3, alpha: float | None = None) -> TaskSpec:
    """Standard descriptor for one of the known dense-prediction tasks."""
    a = DEFAULT_ALPHA.get(name) if alpha is None else alpha
    if name in ("semseg", "partseg"):
        return TaskSpec(name, "multiclass-seg", num_classes, a, "mIoU", "higher", IGNORE_LABEL)
    if name == "depth":
        return TaskSpec(name, "regression-1ch", 1, a, "rmse", "lower")
    if name == "normal":
        return TaskSpec(name, "regression-3ch", 3, a, "mErr", "lower")
    if name == "bound":
        return TaskSpec(name, "binary-map", 1, a, "odsF", "higher")
    if name == "sal":
        return TaskSpec(name, "binary-map", 1, a, "maxF", "higher")
    raise ConfigError(f"unknown task {name!r}")


def nyud_tasks(num_classes: int = 3) -> list[TaskSpec]:
    return [default_task(n, num_classes) for n in ("semseg", "depth", "normal", "bound")]
