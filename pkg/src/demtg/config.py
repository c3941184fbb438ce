"""Run configuration in line-based ``section.key = value`` text form."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .autodiff import ConfigError
from .model import ModelConfig
from .tasks import DEFAULT_ALPHA, TaskSpec, default_task


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(" ", "").split(",") if v)


def _names(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


@dataclass
class RunConfig:
    seed: int = 7
    backbone_c: int = 8
    backbone_scales: tuple[int, ...] = (1, 2, 3, 4)
    model_c_prime: int = 32
    model_depth_d: int = 1
    model_heads: int = 4
    model_ssg_depth: int = 1
    model_ssg_kernel: int = 3
    tasks_names: tuple[str, ...] = ("semseg", "depth", "normal", "bound")
    alpha: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_ALPHA))
    optim_lr: float = 1e-3
    optim_weight_decay: float = 5e-4
    optim_momentum: float = 0.0
    optim_steps: int = 500
    eval_thresholds: int = 255
    data_path: str = "train.dmtg"
    output_path: str = "run"

    # text key -> (attribute, parser)
    _KEYS = {
        "seed": ("seed", int),
        "backbone.c": ("backbone_c", int),
        "backbone.scales": ("backbone_scales", _ints),
        "model.c_prime": ("model_c_prime", int),
        "model.depth_d": ("model_depth_d", int),
        "model.heads": ("model_heads", int),
        "model.ssg_depth": ("model_ssg_depth", int),
        "model.ssg_kernel": ("model_ssg_kernel", int),
        "tasks.names": ("tasks_names", _names),
        "optim.lr": ("optim_lr", float),
        "optim.weight_decay": ("optim_weight_decay", float),
        "optim.momentum": ("optim_momentum", float),
        "optim.steps": ("optim_steps", int),
        "eval.thresholds": ("eval_thresholds", int),
        "data.path": ("data_path", str),
        "output.path": ("output_path", str),
    }

    @classmethod
    def from_text(cls, text: str) -> RunConfig:
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key.startswith("tasks.alpha."):
                name = key[len("tasks.alpha."):]
                if name not in DEFAULT_ALPHA:
                    raise ConfigError(f"line {lineno}: unknown task in {key!r}")
                cfg.alpha[name] = float(value)
                continue
            if key not in cls._KEYS:
                raise ConfigError(f"line {lineno}: unknown config key {key!r}")
            attr, parse = cls._KEYS[key]
            try:
                setattr(cfg, attr, parse(value))
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: bad value for {key}: {value!r}") from exc
        return cfg

    @classmethod
    def load(cls, path) -> RunConfig:
        return cls.from_text(Path(path).read_text())

    def to_text(self) -> str:
        lines = []
        for key, (attr, _) in self._KEYS.items():
            v = getattr(self, attr)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{key} = {v}")
        for name, a in self.alpha.items():
            lines.append(f"tasks.alpha.{name} = {a!r}")
        return "\n".join(lines) + "\n"

    def task_specs(self, num_classes: int) -> list[TaskSpec]:
        return [default_task(n, num_classes, self.alpha[n]) for n in self.tasks_names]

    def model_config(self, num_classes: int) -> ModelConfig:
        return ModelConfig(
            c=self.backbone_c,
            scales=tuple(self.backbone_scales),
            c_prime=self.model_c_prime,
            depth=self.model_depth_d,
            heads=self.model_heads,
            ssg_depth=self.model_ssg_depth,
            ssg_kernel=self.model_ssg_kernel,
            tasks=self.task_specs(num_classes),
        )

