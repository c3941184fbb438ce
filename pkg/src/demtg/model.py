"""Full multi-task network: backbone, per-task deformable mixers, gating decoder."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ConfigError, ParamStore, Tensor, make_rng
from .backbone import aggregate_scales, aggregated_channels, backbone_forward, init_backbone
from .decoder import decode_all, init_decoder
from .mixer import encode_task, init_mixer
from .tasks import TaskSpec, nyud_tasks


@dataclass
class ModelConfig:
    c: int = 8
    scales: tuple[int, ...] = (1, 2, 3, 4)
    c_prime: int = 32
    depth: int = 1
    heads: int = 4
    ssg_depth: int = 1
    ssg_kernel: int = 3
    tasks: list[TaskSpec] = field(default_factory=nyud_tasks)

    @property
    def c_total(self) -> int:
        return aggregated_channels(self.c, self.scales)

    def validate(self) -> None:
        if self.c < 1:
            raise ConfigError("backbone width c must be >= 1")
        if not self.scales or any(s not in (1, 2, 3, 4) for s in self.scales):
            raise ConfigError(f"scales must be a nonempty subset of 1..4, got {self.scales}")
        if self.c_prime > self.c_total:
            raise ConfigError(f"c_prime {self.c_prime} exceeds aggregated width {self.c_total}")
        if self.c_prime % self.heads:
            raise ConfigError(f"c_prime {self.c_prime} is not divisible by {self.heads} heads")
        if self.depth < 1 or self.ssg_depth < 1:
            raise ConfigError("mixer depth and SSG depth must be >= 1")
        if self.ssg_kernel % 2 == 0:
            raise ConfigError(f"SSG kernel must be odd, got {self.ssg_kernel}")
        names = [t.name for t in self.tasks]
        if not names or len(set(names)) != len(names):
            raise ConfigError(f"task names must be unique and nonempty: {names}")


@dataclass
class ForwardResult:
    predictions: list[Tensor]
    deformed: list[Tensor]
    spatial: list[Tensor]
    aggregated: Tensor


class DeMTG:
    """Parameters plus forward pass; batch size is one image of shape [H, W, 3]."""

    def __init__(self, config: ModelConfig, store: ParamStore | None = None, seed: int = 0):
        config.validate()
        self.config = config
        if store is None:
            store = ParamStore()
            rng = make_rng(seed)
            init_backbone(store, config.c, rng)
            for t in config.tasks:
                init_mixer(store, f"task.{t.name}.mixer", config.c_total, config.c_prime,
                           config.depth, rng)
            init_decoder(store, config.tasks, config.c_prime, config.ssg_depth,
                         config.ssg_kernel, rng)
        self.store = store

    @property
    def tasks(self) -> list[TaskSpec]:
        return self.config.tasks

    def run(self, image, mode: str = "eval", attn_log: list | None = None) -> ForwardResult:
        if not isinstance(image, Tensor):
            image = Tensor(np.asarray(image, dtype=np.float64))
        stages = backbone_forward(image, self.store, mode).stages
        shared = aggregate_scales(stages, self.config.scales)
        deformed, spatial = [], []
        for t in self.tasks:
            xq, xs = encode_task(shared, self.store, f"task.{t.name}.mixer", mode)
            deformed.append(xq)
            spatial.append(xs)
        hw = shared.shape[:2]
        preds = decode_all(deformed, self.tasks, self.store, self.config.heads, hw, attn_log)
        return ForwardResult(preds, deformed, spatial, shared)

    def forward(self, image, mode: str = "eval") -> list[Tensor]:
        return self.run(image, mode).predictions
