"""Toy four-scale convolutional backbone and multi-scale aggregation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .autodiff import (ConfigError, ParamStore, Tensor, batch_norm_2d, concat, conv2d, gelu,
                       upsample_bilinear)

INIT_STD = 0.02
# (name, stride-2 conv count feeding it, output channels as a multiple of c)
_LAYERS = (("stem1", 1), ("stem2", 1), ("stage2", 2), ("stage3", 4), ("stage4", 8))


@dataclass
class FeaturePyramid:
    stages: list[Tensor]
    aggregated: Tensor | None = None


def init_backbone(store: ParamStore, c: int, rng: np.random.Generator,
                  prefix: str = "backbone") -> None:
    cin = 3
    for name, mult in _LAYERS:
        cout = c * mult
        store.add(f"{prefix}.{name}.w", rng.normal(0.0, INIT_STD, (3, 3, cin, cout)))
        store.add(f"{prefix}.{name}.b", np.zeros(cout))
        store.add_bn(f"{prefix}.{name}.bn", cout)
        cin = cout


def _conv_block(x: Tensor, store: ParamStore, path: str, mode: str) -> Tensor:
    y = gelu(conv2d(x, store[f"{path}.w"], store[f"{path}.b"], stride=2, pad=1))
    # a 1x1 map has no spatial statistics to normalize by; such layers keep
    # their running statistics fixed and behave as in eval mode
    bn_mode = mode if y.shape[0] * y.shape[1] >= 2 else "eval"
    return batch_norm_2d(y, store[f"{path}.bn.gain"], store[f"{path}.bn.bias"],
                         store.bn[f"{path}.bn"], bn_mode)


def check_geometry(h: int, w: int, multiple: int = 16) -> None:
    if h % multiple or w % multiple or h <= 0 or w <= 0:
        raise ConfigError(f"input size {h}x{w} must be divisible by {multiple}")


def backbone_forward(image: Tensor, store: ParamStore, mode: str = "eval",
                     prefix: str = "backbone") -> FeaturePyramid:
    """Four stages at 1/4, 1/8, 1/16, 1/32 resolution with c, 2c, 4c, 8c channels."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ConfigError(f"expected an [H, W, 3] image, got {image.shape}")
    check_geometry(image.shape[0], image.shape[1])
    x = _conv_block(image, store, f"{prefix}.stem1", mode)
    x = _conv_block(x, store, f"{prefix}.stem2", mode)
    stages = [x]
    for name in ("stage2", "stage3", "stage4"):
        x = _conv_block(x, store, f"{prefix}.{name}", mode)
        stages.append(x)
    return FeaturePyramid(stages)


def aggregate_scales(stages: list[Tensor], use_scales: Iterable[int] = (1, 2, 3, 4)) -> Tensor:
    """Upsample the selected stages to stage-1 resolution and concatenate them in stage order."""
    chosen = sorted(set(int(s) for s in use_scales))
    if not chosen:
        raise ConfigError("use_scales must select at least one stage")
    if any(s < 1 or s > len(stages) for s in chosen):
        raise ConfigError(f"use_scales {chosen} outside 1..{len(stages)}")
    h, w = stages[0].shape[:2]
    parts = []
    for s in chosen:
        st = stages[s - 1]
        fy, fx = h // st.shape[0], w // st.shape[1]
        if fy != fx or fy * st.shape[0] != h or fx * st.shape[1] != w:
            raise ConfigError(f"stage {s} of size {st.shape[:2]} does not tile {h}x{w}")
        parts.append(upsample_bilinear(st, fy))
    return parts[0] if len(parts) == 1 else concat(parts, axis=-1)


def aggregated_channels(c: int, use_scales: Iterable[int]) -> int:
    return sum(c * 2 ** (s - 1) for s in set(use_scales))
