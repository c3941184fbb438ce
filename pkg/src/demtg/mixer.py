"""Per-task deformable mixer encoder.

Each task owns an encoder that reduces the shared aggregated map to C'
channels and then applies ``depth`` rounds of channel mixing followed by a
spatial deformable step. The deformable step predicts one (dy, dx) offset
per position, reads the map there bilinearly and mixes channels with a
pointwise weight.
"""
from __future__ import annotations

import numpy as np

from .autodiff import (ConfigError, DimensionError, ParamStore, Tensor, add, add_bias,
                       batch_norm_2d, bilinear_sample, conv2d, gelu, layer_norm, matmul, reshape)

INIT_STD = 0.02


def init_mixer(store: ParamStore, prefix: str, c_in: int, c_prime: int, depth: int,
               rng: np.random.Generator) -> None:
    if c_prime > c_in:
        raise ConfigError(f"reduced width {c_prime} exceeds input width {c_in}")
    if depth < 1:
        raise ConfigError(f"mixer depth must be >= 1, got {depth}")
    store.add(f"{prefix}.reduce.ln.gain", np.ones(c_in))
    store.add(f"{prefix}.reduce.ln.bias", np.zeros(c_in))
    store.add(f"{prefix}.reduce.w", rng.normal(0.0, INIT_STD, (c_in, c_prime)))
    for i in range(depth):
        p = f"{prefix}.level{i}"
        store.add(f"{p}.mix.w", rng.normal(0.0, INIT_STD, (c_prime, c_prime)))
        store.add(f"{p}.mix.b", np.zeros(c_prime))
        store.add_bn(f"{p}.mix.bn", c_prime)
        store.add(f"{p}.offset.w", np.zeros((3, 3, c_prime, 2)))
        store.add(f"{p}.offset.b", np.zeros(2))
        store.add(f"{p}.deform.w", rng.normal(0.0, INIT_STD, (c_prime, c_prime)))
        store.add_bn(f"{p}.deform.bn", c_prime)


def _pointwise(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    h, wd, c = x.shape
    y = matmul(reshape(x, (h * wd, c)), w)
    if b is not None:
        y = add_bias(y, b)
    return reshape(y, (h, wd, w.shape[1]))


def _bn(x: Tensor, store: ParamStore, path: str, mode: str) -> Tensor:
    return batch_norm_2d(x, store[f"{path}.gain"], store[f"{path}.bias"], store.bn[path], mode)


def linear_reduce(x: Tensor, store: ParamStore, prefix: str) -> Tensor:
    """LayerNorm over channels at each position, then a C -> C' projection."""
    w = store[f"{prefix}.reduce.w"]
    if w.shape[1] > x.shape[-1]:
        raise ConfigError(f"reduced width {w.shape[1]} exceeds input width {x.shape[-1]}")
    h, wd, c = x.shape
    flat = layer_norm(reshape(x, (h * wd, c)), store[f"{prefix}.reduce.ln.gain"],
                      store[f"{prefix}.reduce.ln.bias"])
    return reshape(matmul(flat, w), (h, wd, w.shape[1]))


def channel_mixing(x: Tensor, store: ParamStore, level: str, mode: str = "eval") -> Tensor:
    """Pointwise conv, then GELU, then batch norm (activation before normalization)."""
    y = _pointwise(x, store[f"{level}.mix.w"], store[f"{level}.mix.b"])
    return _bn(gelu(y), store, f"{level}.mix.bn", mode)


def _grid(h: int, w: int) -> Tensor:
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")
    return Tensor(np.stack([yy, xx], axis=-1))


def offset_field(x: Tensor, store: ParamStore, level: str) -> Tensor:
    """Per-position (dy, dx) in pixels, predicted by a 3x3 conv."""
    return conv2d(x, store[f"{level}.offset.w"], store[f"{level}.offset.b"], stride=1, pad=1)


def deformed_read(x: Tensor, store: ParamStore, level: str) -> Tensor:
    """Channel-mixed read of ``x`` at each position displaced by its predicted offset."""
    h, w, _ = x.shape
    coords = add(_grid(h, w), offset_field(x, store, level))
    return _pointwise(bilinear_sample(x, coords), store[f"{level}.deform.w"])


def spatial_deformable(x: Tensor, store: ParamStore, level: str, mode: str = "eval") -> Tensor:
    if x.shape[0] < 3 or x.shape[1] < 3:
        raise DimensionError(f"spatial_deformable needs at least 3x3 positions, got {x.shape[:2]}")
    y = deformed_read(x, store, level)
    return add(x, _bn(gelu(y), store, f"{level}.deform.bn", mode))


def mixer_depth(store: ParamStore, prefix: str) -> int:
    d = 0
    while f"{prefix}.level{d}.mix.w" in store:
        d += 1
    return d


def encode_task(x: Tensor, store: ParamStore, prefix: str, mode: str = "eval") -> tuple[Tensor, Tensor]:
    """Returns the flattened deformed feature [N, C'] and its spatial form [h, w, C']."""
    depth = mixer_depth(store, prefix)
    if depth < 1:
        raise ConfigError(f"{prefix}: mixer depth must be >= 1")
    y = linear_reduce(x, store, prefix)
    for i in range(depth):
        level = f"{prefix}.level{i}"
        y = channel_mixing(y, store, level, mode)
        y = spatial_deformable(y, store, level, mode)
    h, w, c = y.shape
    return reshape(y, (h * w, c)), y
