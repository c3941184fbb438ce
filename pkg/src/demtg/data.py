"""Synthetic multi-task scenes and the binary dataset container.

Container layout (all little-endian)::

    "DMTG" | u32 version | u32 n_samples | u32 H | u32 W | u32 n_tasks
    n_tasks x (u8 name_len, name bytes, u8 kind, u8 channels)
    n_samples x (image f32[H,W,3], then per task its label map)

Segmentation and binary maps are u16[H,W]; regression maps are
f32[H,W,channels]. For segmentation tasks ``channels`` holds the class count.
"""
from __future__ import annotations

import colorsys
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ConfigError, make_rng

MAGIC = b"DMTG"
VERSION = 1
KIND_CODES = {"multiclass-seg": 0, "binary-map": 1, "regression-1ch": 2, "regression-3ch": 3}
KIND_NAMES = {v: k for k, v in KIND_CODES.items()}
BACKGROUND_DEPTH = 5.0
NOISE_AMPLITUDE = 0.05
SYNTH_MULTIPLE = 32
BLOCK = 4
SHAPE_TRIES = 50
EDGE_OFFSET = BLOCK // 2
MAX_SHAPE_FRAC = 0.7


class DatasetFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class TaskInfo:
    name: str
    kind: str
    channels: int

    @property
    def is_integer(self) -> bool:
        return self.kind in ("multiclass-seg", "binary-map")

    @property
    def map_channels(self) -> int:
        return 1 if self.is_integer else self.channels


@dataclass
class Sample:
    image: np.ndarray
    labels: dict[str, np.ndarray]
    masks: dict[str, np.ndarray] = field(default_factory=dict)


def nyud_task_table(num_classes: int) -> list[TaskInfo]:
    return [TaskInfo("semseg", "multiclass-seg", num_classes),
            TaskInfo("depth", "regression-1ch", 1),
            TaskInfo("normal", "regression-3ch", 3),
            TaskInfo("bound", "binary-map", 1)]


def palette(num_classes: int) -> np.ndarray:
    """Evenly spaced hues, one RGB colour per class."""
    return np.array([colorsys.hsv_to_rgb(k / num_classes, 0.75, 0.9) for k in range(num_classes)])


def boundary_map(seg: np.ndarray) -> np.ndarray:
    """1 where a 4-neighbour carries a different label."""
    b = np.zeros(seg.shape, dtype=bool)
    dv = seg[1:, :] != seg[:-1, :]
    dh = seg[:, 1:] != seg[:, :-1]
    b[1:, :] |= dv
    b[:-1, :] |= dv
    b[:, 1:] |= dh
    b[:, :-1] |= dh
    return b.astype(np.uint16)


def _runs_ok(blocks: np.ndarray) -> bool:
    """True when every interior run of equal labels along rows and columns spans >= 2 blocks."""
    for grid in (blocks, blocks.T):
        for row in grid:
            cuts = np.flatnonzero(np.diff(row)) + 1
            edges = np.concatenate([[0], cuts, [row.size]])
            lengths = np.diff(edges)
            if lengths.size > 2 and (lengths[1:-1] < 2).any():
                return False
    return True


def _shape_mask(rng: np.random.Generator, gh: int, gw: int) -> np.ndarray:
    kind = rng.integers(2)
    hb = int(rng.integers(2, max(3, int(gh * MAX_SHAPE_FRAC) + 1)))
    wb = int(rng.integers(2, max(3, int(gw * MAX_SHAPE_FRAC) + 1)))
    hb, wb = min(hb, gh - 2), min(wb, gw - 2)
    y0 = int(rng.integers(1, gh - hb))
    x0 = int(rng.integers(1, gw - wb))
    jj, ii = np.mgrid[0:gh, 0:gw] + 0.5
    if kind == 0:
        return (jj > y0) & (jj < y0 + hb) & (ii > x0) & (ii < x0 + wb)
    cy, cx = y0 + hb / 2, x0 + wb / 2
    return ((jj - cy) / (hb / 2)) ** 2 + ((ii - cx) / (wb / 2)) ** 2 <= 1.0


def synth_scene(seed: int, H: int, W: int, K: int, n_shapes: int | None = None) -> Sample:
    """One scene of rectangles and ellipses with consistent seg/depth/normal/boundary labels.

    Every shape gets its own class, depth and surface normal, so depth and
    normal change exactly where the segmentation does. Shapes are drawn on
    a grid of 4x4 pixel blocks offset by 2 pixels, which puts every label
    edge in the middle of a stride-4 feature cell, and no label run is
    thinner than two blocks. Boundaries are then resolvable by a prediction
    upsampled from 1/4 resolution.
    """
    if H % SYNTH_MULTIPLE or W % SYNTH_MULTIPLE or H <= 0 or W <= 0:
        raise ConfigError(f"scene size {H}x{W} must be divisible by {SYNTH_MULTIPLE}")
    if K < 2:
        raise ConfigError(f"need at least 2 classes, got {K}")
    rng = make_rng(seed)
    if n_shapes is None:
        # a fixed shape count keeps per-image statistics alike, which keeps
        # eval-mode batch norm close to what training saw
        n_shapes = min(K - 1, 3)
    if n_shapes > K - 1:
        raise ConfigError(f"{n_shapes} shapes need at least {n_shapes + 1} classes")
    classes = rng.choice(np.arange(1, K), size=n_shapes, replace=False)
    # painted far to near so nearer shapes occlude
    depths = np.sort(rng.uniform(1.0, 4.0, size=n_shapes))[::-1]

    gh, gw = H // BLOCK - 1, W // BLOCK - 1
    blocks = np.zeros((gh, gw), dtype=np.uint16)
    normals = np.zeros((K, 3))
    normals[0] = (0.0, 0.0, 1.0)
    depth_of = np.full(K, BACKGROUND_DEPTH)
    for cls, d in zip(classes, depths):
        for _ in range(SHAPE_TRIES):
            trial = np.where(_shape_mask(rng, gh, gw), cls, blocks).astype(np.uint16)
            if _runs_ok(trial):
                blocks = trial
                break
        depth_of[cls] = d
        n = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), 1.0])
        normals[cls] = n / np.linalg.norm(n)

    seg = np.zeros((H, W), dtype=np.uint16)
    o = EDGE_OFFSET
    seg[o:o + H - BLOCK, o:o + W - BLOCK] = np.kron(blocks, np.ones((BLOCK, BLOCK), dtype=np.uint16))
    noise = rng.uniform(-NOISE_AMPLITUDE, NOISE_AMPLITUDE, size=(H, W, 3))
    image = np.clip(palette(K)[seg] + noise, 0.0, 1.0).astype(np.float32)
    labels = {
        "semseg": seg,
        "depth": depth_of[seg][..., None].astype(np.float32),
        "normal": normals[seg].astype(np.float32),
        "bound": boundary_map(seg),
    }
    return Sample(image, labels)


def synth_dataset(seed: int, n: int, H: int, W: int, K: int) -> list[Sample]:
    """``n`` scenes; sample ``i`` is drawn from a seed derived from (seed, i)."""
    seeds = np.random.SeedSequence(seed).spawn(n)
    return [synth_scene(int(s.generate_state(1)[0]), H, W, K) for s in seeds]


# ---------------------------------------------------------------------------
# Binary container
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sIIIII")


def payload_bytes_per_sample(H: int, W: int, tasks: list[TaskInfo]) -> int:
    n = H * W * 3 * 4
    for t in tasks:
        n += H * W * (2 if t.is_integer else 4 * t.channels)
    return n


def header_bytes(tasks: list[TaskInfo]) -> int:
    return _HEADER.size + sum(3 + len(t.name.encode()) for t in tasks)


def write_dataset(samples: list[Sample], path, tasks: list[TaskInfo]) -> None:
    if not samples:
        raise ValueError("write_dataset: no samples")
    H, W = samples[0].image.shape[:2]
    out = bytearray(_HEADER.pack(MAGIC, VERSION, len(samples), H, W, len(tasks)))
    for t in tasks:
        name = t.name.encode()
        if len(name) > 255:
            raise ValueError(f"task name too long: {t.name}")
        out += struct.pack("<B", len(name)) + name + struct.pack("<BB", KIND_CODES[t.kind], t.channels)
    for i, s in enumerate(samples):
        if s.image.shape != (H, W, 3):
            raise ValueError(f"sample {i}: image {s.image.shape}, expected {(H, W, 3)}")
        out += np.ascontiguousarray(s.image, dtype="<f4").tobytes()
        for t in tasks:
            lab = np.asarray(s.labels[t.name])
            if t.is_integer:
                out += np.ascontiguousarray(lab.reshape(H, W), dtype="<u2").tobytes()
            else:
                out += np.ascontiguousarray(lab.reshape(H, W, t.channels), dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def read_dataset(path) -> tuple[list[Sample], list[TaskInfo]]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DatasetFormatError("truncated header", len(raw))
    magic, version, n, H, W, n_tasks = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise DatasetFormatError(f"unsupported version {version}", 4)
    off = _HEADER.size
    tasks = []
    for _ in range(n_tasks):
        if off + 1 > len(raw):
            raise DatasetFormatError("truncated task table", off)
        ln = raw[off]
        if off + 1 + ln + 2 > len(raw):
            raise DatasetFormatError("truncated task table", off)
        name = raw[off + 1:off + 1 + ln].decode()
        kind_code, ch = raw[off + 1 + ln], raw[off + 2 + ln]
        if kind_code not in KIND_NAMES:
            raise DatasetFormatError(f"unknown task kind {kind_code}", off + 1 + ln)
        tasks.append(TaskInfo(name, KIND_NAMES[kind_code], ch))
        off += 3 + ln
    expected = off + n * payload_bytes_per_sample(H, W, tasks)
    if len(raw) != expected:
        where = min(len(raw), expected)
        raise DatasetFormatError(f"file is {len(raw)} bytes, header implies {expected}", where)
    samples = []
    for _ in range(n):
        img = np.frombuffer(raw, dtype="<f4", count=H * W * 3, offset=off).reshape(H, W, 3)
        off += img.nbytes
        labels = {}
        for t in tasks:
            if t.is_integer:
                lab = np.frombuffer(raw, dtype="<u2", count=H * W, offset=off).reshape(H, W)
            else:
                lab = np.frombuffer(raw, dtype="<f4", count=H * W * t.channels,
                                    offset=off).reshape(H, W, t.channels)
            off += lab.nbytes
            labels[t.name] = lab.astype(lab.dtype.newbyteorder("="))
        samples.append(Sample(img.astype(np.float32), labels))
    return samples, tasks
