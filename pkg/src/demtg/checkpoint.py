"""Binary checkpoints: named float64 parameter and buffer records plus the run config.

Layout (little-endian)::

    "DMTGCKPT" | u32 version | u32 n_records
    n_records x (u16 name_len, name, u8 kind, u8 ndim, u32 dims[ndim], f64 data)
    u32 config_len | config text (utf-8)

``kind`` is 0 for a trainable parameter, 1 for a batch-norm running statistic.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .autodiff import ParamStore
from .data import DatasetFormatError

MAGIC = b"DMTGCKPT"
VERSION = 1
PARAM, BUFFER = 0, 1


def _record(name: str, kind: int, arr: np.ndarray) -> bytes:
    nb = name.encode()
    head = struct.pack("<H", len(nb)) + nb + struct.pack("<BB", kind, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def save_checkpoint(path, store: ParamStore, config_text: str = "") -> None:
    records = [_record(n, PARAM, t.data) for n, t in store.items()]
    records += [_record(n, BUFFER, a) for n, a in store.buffers().items()]
    cfg = config_text.encode()
    blob = MAGIC + struct.pack("<II", VERSION, len(records)) + b"".join(records)
    blob += struct.pack("<I", len(cfg)) + cfg
    Path(path).write_bytes(blob)


def _need(raw: bytes, off: int, n: int, what: str) -> None:
    if off + n > len(raw):
        raise DatasetFormatError(f"truncated checkpoint while reading {what}", off)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray], str]:
    """Returns (parameters, buffers, config text)."""
    raw = Path(path).read_bytes()
    _need(raw, 0, 16, "header")
    if raw[:8] != MAGIC:
        raise DatasetFormatError(f"bad checkpoint magic {raw[:8]!r}", 0)
    version, n = struct.unpack_from("<II", raw, 8)
    if version != VERSION:
        raise DatasetFormatError(f"unsupported checkpoint version {version}", 8)
    off = 16
    params, buffers = {}, {}
    for _ in range(n):
        _need(raw, off, 2, "record name length")
        (ln,) = struct.unpack_from("<H", raw, off)
        off += 2
        _need(raw, off, ln + 2, "record header")
        name = raw[off:off + ln].decode()
        kind, ndim = raw[off + ln], raw[off + ln + 1]
        off += ln + 2
        _need(raw, off, 4 * ndim, "record shape")
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        _need(raw, off, 8 * count, f"data of {name}")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
        off += 8 * count
        (params if kind == PARAM else buffers)[name] = arr
    _need(raw, off, 4, "config length")
    (cl,) = struct.unpack_from("<I", raw, off)
    off += 4
    _need(raw, off, cl, "config text")
    return params, buffers, raw[off:off + cl].decode()


def restore_into(store: ParamStore, params: dict[str, np.ndarray],
                 buffers: dict[str, np.ndarray]) -> None:
    """Copy checkpoint arrays into an already-initialized store of the same layout."""
    missing = set(store.params) ^ set(params)
    if missing:
        raise KeyError(f"checkpoint and model disagree on parameters: {sorted(missing)[:5]}")
    for name, arr in params.items():
        store.set(name, arr)
    for name, arr in buffers.items():
        store.load_buffer(name, arr)
