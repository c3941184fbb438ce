"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the active :class:`Tape` (entered as a
context manager) whenever one of their operands is tracked, i.e. is a
parameter with ``requires_grad`` or the output of an earlier recorded op.
Outside a tape everything is evaluated eagerly and nothing is recorded.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "DimensionError",
    "ConfigError",
    "ContractError",
    "Tensor",
    "Tape",
    "ParamStore",
    "BatchNormState",
    "make_rng",
    "broken_rules",
    "matmul",
    "transpose",
    "elementwise",
    "add",
    "sub",
    "mul",
    "scale",
    "add_bias",
    "linear",
    "reshape",
    "concat",
    "slice_last",
    "sum_all",
    "mean_all",
    "softmax_lastdim",
    "gelu",
    "layer_norm",
    "batch_norm_2d",
    "conv2d",
    "conv1d_depthwise",
    "bilinear_sample",
    "upsample_bilinear",
    "backward",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """An operation or model was configured with invalid hyperparameters."""


class ContractError(RuntimeError):
    """A calling contract (not a shape rule) was violated."""


# Gradient rules named here return a corrupted vector-Jacobian product. Only
# used by the gradient-check negative control.
_BROKEN: set[str] = set()


class broken_rules:
    """Context manager that deliberately corrupts the named gradient rules."""

    def __init__(self, *names: str):
        self.names = set(names)

    def __enter__(self):
        self._saved = set(_BROKEN)
        _BROKEN.update(self.names)
        return self

    def __exit__(self, *exc):
        _BROKEN.clear()
        _BROKEN.update(self._saved)
        return False


class Tensor:
    """Immutable n-dimensional float64 array with optional gradient tracking."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        self.data = arr
        self._init_meta(requires_grad, name)

    def _init_meta(self, requires_grad: bool, name: str | None) -> None:
        self.requires_grad = requires_grad
        self.name = name
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> Tensor:
        # op outputs own their buffer already; skip the defensive copy
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        if arr.base is not None or not arr.flags.owndata:
            arr = arr.copy()
        arr.setflags(write=False)
        t.data = arr
        t._init_meta(False, None)
        return t

    def _tracked_on(self, tape: Tape) -> bool:
        return self.requires_grad or (self._tape is tape and self.node_id is not None)


class _Node:
    __slots__ = ("out", "parents", "vjp")

    def __init__(self, out: Tensor, parents: tuple[Tensor, ...], vjp: Callable):
        self.out = out
        self.parents = parents
        self.vjp = vjp


_local = threading.local()


def _active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Append-only record of differentiable operations.

    A tape is single-owner: record one forward pass inside ``with tape:`` and
    then call :meth:`backward` on a scalar result.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def record(self, out: Tensor, parents: tuple[Tensor, ...], vjp: Callable) -> None:
        out.node_id = len(self.nodes)
        out._tape = self
        self.nodes.append(_Node(out, parents, vjp))

    def backward(self, root: Tensor) -> None:
        """Accumulate d(root)/d(leaf) into ``.grad`` of every requires-grad leaf."""
        if root.data.size != 1:
            raise ContractError(f"backward() needs a scalar root, got shape {root.shape}")
        if root._tape is not self or root.node_id is None:
            raise ContractError("backward() root was not recorded on this tape")
        grads: dict[int, np.ndarray] = {root.node_id: np.ones_like(root.data)}
        leaf_grads: dict[int, tuple[Tensor, np.ndarray]] = {}
        for idx in range(root.node_id, -1, -1):
            g = grads.pop(idx, None)
            if g is None:
                continue
            node = self.nodes[idx]
            pgrads = node.vjp(g)
            for parent, pg in zip(node.parents, pgrads):
                if pg is None:
                    continue
                if parent._tape is self and parent.node_id is not None:
                    pid = parent.node_id
                    grads[pid] = grads[pid] + pg if pid in grads else pg
                elif parent.requires_grad:
                    key = id(parent)
                    if key in leaf_grads:
                        leaf_grads[key] = (parent, leaf_grads[key][1] + pg)
                    else:
                        leaf_grads[key] = (parent, pg)
        for leaf, g in leaf_grads.values():
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def backward(root: Tensor) -> None:
    """Run the reverse sweep on the tape that recorded ``root``."""
    if root._tape is None:
        raise ContractError("backward() root is not on any tape")
    root._tape.backward(root)


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable, rule: str) -> Tensor:
    out = Tensor._wrap(data)
    tape = _active_tape()
    if tape is not None and any(p._tracked_on(tape) for p in parents):
        if rule in _BROKEN:
            def vjp(g, _inner=vjp):
                return tuple(None if r is None else 1.5 * r + 0.1 for r in _inner(g))
        tape.record(out, tuple(parents), vjp)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# Linear algebra and elementwise arithmetic
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor, rule: str = "matmul") -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def vjp(g):
        return g @ B.T, A.T @ g

    return _make(A @ B, (a, b), vjp, rule)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose: expected rank 2, got {a.shape}")
    return _make(a.data.T, (a,), lambda g: (g.T,), "transpose")


def elementwise(op: str, a: Tensor, b) -> Tensor:
    """Pointwise ``add``/``sub``/``mul`` against an equal-shape tensor or a scalar, or ``scale``."""
    if op == "scale":
        return scale(a, float(b))
    if op not in ("add", "sub", "mul"):
        raise ConfigError(f"unknown elementwise op {op!r}")
    if not isinstance(b, Tensor):
        s = float(b)
        if op == "add":
            return _make(a.data + s, (a,), lambda g: (g,), "add")
        if op == "sub":
            return _make(a.data - s, (a,), lambda g: (g,), "sub")
        return scale(a, s)
    _check_same(a, b, op)
    if op == "add":
        return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")
    if op == "sub":
        return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")
    A, B = a.data, b.data
    return _make(A * B, (a, b), lambda g: (g * B, g * A), "mul")


def add(a: Tensor, b) -> Tensor:
    return elementwise("add", a, b)


def sub(a: Tensor, b) -> Tensor:
    return elementwise("sub", a, b)


def mul(a: Tensor, b) -> Tensor:
    return elementwise("mul", a, b)


def scale(a: Tensor, s: float) -> Tensor:
    return _make(a.data * s, (a,), lambda g: (g * s,), "scale")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias ``b`` of shape [c] along the last axis of ``x``."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias: bias {b.shape} does not match channels of {x.shape}")
    lead = tuple(range(x.ndim - 1))
    return _make(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)), "add_bias")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None, rule: str = "matmul") -> Tensor:
    """``x @ w (+ b)`` over the last axis of a rank-2 input."""
    out = matmul(x, w, rule=rule)
    return out if b is None else add_bias(out, b)


# ---------------------------------------------------------------------------
# Shape manipulation and reductions
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}")
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat: empty tensor list")
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, tensors[0].shape)) if i != ax
        ):
            raise DimensionError(f"concat: {t.shape} incompatible with {tensors[0].shape} on axis {ax}")
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, vjp, "concat")


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    """Channel slice ``a[..., start:stop]``."""
    if not 0 <= start < stop <= a.shape[-1]:
        raise DimensionError(f"slice_last: [{start}:{stop}] out of range for {a.shape}")
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return _make(a.data[..., start:stop], (a,), vjp, "slice")


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),), "sum")


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.size)


# ---------------------------------------------------------------------------
# Nonlinearities and normalization
# ---------------------------------------------------------------------------

def softmax_lastdim(x: Tensor, rule: str = "softmax") -> Tensor:
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"softmax_lastdim: empty last dimension in {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), vjp, rule)


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the erf-based normal CDF."""
    X = x.data
    cdf = 0.5 * (1.0 + erf(X * _INV_SQRT2))

    def vjp(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * X * X)
        return (g * (cdf + X * pdf),)

    return _make(X * cdf, (x,), vjp, "gelu")


LN_EPS = 1e-5
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis, then apply per-channel gain and bias."""
    c = x.shape[-1]
    if c < 1 or gain.shape != (c,) or bias.shape != (c,):
        raise DimensionError(f"layer_norm: gain {gain.shape}/bias {bias.shape} vs input {x.shape}")
    X = x.data
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    G = gain.data
    lead = tuple(range(x.ndim - 1))

    def vjp(g):
        gx = g * G
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * G + bias.data, (x, gain, bias), vjp, "layer_norm")


class BatchNormState:
    """Running per-channel statistics for one batch-norm layer."""

    def __init__(self, channels: int):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)

    def update(self, batch_mean: np.ndarray, batch_var: np.ndarray,
               momentum: float = BN_MOMENTUM) -> None:
        self.mean = (1.0 - momentum) * self.mean + momentum * batch_mean
        self.var = (1.0 - momentum) * self.var + momentum * batch_var


def batch_norm_2d(x: Tensor, gain: Tensor, bias: Tensor, state: BatchNormState,
                  mode: str = "eval", eps: float = BN_EPS) -> Tensor:
    """Per-channel batch norm over every axis but the last.

    ``x`` is [b, h, w, c] or a single [h, w, c] map. Train mode normalizes by
    the (biased) batch statistics and folds them into ``state``; eval mode
    uses ``state`` as-is.
    """
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise DimensionError(f"batch_norm_2d: gain {gain.shape}/bias {bias.shape} vs input {x.shape}")
    X = x.data
    axes = tuple(range(x.ndim - 1))
    G = gain.data
    if mode == "train":
        count = X.size // c
        if count < 2:
            raise ContractError(
                f"batch_norm_2d: train mode needs at least 2 values per channel, got {count}")
        mu = X.mean(axis=axes)
        xc = X - mu
        var = (xc * xc).mean(axis=axes)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        state.update(mu, var)

        def vjp(g):
            gx = g * G
            dx = inv * (gx - gx.mean(axis=axes) - xhat * (gx * xhat).mean(axis=axes))
            return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)
    elif mode == "eval":
        inv = 1.0 / np.sqrt(state.var + eps)
        xhat = (X - state.mean) * inv

        def vjp(g):
            return g * G * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)
    else:
        raise ConfigError(f"batch_norm_2d: unknown mode {mode!r}")
    return _make(xhat * G + bias.data, (x, gain, bias), vjp, "batch_norm")


# ---------------------------------------------------------------------------
# Convolutions and sampling
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of an [h, w, cin] map with a [kh, kw, cin, cout] kernel."""
    if x.ndim != 3 or w.ndim != 4 or w.shape[2] != x.shape[2]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    if stride < 1 or pad < 0 or h + 2 * pad < kh or wd + 2 * pad < kw:
        raise DimensionError(
            f"conv2d: kernel {kh}x{kw} does not fit input {h}x{wd} with pad {pad}")
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    xp = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0)))
    cols = np.empty((oh, ow, kh, kw, cin))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j, :] = xp[i:i + stride * oh:stride, j:j + stride * ow:stride, :]
    cols2 = cols.reshape(oh * ow, kh * kw * cin)
    W2 = w.data.reshape(kh * kw * cin, cout)
    out = (cols2 @ W2).reshape(oh, ow, cout)
    if b is not None:
        if b.shape != (cout,):
            raise DimensionError(f"conv2d: bias {b.shape} vs {cout} output channels")
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def vjp(g):
        g2 = g.reshape(oh * ow, cout)
        dw = (cols2.T @ g2).reshape(w.shape)
        dcols = (g2 @ W2.T).reshape(oh, ow, kh, kw, cin)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[i:i + stride * oh:stride, j:j + stride * ow:stride, :] += dcols[:, :, i, j, :]
        dx = dxp[pad:pad + h, pad:pad + wd, :]
        if b is None:
            return dx, dw
        return dx, dw, g2.sum(axis=0)

    return _make(out, parents, vjp, "conv2d")


def conv1d_depthwise(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Per-channel 1D cross-correlation along the token axis of [n, c], length preserving."""
    if w.ndim != 2 or x.ndim != 2 or w.shape[1] != x.shape[1] or b.shape != (x.shape[1],):
        raise DimensionError(f"conv1d_depthwise: input {x.shape}, kernel {w.shape}, bias {b.shape}")
    k = w.shape[0]
    if k % 2 == 0:
        raise ConfigError(f"conv1d_depthwise: kernel size must be odd, got {k}")
    n = x.shape[0]
    p = (k - 1) // 2
    xp = np.pad(x.data, ((p, p), (0, 0)))
    W = w.data
    out = b.data + sum(W[j] * xp[j:j + n] for j in range(k))

    def vjp(g):
        dxp = np.zeros_like(xp)
        dw = np.empty_like(W)
        for j in range(k):
            dxp[j:j + n] += g * W[j]
            dw[j] = (g * xp[j:j + n]).sum(axis=0)
        return dxp[p:p + n], dw, g.sum(axis=0)

    return _make(out, (x, w, b), vjp, "conv1d")


def bilinear_sample(x: Tensor, coords: Tensor) -> Tensor:
    """Read an [h, w, c] map at fractional (y, x) locations.

    ``coords`` has shape [..., 2]; the result has shape [..., c]. Neighbours
    outside the map read as zero. Differentiable in both the map and the
    coordinates.
    """
    if x.ndim != 3 or coords.shape[-1] != 2:
        raise DimensionError(f"bilinear_sample: map {x.shape}, coords {coords.shape}")
    h, w, c = x.shape
    lead = coords.shape[:-1]
    pts = coords.data.reshape(-1, 2)
    py, px = pts[:, 0], pts[:, 1]
    y0f, x0f = np.floor(py), np.floor(px)
    fy, fx = py - y0f, px - x0f
    y0, x0 = y0f.astype(np.int64), x0f.astype(np.int64)
    X = x.data

    corners = []
    for dy, dx_ in ((0, 0), (0, 1), (1, 0), (1, 1)):
        yy, xx = y0 + dy, x0 + dx_
        ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        yc, xc = np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)
        vals = X[yc, xc] * ok[:, None]
        corners.append((yc, xc, ok, vals))
    (_, _, _, v00), (_, _, _, v01), (_, _, _, v10), (_, _, _, v11) = corners
    wy0, wy1 = (1.0 - fy)[:, None], fy[:, None]
    wx0, wx1 = (1.0 - fx)[:, None], fx[:, None]
    out = wy0 * (wx0 * v00 + wx1 * v01) + wy1 * (wx0 * v10 + wx1 * v11)

    def vjp(g):
        g2 = g.reshape(-1, c)
        dX = np.zeros_like(X)
        weights = (wy0 * wx0, wy0 * wx1, wy1 * wx0, wy1 * wx1)
        for (yc, xc, ok, _), wt in zip(corners, weights):
            np.add.at(dX, (yc, xc), g2 * (wt * ok[:, None]))
        d_py = (g2 * (wx0 * (v10 - v00) + wx1 * (v11 - v01))).sum(axis=1)
        d_px = (g2 * (wy0 * (v01 - v00) + wy1 * (v11 - v10))).sum(axis=1)
        return dX, np.stack([d_py, d_px], axis=1).reshape(coords.shape)

    return _make(out.reshape(lead + (c,)), (x, coords), vjp, "bilinear")


def _upsample_matrix(n: int, factor: int) -> np.ndarray:
    # half-pixel centres, source coordinate clamped to the valid range
    s = (np.arange(n * factor) + 0.5) / factor - 0.5
    s = np.clip(s, 0.0, n - 1)
    lo = np.floor(s).astype(np.int64)
    hi = np.minimum(lo + 1, n - 1)
    frac = s - lo
    m = np.zeros((n * factor, n))
    rows = np.arange(n * factor)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    """Bilinear upsampling of an [h, w, c] map by an integer factor."""
    if factor < 1 or int(factor) != factor:
        raise ConfigError(f"upsample_bilinear: factor must be an integer >= 1, got {factor}")
    if x.ndim != 3:
        raise DimensionError(f"upsample_bilinear: expected [h, w, c], got {x.shape}")
    if factor == 1:
        return _make(x.data, (x,), lambda g: (g,), "upsample")
    h, w, _ = x.shape
    Ah, Aw = _upsample_matrix(h, factor), _upsample_matrix(w, factor)
    out = np.einsum("ph,hwc,qw->pqc", Ah, x.data, Aw, optimize=True)

    def vjp(g):
        return (np.einsum("ph,pqc,qw->hwc", Ah, g, Aw, optimize=True),)

    return _make(out, (x,), vjp, "upsample")


# ---------------------------------------------------------------------------
# Parameters and seeding
# ---------------------------------------------------------------------------

def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator; the same seed always yields the same stream."""
    return np.random.Generator(np.random.PCG64(seed))


class ParamStore:
    """Named trainable tensors plus non-trainable buffers (batch-norm statistics)."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.bn: dict[str, BatchNormState] = {}

    def add(self, path: str, value: np.ndarray) -> Tensor:
        if path in self.params:
            raise ContractError(f"duplicate parameter path {path!r}")
        t = Tensor(value, requires_grad=True, name=path)
        self.params[path] = t
        return t

    def add_bn(self, path: str, channels: int) -> None:
        """Register gain/bias parameters and running statistics for a BN layer."""
        self.add(f"{path}.gain", np.ones(channels))
        self.add(f"{path}.bias", np.zeros(channels))
        self.bn[path] = BatchNormState(channels)

    def __getitem__(self, path: str) -> Tensor:
        return self.params[path]

    def __contains__(self, path: str) -> bool:
        return path in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def set(self, path: str, value: np.ndarray) -> None:
        """Replace a parameter's values, keeping its shape."""
        old = self.params[path]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != old.shape:
            raise DimensionError(f"{path}: cannot replace shape {old.shape} with {value.shape}")
        t = Tensor(value, requires_grad=True, name=path)
        t.grad = old.grad
        self.params[path] = t

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = np.zeros(t.shape)

    def grad(self, path: str) -> np.ndarray:
        g = self.params[path].grad
        return np.zeros(self.params[path].shape) if g is None else g

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for path, st in self.bn.items():
            out[f"{path}.running_mean"] = st.mean
            out[f"{path}.running_var"] = st.var
        return out

    def load_buffer(self, name: str, value: np.ndarray) -> None:
        path, _, field = name.rpartition(".")
        st = self.bn[path]
        if field == "running_mean":
            st.mean = np.array(value, dtype=np.float64)
        elif field == "running_var":
            st.var = np.array(value, dtype=np.float64)
        else:
            raise KeyError(name)

    def copy(self) -> ParamStore:
        new = ParamStore()
        for path, t in self.params.items():
            new.add(path, t.data.copy())
        for path, st in self.bn.items():
            s = BatchNormState(st.mean.shape[0])
            s.mean, s.var = st.mean.copy(), st.var.copy()
            new.bn[path] = s
        return new


def tracked(values: Iterable[np.ndarray]) -> list[Tensor]:
    """Wrap raw arrays as requires-grad leaves."""
    return [Tensor(v, requires_grad=True) for v in values]
