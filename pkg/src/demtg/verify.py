"""Finite-difference verification suite: every primitive plus the end-to-end model loss."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import (BatchNormState, ParamStore, Tensor, batch_norm_2d, bilinear_sample,
                       broken_rules, conv1d_depthwise, conv2d, gelu, layer_norm, matmul, mul,
                       make_rng, softmax_lastdim, sum_all, upsample_bilinear)
from .backbone import aggregate_scales, backbone_forward
from .decoder import apply_ssg, init_mhsa, init_ssg, mhsa
from .gradcheck import GradCheckReport, grad_check
from .losses import bce_logits, cross_entropy, l1_loss, total_loss
from .mixer import channel_mixing, init_mixer, linear_reduce, offset_field, spatial_deformable
from .model import DeMTG, ModelConfig
from .tasks import default_task

PRIMITIVE_TOL = 1e-5
SAMPLING_TOL = 1e-4
MODEL_EPS = 1e-3
OFFSET_MARGIN = 0.05

# every rule name a --break flag may corrupt
RULES = ("matmul", "transpose", "add", "sub", "mul", "scale", "add_bias", "reshape", "concat",
         "slice", "sum", "softmax", "mhsa", "gelu", "layer_norm", "batch_norm", "conv2d",
         "conv1d", "bilinear", "upsample", "cross_entropy", "l1", "bce")


@dataclass
class Check:
    name: str
    report: GradCheckReport
    seconds: float

    def line(self) -> str:
        return f"{self.name:<22} {self.report}  [{self.seconds:.2f}s]"


def _probe(out: Tensor, rng: np.random.Generator) -> Tensor:
    # random projection so no gradient is identically zero by symmetry
    return sum_all(mul(out, Tensor(rng.normal(size=out.shape))))


def _store(**arrays) -> ParamStore:
    s = ParamStore()
    for k, v in arrays.items():
        s.add(k, v)
    return s


def _fractional(rng: np.random.Generator, shape, margin: float = OFFSET_MARGIN) -> np.ndarray:
    """Non-integer offsets whose fractional part stays ``margin`` away from grid lines."""
    return rng.integers(-1, 2, size=shape) + rng.uniform(margin, 1 - margin, size=shape)


def _bn_state(rng: np.random.Generator, c: int) -> BatchNormState:
    st = BatchNormState(c)
    st.mean = rng.normal(0.0, 0.2, c)
    st.var = rng.uniform(0.5, 1.5, c)
    return st


def _primitive_cases(seed: int) -> list[tuple[str, Callable, ParamStore, float, float]]:
    rng = make_rng(seed)
    p = lambda: make_rng(seed + 1)  # fresh identical probe stream for every call
    cases = []

    s = _store(a=rng.normal(size=(3, 4)), b=rng.normal(size=(4, 2)))
    cases.append(("matmul", lambda st: _probe(matmul(st["a"], st["b"]), p()), s))

    s = _store(a=rng.normal(size=(2, 3)), b=rng.normal(size=(2, 3)))
    cases.append(("mul", lambda st: _probe(mul(st["a"], st["b"]), p()), s))

    s = _store(x=rng.normal(size=(4, 5)))
    cases.append(("gelu", lambda st: _probe(gelu(st["x"]), p()), s))

    s = _store(x=rng.normal(size=(3, 5)))
    cases.append(("softmax", lambda st: _probe(softmax_lastdim(st["x"]), p()), s))

    s = _store(x=rng.normal(size=(4, 8)), g=rng.normal(1, 0.2, 8), b=rng.normal(0, 0.2, 8))
    cases.append(("layer_norm", lambda st: _probe(layer_norm(st["x"], st["g"], st["b"]), p()), s))

    s = _store(x=rng.normal(size=(3, 3, 4)), g=rng.normal(1, 0.2, 4), b=rng.normal(0, 0.2, 4))
    bn_eval = _bn_state(rng, 4)
    cases.append(("batch_norm[eval]", lambda st: _probe(
        batch_norm_2d(st["x"], st["g"], st["b"], bn_eval, "eval"), p()), s))
    s2 = s.copy()
    bn_train = BatchNormState(4)
    cases.append(("batch_norm[train]", lambda st: _probe(
        batch_norm_2d(st["x"], st["g"], st["b"], bn_train, "train"), p()), s2))

    s = _store(x=rng.normal(size=(5, 5, 2)), w=rng.normal(size=(3, 3, 2, 3)), b=rng.normal(size=3))
    cases.append(("conv2d", lambda st: _probe(conv2d(st["x"], st["w"], st["b"], 2, 1), p()), s))

    s = _store(x=rng.normal(size=(7, 4)), w=rng.normal(size=(3, 4)), b=rng.normal(size=4))
    cases.append(("conv1d_depthwise", lambda st: _probe(
        conv1d_depthwise(st["x"], st["w"], st["b"]), p()), s))

    s = _store(x=rng.normal(size=(3, 4, 2)))
    cases.append(("upsample_bilinear", lambda st: _probe(upsample_bilinear(st["x"], 4), p()), s))

    labels = rng.integers(0, 3, size=(4, 4))
    labels[0, 0] = 255
    s = _store(z=rng.normal(size=(4, 4, 3)))
    cases.append(("cross_entropy", lambda st: cross_entropy(st["z"], labels, 255), s))

    target = rng.normal(size=(4, 4, 3))
    s = _store(y=target + rng.choice([-1, 1], size=target.shape) * rng.uniform(0.1, 1, target.shape))
    cases.append(("l1", lambda st: l1_loss(st["y"], target), s))

    tgt = rng.integers(0, 2, size=(4, 4, 1)).astype(float)
    s = _store(z=rng.normal(size=(4, 4, 1)))
    cases.append(("bce_logits", lambda st: bce_logits(st["z"], tgt), s))

    out = [(n, f, st, 1e-5, PRIMITIVE_TOL) for n, f, st in cases]

    grid = np.stack(np.meshgrid(np.arange(4.0), np.arange(4.0), indexing="ij"), axis=-1)
    s = _store(x=rng.normal(size=(4, 4, 3)), c=grid + _fractional(rng, (4, 4, 2)))
    out.append(("bilinear_sample", lambda st: _probe(bilinear_sample(st["x"], st["c"]), p()),
                s, 1e-5, SAMPLING_TOL))
    return out


def _block_cases(seed: int) -> list[tuple[str, Callable, ParamStore, float, float]]:
    rng = make_rng(seed + 100)
    p = lambda: make_rng(seed + 101)
    out = []

    s = ParamStore()
    init_mhsa(s, "attn", 8, rng)
    _perturb(s, rng)
    xq, xkv = Tensor(rng.normal(size=(5, 8))), Tensor(rng.normal(size=(7, 8)))
    out.append(("mhsa", lambda st: _probe(mhsa(xq, xkv, st, "attn", 4), p()), s, 1e-5,
                PRIMITIVE_TOL))

    s = ParamStore()
    init_ssg(s, 8, 1, 3, rng)
    _perturb(s, rng)
    x = Tensor(rng.normal(size=(9, 8)))
    out.append(("ssg", lambda st: _probe(apply_ssg(x, st, (3, 3)), p()), s, 1e-5, PRIMITIVE_TOL))

    s = ParamStore()
    init_mixer(s, "mx", 6, 4, 1, rng)
    _perturb(s, rng, offsets=False)
    x6 = Tensor(rng.normal(size=(4, 4, 6)))
    out.append(("channel_mixing", lambda st: _probe(
        channel_mixing(linear_reduce(x6, st, "mx"), st, "mx.level0"), p()), s, 1e-5,
        PRIMITIVE_TOL))

    s = ParamStore()
    init_mixer(s, "mx", 4, 4, 1, rng)
    x4 = Tensor(rng.normal(size=(4, 4, 4)))
    _perturb(s, rng)
    _settle_offsets(s, rng, lambda st: [(x4, "mx.level0")])
    out.append(("spatial_deformable", lambda st: _probe(
        spatial_deformable(x4, st, "mx.level0"), p()), s, 1e-5, SAMPLING_TOL))
    return out


def _perturb(store: ParamStore, rng: np.random.Generator, offsets: bool = True) -> None:
    """Move every parameter and BN statistic off its (often degenerate) initial value."""
    for path, t in list(store.items()):
        leaf = path.rsplit(".", 1)[-1]
        if ".offset." in path:
            if offsets:
                v = (rng.normal(0, 0.01, t.shape) if leaf == "w"
                     else _fractional(rng, t.shape))
                store.set(path, v)
        elif leaf == "gain":
            store.set(path, t.data + rng.normal(0, 0.1, t.shape))
        elif leaf in ("b", "bias"):
            store.set(path, t.data + rng.normal(0, 0.1, t.shape))
        else:
            store.set(path, t.data + rng.normal(0, 0.1 / np.sqrt(max(1, t.shape[0])), t.shape))
    for path, st in store.bn.items():
        c = st.mean.shape[0]
        new = _bn_state(rng, c)
        st.mean, st.var = new.mean, new.var


def _settle_offsets(store: ParamStore, rng: np.random.Generator,
                    inputs: Callable[[ParamStore], list[tuple[Tensor, str]]],
                    tries: int = 50) -> None:
    """Redraw offset biases until every sampled offset sits clear of grid lines."""
    for _ in range(tries):
        worst = 0.5
        for x, level in inputs(store):
            d = offset_field(x, store, level).data
            frac = d - np.floor(d)
            worst = min(worst, float(np.min(np.minimum(frac, 1 - frac))))
        if worst >= OFFSET_MARGIN / 2:
            return
        for x, level in inputs(store):
            path = f"{level}.offset.b"
            store.set(path, _fractional(rng, store[path].shape))
    raise RuntimeError("could not place offsets away from grid lines")


def micro_config(num_classes: int = 3) -> ModelConfig:
    return ModelConfig(c=8, scales=(1, 2, 3, 4), c_prime=8, depth=1, heads=4, ssg_depth=1,
                       ssg_kernel=3, tasks=[default_task("semseg", num_classes),
                                            default_task("depth")])


def _model_case(seed: int, hw: int = 16, config: ModelConfig | None = None):
    cfg = config or micro_config()
    rng = make_rng(seed + 200)
    model = DeMTG(cfg, seed=seed)
    _perturb(model.store, rng)
    image = Tensor(rng.uniform(0, 1, (hw, hw, 3)))
    labels = []
    for t in cfg.tasks:
        if t.kind == "multiclass-seg":
            labels.append(rng.integers(0, t.out_channels, (hw, hw)))
        elif t.kind == "binary-map":
            labels.append(rng.integers(0, 2, (hw, hw)))
        else:
            labels.append(None)

    def mixer_inputs(st):
        shared = aggregate_scales(backbone_forward(image, st, "eval").stages, cfg.scales)
        out = []
        for t in cfg.tasks:
            prefix = f"task.{t.name}.mixer"
            y = channel_mixing(linear_reduce(shared, st, prefix), st, f"{prefix}.level0")
            out.append((y, f"{prefix}.level0"))
        return out

    _settle_offsets(model.store, rng, mixer_inputs)
    # L1 targets well clear of the predictions, so no bump crosses a kink
    preds = model.forward(image, "eval")
    for i, lab in enumerate(labels):
        if lab is None:
            shape = preds[i].shape
            labels[i] = preds[i].data + rng.choice([-1, 1], shape) * rng.uniform(0.5, 1.5, shape)

    def f(st):
        model.store = st
        return total_loss(model.forward(image, "eval"), labels, cfg.tasks)[0]

    return f, model.store


def run_suite(seed: int = 0, broken: tuple[str, ...] = (), include_model: bool = True,
              coords_per_param: int | None = None,
              on_check: Callable[[Check], None] | None = None) -> list[Check]:
    """Runs every check; ``broken`` names gradient rules to corrupt (negative control)."""
    results = []
    with broken_rules(*broken):
        cases = _primitive_cases(seed) + _block_cases(seed)
        for name, f, store, eps, tol in cases:
            t0 = time.perf_counter()
            rep = grad_check(f, store, eps=eps, tol=tol, seed=seed)
            results.append(Check(name, rep, time.perf_counter() - t0))
            if on_check:
                on_check(results[-1])
        if include_model:
            f, store = _model_case(seed)
            t0 = time.perf_counter()
            rep = grad_check(f, store, eps=MODEL_EPS, tol=SAMPLING_TOL,
                             coords_per_param=coords_per_param, seed=seed)
            results.append(Check("model_total_loss", rep, time.perf_counter() - t0))
            if on_check:
                on_check(results[-1])
    return results
