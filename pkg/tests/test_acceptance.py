"""One pass/fail line per acceptance criterion, at the stated tolerances.

Run with ``pytest tests/test_acceptance.py -s`` (the lines are printed even
without ``-s``).
"""
import itertools
import time
from pathlib import Path

import numpy as np
import pytest

from demtg.autodiff import BN_EPS, ParamStore, Tape, Tensor, gelu, make_rng
from demtg.checkpoint import load_checkpoint, restore_into, save_checkpoint
from demtg.config import RunConfig
from demtg.data import nyud_task_table, read_dataset, synth_dataset, write_dataset
from demtg.decoder import decode_all, init_decoder, init_ssg, ssg_gate
from demtg.losses import total_loss
from demtg.metrics import (ConfusionMatrix, FMeasureAccumulator, RegressionAccumulator, delta_m,
                           f_measure, miou, regression_errors)
from demtg.mixer import init_mixer, spatial_deformable
from demtg.model import DeMTG, ModelConfig
from demtg.tasks import default_task, nyud_tasks
from demtg.train import build_model, evaluate, log_line, train
from demtg.verify import run_suite

from test_metrics import brute_f, brute_merr, brute_miou, brute_rmse

ROOT = Path(__file__).resolve().parents[1]


@pytest.fixture
def say(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'} {detail}", flush=True)
        assert ok, detail
    return emit


def test_criterion_1_gradient_oracle(say):
    t0 = time.perf_counter()
    checks = run_suite(seed=0)
    elapsed = time.perf_counter() - t0
    failed = [c.name for c in checks if not c.report.passed]
    worst = max(checks, key=lambda c: c.report.worst.rel_err)
    say(1, not failed and elapsed < 300,
        f"{len(checks)} checks, failed={failed}, worst {worst.name} "
        f"{worst.report.worst.rel_err:.2e}, {elapsed:.0f}s (limit 300s)")


REF_SINGLE = [38.02, 0.6104, 20.94, 76.22]
REF_ROWS = {
    "row a": ([36.35, 0.6284, 21.02, 76.36], -1.89),
    "row b": ([36.34, 0.6290, 20.88, 76.38], -1.75),
    "row c": ([38.90, 0.6010, 20.48, 76.34], 1.56),
}


def test_criterion_2_delta_m_reproduction(say):
    better = [t.better for t in nyud_tasks()]
    got = {k: delta_m(m, REF_SINGLE, better) for k, (m, _) in REF_ROWS.items()}
    ok = all(abs(got[k] - e) <= 0.03 for k, (_, e) in REF_ROWS.items())
    say(2, ok, ", ".join(f"{k} {got[k]:+.3f} (want {e:+.2f})" for k, (_, e) in REF_ROWS.items()))


def test_criterion_3_zero_offset_equivalence(say):
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        store = ParamStore()
        init_mixer(store, "m", 16, 8, 1, make_rng(seed))
        x = rng.normal(size=(int(rng.integers(3, 8)), int(rng.integers(3, 8)), 8))
        plain = x + gelu(Tensor(x @ store["m.level0.deform.w"].data)).data / np.sqrt(1 + BN_EPS)
        out = spatial_deformable(Tensor(x), store, "m.level0").data
        worst = max(worst, float(np.max(np.abs(out - plain))))
    say(3, worst <= 1e-12, f"max |deformable - pointwise| = {worst:.1e} over 100 inputs (tol 1e-12)")


def test_criterion_4_ssg_identity_gate(say):
    exact = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        c = int(rng.integers(1, 9))
        store = ParamStore()
        init_ssg(store, c, 1, 3, make_rng(seed))
        store.set("ssg.layer0.conv.w", np.zeros((3, c)))
        store.set("ssg.layer0.conv.b", np.ones(c))
        gated, x1 = ssg_gate(Tensor(rng.normal(size=(int(rng.integers(1, 30)), c))), store, "ssg.layer0")
        exact += np.array_equal(gated.data, x1.data)
    say(4, exact == 100, f"{exact}/100 inputs give X'_g == X_g^1 exactly")


def test_criterion_5_permutation_equivariance(say):
    worst, n_perm = 0.0, 0
    rng = np.random.default_rng(0)
    names = ["semseg", "depth", "normal", "bound"]
    for T in (2, 3, 4):
        tasks = [default_task(n) for n in names[:T]]
        store = ParamStore()
        init_decoder(store, tasks, 8, 2, 3, make_rng(T))
        deformed = [Tensor(rng.normal(size=(6, 8))) for _ in tasks]
        base = decode_all(deformed, tasks, store, 4, (2, 3))
        for perm in itertools.permutations(range(T)):
            # parameters are keyed by task name, so they follow the permutation
            out = decode_all([deformed[i] for i in perm], [tasks[i] for i in perm], store, 4, (2, 3))
            for j, i in enumerate(perm):
                worst = max(worst, float(np.max(np.abs(out[j].data - base[i].data))))
            n_perm += 1
    say(5, worst <= 1e-9, f"{n_perm} permutations over T in {{2,3,4}}, max diff {worst:.1e} (tol 1e-9)")


def test_criterion_6_metric_oracles(say):
    rng = np.random.default_rng(6)
    worst = dict(miou=0.0, rmse=0.0, mErr=0.0, F=0.0)
    maps = []
    for _ in range(50):
        gt, pred = rng.integers(0, 4, (8, 8)), rng.integers(0, 4, (8, 8))
        rp, rg = rng.normal(size=(8, 8)), rng.normal(size=(8, 8))
        np_, ng = rng.normal(size=(8, 8, 3)), rng.normal(size=(8, 8, 3))
        prob, lab = rng.uniform(size=(8, 8)), rng.integers(0, 2, (8, 8)).astype(bool)
        maps.append((gt, pred, rp, rg, np_, ng, prob, lab))
        worst["miou"] = max(worst["miou"], abs(miou(pred, gt, 4) - brute_miou(pred, gt, 4)))
        worst["rmse"] = max(worst["rmse"], abs(regression_errors(rp, rg, "rmse") - brute_rmse(rp, rg)))
        worst["mErr"] = max(worst["mErr"], abs(regression_errors(np_, ng, "mErr") - brute_merr(np_, ng)))
        worst["F"] = max(worst["F"], abs(f_measure(prob, lab) - brute_f(prob, lab)))

    def run(items):
        accs = (ConfusionMatrix(4), RegressionAccumulator("rmse"), RegressionAccumulator("mErr"),
                FMeasureAccumulator())
        for gt, pred, rp, rg, np_, ng, prob, lab in items:
            accs[0].update(pred, gt)
            accs[1].update(rp, rg)
            accs[2].update(np_, ng)
            accs[3].update(prob, lab)
        return [accs[0].miou(), accs[1].value(), accs[2].value(), accs[3].value()]

    def merged(items, cut):
        a = (ConfusionMatrix(4), RegressionAccumulator("rmse"), RegressionAccumulator("mErr"),
             FMeasureAccumulator())
        b = (ConfusionMatrix(4), RegressionAccumulator("rmse"), RegressionAccumulator("mErr"),
             FMeasureAccumulator())
        for accs, part in ((a, items[:cut]), (b, items[cut:])):
            for gt, pred, rp, rg, np_, ng, prob, lab in part:
                accs[0].update(pred, gt)
                accs[1].update(rp, rg)
                accs[2].update(np_, ng)
                accs[3].update(prob, lab)
        m = [x.merge(y) for x, y in zip(a, b)]
        return [m[0].miou(), m[1].value(), m[2].value(), m[3].value()]

    seq = run(maps)
    merge_exact = all(merged(maps, cut) == seq for cut in (1, 17, 25, 49))
    ok = max(worst.values()) <= 1e-9 and merge_exact
    say(6, ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
        + f" (tol 1e-9); merge == sequential: {merge_exact}")


def test_criterion_7_overfit(say, tmp_path):
    cfg = RunConfig.load(ROOT / "configs" / "overfit.cfg")
    samples = synth_dataset(7, 8, 32, 32, 3)
    t0 = time.perf_counter()
    model = build_model(cfg, nyud_task_table(3))
    recs = train(model, samples, cfg)
    elapsed = time.perf_counter() - t0
    ratio = recs[-1]["loss"] / recs[0]["loss"]
    report = evaluate(model, samples)
    m = report.tasks[0].score
    say(7, cfg.optim_steps == 500 and ratio <= 0.10 and m >= 0.95 and elapsed < 600,
        f"configs/overfit.cfg: L_500/L_1 = {ratio:.4f} (<= 0.10), train SemSeg mIoU {m:.4f} "
        f"(>= 0.95), {elapsed:.0f}s (limit 600s)")


def test_criterion_8_determinism_and_round_trips(say, tmp_path):
    cfg = RunConfig.from_text("backbone.c = 4\nmodel.c_prime = 8\noptim.steps = 5\n")
    samples = synth_dataset(7, 2, 32, 32, 3)
    outs = []
    for i in range(2):
        model = build_model(cfg, nyud_task_table(3))
        log = "\n".join(log_line(r) for r in train(model, samples, cfg))
        save_checkpoint(tmp_path / f"{i}.ckpt", model.store, cfg.to_text())
        outs.append((log, (tmp_path / f"{i}.ckpt").read_bytes()))
    same_run = outs[0] == outs[1]

    write_dataset(samples, tmp_path / "d.dmtg", nyud_task_table(3))
    back, tasks = read_dataset(tmp_path / "d.dmtg")
    data_rt = all(np.array_equal(a.image, b.image)
                  and all(np.array_equal(a.labels[k], b.labels[k]) for k in a.labels)
                  for a, b in zip(samples, back))
    write_dataset(back, tmp_path / "e.dmtg", tasks)
    data_rt &= (tmp_path / "d.dmtg").read_bytes() == (tmp_path / "e.dmtg").read_bytes()

    params, buffers, text = load_checkpoint(tmp_path / "0.ckpt")
    fresh = build_model(RunConfig.from_text(text), nyud_task_table(3))
    restore_into(fresh.store, params, buffers)
    save_checkpoint(tmp_path / "r.ckpt", fresh.store, text)
    ckpt_rt = (tmp_path / "r.ckpt").read_bytes() == outs[0][1]
    say(8, same_run and data_rt and ckpt_rt,
        f"identical logs+checkpoints: {same_run}, dataset round-trip: {data_rt}, "
        f"checkpoint round-trip: {ckpt_rt}")


ABLATIONS = ([("depth", dict(depth=d)) for d in (1, 2, 4, 8)]
             + [("scales", dict(scales=s)) for s in ((1,), (1, 2), (1, 2, 3), (2, 3, 4), (1, 2, 3, 4))]
             + [("heads", dict(heads=h, c_prime=64)) for h in (2, 4, 16, 32, 64)]
             + [("ssg", dict(ssg_depth=n)) for n in (1, 2, 4, 6, 8)])


def test_criterion_9_ablation_knobs(say):
    image = synth_dataset(7, 1, 32, 32, 3)[0]
    tasks = nyud_tasks()
    bad = []
    for knob, kw in ABLATIONS:
        base = dict(c=8, c_prime=8)
        base.update(kw)
        model = DeMTG(ModelConfig(tasks=tasks, **base), seed=0)
        model.store.zero_grad()
        with Tape() as tape:
            preds = model.forward(image.image, "train")
            loss, _ = total_loss(preds, [image.labels[t.name] for t in tasks], tasks)
        tape.backward(loss)
        shapes = [p.shape for p in preds]
        grads_ok = all(np.isfinite(model.store.grad(p)).all() for p in model.store)
        if shapes != [(32, 32, 3), (32, 32, 1), (32, 32, 3), (32, 32, 1)] or not grads_ok \
                or not np.isfinite(loss.item()):
            bad.append(f"{knob}={kw}")
    say(9, not bad, f"{len(ABLATIONS)} settings (d 1/2/4/8, 5 scale subsets, heads 2-64, "
        f"SSG 1-8) forward+backward with correct shapes; failures: {bad}")
