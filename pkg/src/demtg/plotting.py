"""Report figures: training-loss curves and per-task prediction panels."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data import Sample, palette  # noqa: E402
from .tasks import TaskSpec  # noqa: E402

RC = {
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
}


def plot_loss_curve(records: Sequence[dict], path) -> Path:
    """Total and per-task (unweighted) losses against step, log-scaled."""
    steps = [r["step"] for r in records]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(6, 3.6))
        ax.plot(steps, [r["loss"] for r in records], color="k", lw=1.5, label="total")
        for name in records[0]["tasks"] if records else ():
            ax.plot(steps, [r["tasks"][name] for r in records], lw=0.9, label=name)
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend(frameon=False, ncol=3)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def _render(arr: np.ndarray, spec: TaskSpec, is_pred: bool) -> tuple[np.ndarray, dict]:
    if spec.kind == "multiclass-seg":
        lab = arr.argmax(-1) if is_pred else arr
        colors = np.vstack([palette(spec.out_channels), [[0, 0, 0]]])
        return colors[np.clip(lab, 0, spec.out_channels).astype(int)], {}
    if spec.kind == "binary-map":
        img = 1 / (1 + np.exp(-arr[..., 0])) if is_pred else arr
        return img, {"cmap": "gray", "vmin": 0, "vmax": 1}
    if spec.kind == "regression-3ch":
        return np.clip(0.5 * (arr + 1), 0, 1), {}
    return np.squeeze(arr, -1) if arr.ndim == 3 else arr, {"cmap": "viridis"}


def plot_predictions(samples: Sequence[Sample], outputs: Sequence[Sequence[np.ndarray]],
                     tasks: Sequence[TaskSpec], path, max_rows: int = 4) -> Path:
    """One row per sample: input, then ground truth / prediction pairs for each task."""
    rows = min(len(samples), max_rows)
    cols = 1 + 2 * len(tasks)
    with plt.rc_context(RC):
        fig, axes = plt.subplots(rows, cols, figsize=(1.6 * cols, 1.6 * rows), squeeze=False)
        for i in range(rows):
            s = samples[i]
            axes[i, 0].imshow(np.clip(s.image, 0, 1))
            if i == 0:
                axes[i, 0].set_title("image")
            for j, spec in enumerate(tasks):
                gt, kw = _render(np.asarray(s.labels[spec.name]), spec, False)
                pr, kw2 = _render(np.asarray(outputs[i][j]), spec, True)
                if spec.kind == "regression-1ch":
                    lo, hi = float(np.min(gt)), float(np.max(gt))
                    kw = kw2 = {"cmap": "viridis", "vmin": lo, "vmax": hi if hi > lo else lo + 1}
                axes[i, 1 + 2 * j].imshow(gt, **kw)
                axes[i, 2 + 2 * j].imshow(pr, **kw2)
                if i == 0:
                    axes[i, 1 + 2 * j].set_title(f"{spec.name} gt")
                    axes[i, 2 + 2 * j].set_title(f"{spec.name} pred")
        for ax in axes.ravel():
            ax.set_xticks([])
            ax.set_yticks([])
            ax.grid(False)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)
