"""Figure rendering for reports. Everything writes straight to files through the Agg backend."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def overlay_figure(image: np.ndarray, heat_rgba: np.ndarray, label: str, path):
    img = np.clip(np.asarray(image, dtype=np.float64), 0, 1)
    h, w = heat_rgba.shape[:2]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 4 * h / max(w, 1)))
        ax.imshow(img, extent=(0, w, h, 0))
        ax.imshow(heat_rgba, extent=(0, w, h, 0), interpolation="nearest")
        ax.set_title(label)
        ax.set_axis_off()
        return _save(fig, path)


def moving_average(values, window: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if window <= 1 or v.size < window:
        return v
    c = np.cumsum(np.insert(v, 0, 0.0))
    return (c[window:] - c[:-window]) / window


def loss_curves(history: list[dict], path, window: int = 50):
    steps = np.array([h["step"] for h in history])
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(8, 3))
        for ax, key, title in zip(axes, ("supervised", "ranking"), ("supervised L2", "ranking hinge")):
            vals = [h[key] for h in history]
            ax.plot(steps, vals, color="0.8", lw=0.5)
            ma = moving_average(vals, window)
            ax.plot(steps[len(steps) - len(ma):], ma, color="C0" if key == "supervised" else "C3")
            ax.set_xlabel("step")
            ax.set_title(title)
        ax = axes[0]
        val = [(h["step"], h["val_mae"]) for h in history if "val_mae" in h]
        if val:
            twin = ax.twinx()
            twin.plot(*zip(*val), "o-", color="C2", ms=3)
            twin.set_ylabel("val MAE")
        return _save(fig, path)


def ablation_figure(rows: list[dict], axis: str, path):
    labels = [str(r[axis]) for r in rows]
    x = np.arange(len(rows))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.2 * len(rows) + 2, 3))
        ax.bar(x - 0.2, [r["mae"] for r in rows], 0.4, label="MAE")
        ax.bar(x + 0.2, [r["rmse"] for r in rows], 0.4, label="RMSE")
        ax.set_xticks(x, labels)
        ax.set_xlabel(axis)
        ax.legend(frameon=False)
        return _save(fig, path)


def audit_figure(per_level_before: dict, per_level_after: dict, path):
    keys = sorted(set(per_level_before) | set(per_level_after))
    x = np.arange(len(keys))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.bar(x - 0.2, [per_level_before.get(k, np.nan) for k in keys], 0.4, label="untrained")
        ax.bar(x + 0.2, [per_level_after.get(k, np.nan) for k in keys], 0.4, label="trained")
        ax.set_xticks(x, [str(k) for k in keys])
        ax.set_xlabel("level")
        ax.set_ylabel("violation rate")
        ax.legend(frameon=False)
        return _save(fig, path)
