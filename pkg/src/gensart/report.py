"""PNG figures written next to the CSV outputs of the CLI."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .io import central_slice  # noqa: E402


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_slice(volume, path, title="", window=None):
    """Grayscale image of the central slice."""
    img = central_slice(volume)
    lo, hi = (float(img.min()), float(img.max())) if window is None else window
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    im = ax.imshow(img.T, origin="lower", cmap="gray", vmin=lo, vmax=hi)
    ax.set_title(title)
    ax.set_axis_off()
    fig.colorbar(im, ax=ax, fraction=0.046)
    return _save(fig, path)


def read_metrics_csv(path):
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def plot_metrics(rows, path, title="Kaczmarz run"):
    """Per-step residual and update norm against the step index."""
    if isinstance(rows, (str, Path)):
        rows = read_metrics_csv(rows)
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    if rows:
        it = np.array([r["iter"] for r in rows])
        for ax, key in zip(axes, ("residual", "update_norm")):
            v = np.array([r[key] for r in rows], dtype=float)
            ax.plot(it, v, lw=1)
            if np.all(v > 0):
                ax.set_yscale("log")
            ax.set_xlabel("step")
            ax.set_ylabel(key.replace("_", " "))
    fig.suptitle(title)
    return _save(fig, path)


def plot_comparison(volumes: dict, truth, metrics: dict, path):
    """Central slices of the volumes beside the truth, titled with their PSNR."""
    names = list(volumes)
    t = central_slice(truth)
    lo, hi = float(t.min()), float(t.max())
    fig, axes = plt.subplots(1, len(names) + 1, figsize=(3.2 * (len(names) + 1), 3.4))
    axes = np.atleast_1d(axes)
    axes[0].imshow(t.T, origin="lower", cmap="gray", vmin=lo, vmax=hi)
    axes[0].set_title("truth")
    for ax, name in zip(axes[1:], names):
        ax.imshow(central_slice(volumes[name]).T, origin="lower", cmap="gray", vmin=lo, vmax=hi)
        ps = metrics[name]["psnr"]
        ax.set_title(f"{name}\nPSNR {ps:.2f} dB" if np.isfinite(ps) else f"{name}\nPSNR inf")
    for ax in axes:
        ax.set_axis_off()
    return _save(fig, path)
