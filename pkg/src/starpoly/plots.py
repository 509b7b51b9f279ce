"""Figure rendering: instance overlays, AP curves, ablation summaries.

All functions write files (PNG/SVG via matplotlib's Agg backend) and
return the path written.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .geometry import StarPolygon, vertices


def _instance_edges(labels: np.ndarray) -> np.ndarray:
    """Boolean mask of pixels whose 4-neighborhood crosses an id change."""
    edges = np.zeros(labels.shape, dtype=bool)
    edges[:-1, :] |= labels[:-1, :] != labels[1:, :]
    edges[1:, :] |= labels[:-1, :] != labels[1:, :]
    edges[:, :-1] |= labels[:, :-1] != labels[:, 1:]
    edges[:, 1:] |= labels[:, :-1] != labels[:, 1:]
    return edges & (labels > 0)


def overlay_figure(path: Path, image: np.ndarray, labels: np.ndarray,
                   polygons: list[StarPolygon] | None = None,
                   title: str | None = None) -> Path:
    """Image with per-instance colored boundaries and polygon outlines."""
    path = Path(path)
    h, w = labels.shape
    fig, ax = plt.subplots(figsize=(6, 6 * h / max(w, 1)))
    ax.imshow(image, cmap="gray", vmin=0, vmax=1 if image.max() <= 1 else 255)
    n = int(labels.max())
    if n:
        cmap = plt.colormaps["hsv"].resampled(n + 1)
        edges = _instance_edges(labels)
        rgba = np.zeros((h, w, 4))
        for v in range(1, n + 1):
            sel = edges & (labels == v)
            rgba[sel] = cmap((v - 1) / max(n, 1))
        ax.imshow(rgba)
    if polygons:
        for i, p in enumerate(polygons):
            verts = vertices(p)
            closed = np.vstack([verts, verts[:1]])
            ax.plot(closed[:, 0], closed[:, 1], lw=0.8,
                    color=plt.colormaps["hsv"](i / max(len(polygons), 1)))
            ax.plot([p.center[0]], [p.center[1]], "+", ms=4, color="white")
    if title:
        ax.set_title(title)
    ax.set_xlim(-0.5, w - 0.5)
    ax.set_ylim(h - 0.5, -0.5)
    ax.axis("off")
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return path


def ap_curve_figure(path: Path, curves: dict[str, dict],
                    title: str = "AP by IoU threshold") -> Path:
    """One line per named result; keys of each curve are float thresholds."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, curve in curves.items():
        taus = sorted(t for t in curve if isinstance(t, float))
        ax.plot(taus, [curve[t] for t in taus], marker="o", label=name)
    ax.set_xlabel("IoU threshold")
    ax.set_ylabel("AP")
    ax.set_title(title)
    ax.set_ylim(0, 1)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return path


def loss_curve_figure(path: Path, history: list[dict],
                      title: str = "training") -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = [r["epoch"] for r in history]
    ax.plot(epochs, [r["train_loss"] for r in history], label="train")
    ax.plot(epochs, [r["val_loss"] for r in history], label="val")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return path


def ablation_figure(path: Path, rows: list[dict], metric: str = "AP_mean",
                    title: str = "ablation") -> Path:
    """Bar chart of mean +/- std per configuration label."""
    path = Path(path)
    labels = [r["label"] for r in rows]
    means = [r[f"{metric}_mean"] for r in rows]
    stds = [r.get(f"{metric}_std", 0.0) for r in rows]
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(rows)), 4))
    ax.bar(range(len(rows)), means, yerr=stds, capsize=4,
           color="steelblue", alpha=0.85)
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylabel(metric)
    ax.set_title(title)
    ax.grid(axis="y", alpha=0.3)
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return path
