"""Figure rendering for training runs and evaluation reports.

Every report path writes machine-readable delimited output (CSV/JSON) next
to PNG figures rendered with the Agg backend.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def write_csv(path: str | Path, rows: Sequence[Mapping[str, object]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = sorted({k for row in rows for k in row})
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        writer.writerows(rows)
    return path


def write_json(path: str | Path, payload) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    return path


def plot_loss_curves(csv_path: str | Path, out_path: str | Path) -> Path:
    """Render total and per-term loss curves from a training losses.csv."""
    with open(csv_path) as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{csv_path} has no rows")
    steps = [float(r["step"]) for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    for key in ("total_g", "total_d"):
        ax1.plot(steps, [float(r[key]) for r in rows], label=key)
    ax1.set_xlabel("step")
    ax1.set_ylabel("loss")
    ax1.legend()
    ax1.set_title("totals")
    for key in sorted(rows[0]):
        if key.startswith(("g_", "d_")) and key not in ("d_real_logit", "d_fake_logit"):
            vals = [float(r[key]) if r[key] else np.nan for r in rows]
            ax2.plot(steps, vals, label=key)
    ax2.set_xlabel("step")
    ax2.legend(fontsize=7)
    ax2.set_title("terms")
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_gaze_scatter(
    target: np.ndarray, decoded: np.ndarray, out_path: str | Path, title: str = "gaze tracking"
) -> Path:
    """Scatter decoded vs target yaw/pitch with the identity line."""
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    for i, (ax, name) in enumerate(zip(axes, ("yaw", "pitch"))):
        ax.scatter(target[:, i], decoded[:, i], s=8, alpha=0.6)
        lo = min(target[:, i].min(), decoded[:, i].min())
        hi = max(target[:, i].max(), decoded[:, i].max())
        ax.plot([lo, hi], [lo, hi], "k--", lw=1)
        ax.set_xlabel(f"target {name} (rad)")
        ax.set_ylabel(f"decoded {name} (rad)")
    fig.suptitle(title)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_histogram(
    values: np.ndarray, out_path: str | Path, xlabel: str, title: str, bins: int = 30
) -> Path:
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.hist(np.asarray(values), bins=bins, color="#4878a8")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("count")
    ax.set_title(title)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_image_grid(images: np.ndarray, out_path: str | Path, cols: int = 8, title: str = "") -> Path:
    """Tile (N, H, W, 3) uint8 images into one figure."""
    n = images.shape[0]
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(cols * 1.4, rows * 1.4))
    axes = np.atleast_2d(axes)
    for i in range(rows * cols):
        ax = axes[i // cols, i % cols]
        ax.axis("off")
        if i < n:
            ax.imshow(images[i])
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
