"""Matplotlib figures for a finished run: loss curves and a layer montage."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .imaging import read_png  # noqa: E402


def read_log(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def loss_figure(records, path, title=None):
    """Total loss and every logged term against the step, log-scaled."""
    if not records:
        raise ValueError("no training records to plot")
    steps = np.array([r["step"] for r in records])
    keys = ["total"] + sorted(k for k in records[0] if k not in ("step", "total", "wall")
                               and isinstance(records[0][k], (int, float)))
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    for key in keys:
        vals = np.array([r.get(key, np.nan) for r in records], dtype=float)
        if np.all(~np.isfinite(vals) | (vals <= 0)):
            continue
        ax.plot(steps, vals, lw=1.6 if key == "total" else 1.0, label=key)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.grid(alpha=0.3, which="both")
    ax.legend(fontsize=8, frameon=False)
    if title:
        ax.set_title(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def layer_figure(rows, path, titles=None):
    """Grid of images; ``rows`` is a list of lists of image paths (or None)."""
    nrow = len(rows)
    ncol = max(len(r) for r in rows)
    fig, axes = plt.subplots(nrow, ncol, figsize=(2.0 * ncol, 2.0 * nrow), squeeze=False)
    for i, row in enumerate(rows):
        for j in range(ncol):
            ax = axes[i][j]
            ax.axis("off")
            if j < len(row) and row[j] is not None:
                img = read_png(row[j])
                ax.imshow(img, cmap="gray" if img.ndim == 2 else None, vmin=0, vmax=255)
                if titles and i == 0:
                    ax.set_title(titles[j], fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def render_report(run_dir, out_dir=None):
    """Write ``loss.png`` and ``layers.png`` for the run in ``run_dir``."""
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir else run_dir / "figures"
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    log_path = run_dir / "train_log.jsonl"
    if log_path.exists():
        written.append(loss_figure(read_log(log_path), out_dir / "loss.png", run_dir.name))
    frames = sorted(p for p in (run_dir / "layers").glob("*_scene.png")) if (run_dir / "layers").is_dir() else []
    if frames:
        streams = ["scene", "interf", "alpha"]
        present = [s for s in streams if any((p.parent / p.name.replace("_scene", f"_{s}")).exists()
                                             for p in frames)]
        rows = []
        for p in frames:
            rows.append([p.parent / p.name.replace("_scene", f"_{s}") for s in present])
            rows[-1] = [q if q.exists() else None for q in rows[-1]]
        written.append(layer_figure(rows, out_dir / "layers.png", present))
    return written
