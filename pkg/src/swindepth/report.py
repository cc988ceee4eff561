"""Figures rendered next to the text outputs of training and evaluation."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def read_loss_log(path: Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``step lr loss`` lines to three arrays."""
    rows = [line.split() for line in Path(path).read_text().splitlines() if line.strip()]
    if not rows:
        return np.zeros(0, int), np.zeros(0), np.zeros(0)
    arr = np.array(rows, dtype=np.float64)
    return arr[:, 0].astype(int), arr[:, 1], arr[:, 2]


def ema(values: np.ndarray, window: int = 50) -> np.ndarray:
    """Exponential moving average with smoothing 2 / (window + 1), seeded by the first value."""
    out = np.empty(len(values))
    a = 2.0 / (window + 1)
    acc = values[0] if len(values) else 0.0
    for i, v in enumerate(values):
        acc = a * v + (1 - a) * acc
        out[i] = acc
    return out


def loss_curve(log_path: Path, out_png: Path, window: int = 50, title: str = "training loss") -> Path:
    steps, lr, loss = read_loss_log(log_path)
    fig, ax = plt.subplots(figsize=(7, 3.6))
    ax.plot(steps, loss, lw=0.6, alpha=0.45, label="per step")
    if len(loss):
        ax.plot(steps, ema(loss, window), lw=1.6, label=f"EMA ({window})")
        changes = np.flatnonzero(np.diff(lr)) + 1
        for i in changes:
            ax.axvline(steps[i], color="0.5", ls=":", lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(out_png, dpi=110)
    plt.close(fig)
    return Path(out_png)


def _inverse_depth(depth: np.ndarray) -> np.ndarray:
    return 1.0 / np.maximum(depth, 1e-6)


def depth_panels(images: Sequence[np.ndarray], preds: Sequence[np.ndarray], out_png: Path,
                 gts: Optional[Sequence[np.ndarray]] = None, labels: Optional[Sequence[str]] = None) -> Path:
    """One row per frame: RGB, predicted inverse depth and (when given) ground-truth inverse depth."""
    n = len(preds)
    cols = 3 if gts is not None else 2
    fig, axes = plt.subplots(n, cols, figsize=(3.2 * cols, 1.3 * n + 0.4), squeeze=False)
    for r in range(n):
        inv_p = _inverse_depth(preds[r])
        panels = [np.clip(np.transpose(images[r], (1, 2, 0)), 0, 1), inv_p]
        if gts is not None:
            panels.append(_inverse_depth(gts[r]))
        lo, hi = np.percentile(np.concatenate([p.ravel() for p in panels[1:]]), [1, 99])
        for c, panel in enumerate(panels):
            ax = axes[r, c]
            ax.imshow(panel, cmap=None if c == 0 else "magma", vmin=None if c == 0 else lo,
                      vmax=None if c == 0 else hi, interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
        if labels is not None:
            axes[r, 0].set_ylabel(labels[r], fontsize=7)
    for c, name in enumerate(["input", "predicted 1/depth", "ground truth 1/depth"][:cols]):
        axes[0, c].set_title(name, fontsize=9)
    fig.tight_layout()
    fig.savefig(out_png, dpi=110)
    plt.close(fig)
    return Path(out_png)


def per_image_bars(names: Sequence[str], values: Sequence[float], out_png: Path, metric: str = "abs_rel") -> Path:
    fig, ax = plt.subplots(figsize=(max(4.0, 0.28 * len(values) + 1.5), 3.2))
    ax.bar(np.arange(len(values)), values, color="tab:blue")
    ax.axhline(float(np.mean(values)), color="k", lw=1, ls="--", label=f"mean {np.mean(values):.4f}")
    ax.set_xticks(np.arange(len(values)))
    ax.set_xticklabels(names, rotation=90, fontsize=6)
    ax.set_ylabel(metric)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(out_png, dpi=110)
    plt.close(fig)
    return Path(out_png)


def parameter_bars(breakdown: Mapping[str, int], out_png: Path, reference: Optional[float] = None) -> Path:
    """Stacked per-module parameter counts, with an optional reference total."""
    fig, ax = plt.subplots(figsize=(4.2, 3.4))
    bottom = 0.0
    for name, count in breakdown.items():
        ax.bar([0], [count / 1e6], bottom=bottom, label=f"{name} {count / 1e6:.2f}M")
        bottom += count / 1e6
    if reference is not None:
        ax.axhline(reference / 1e6, color="k", ls="--", lw=1, label=f"reference {reference / 1e6:.1f}M")
    ax.set_xticks([])
    ax.set_ylabel("parameters (millions)")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(out_png, dpi=110)
    plt.close(fig)
    return Path(out_png)
