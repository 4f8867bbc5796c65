"""PNG figures for training logs, evaluation metrics and denoising results.

Figures are drawn on a bare ``Figure`` (Agg canvas), so no GUI backend or
global pyplot state is touched. PNG metadata is stripped so reruns write
identical bytes.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from matplotlib.figure import Figure

_PNG_META = {"Software": None}
GRAY = 0.5


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    fig.savefig(path, format="png", dpi=100, metadata=_PNG_META)
    return path


def event_image(counts: np.ndarray, background: float = GRAY) -> np.ndarray:
    """(H, W, 2) counts -> RGB: positive-dominant red, negative-dominant blue, idle gray."""
    counts = np.asarray(counts)
    net = counts[..., 0].astype(np.int64) - counts[..., 1]
    out = np.full(counts.shape[:2] + (3,), background)
    out[net > 0] = (1.0, 0.0, 0.0)
    out[net < 0] = (0.0, 0.0, 1.0)
    tie = (net == 0) & (counts.sum(axis=-1) > 0)
    out[tie] = (1.0, 0.0, 1.0)
    return out


def training_curves(log: Sequence[Mapping], path, title: str = "") -> Path:
    iters = np.array([row["iter"] for row in log])
    fig = Figure(figsize=(8, 3.2))
    ax_loss, ax_grad = fig.subplots(1, 2)
    for key, ax in (("psi", ax_loss), ("phi", ax_loss), ("grad_w_norm", ax_grad), ("grad_theta_norm", ax_grad)):
        vals = np.array([np.nan if row.get(key) is None else row[key] for row in log], dtype=float)
        if np.isfinite(vals).any():
            ax.plot(iters, vals, label=key, lw=1)
    ax_loss.set_xlabel("iteration")
    ax_loss.set_ylabel("loss")
    ax_grad.set_xlabel("iteration")
    ax_grad.set_ylabel("gradient norm")
    for ax in (ax_loss, ax_grad):
        if ax.lines:
            ax.set_yscale("log")
            ax.legend(fontsize=7)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    return _save(fig, path)


def metric_bars(rows: Sequence[Mapping], path, keys=("psnr", "psnr_star", "ssim")) -> Path:
    names = [str(r["scene"]) for r in rows]
    keys = [k for k in keys if any(k in r for r in rows)]
    fig = Figure(figsize=(max(4, 1 + 0.6 * len(names)) * len(keys) / 1.5, 3.2))
    axes = np.atleast_1d(fig.subplots(1, len(keys)))
    x = np.arange(len(names))
    for ax, key in zip(axes, keys):
        vals = [float(r.get(key, np.nan)) for r in rows]
        ax.bar(x, vals, color="tab:blue")
        ax.set_xticks(x, names, rotation=60, fontsize=7)
        ax.set_title(key)
    fig.tight_layout()
    return _save(fig, path)


def denoise_panels(grad: np.ndarray, mask: np.ndarray, before: np.ndarray, after: np.ndarray, path) -> Path:
    """Gradient, mask and event images before/after filtering."""
    fig = Figure(figsize=(10, 2.8))
    axes = fig.subplots(1, 4)
    axes[0].imshow(grad, cmap="gray")
    axes[0].set_title("gradient")
    axes[1].imshow(mask != 0, cmap="gray", vmin=0, vmax=1)
    axes[1].set_title("mask")
    axes[2].imshow(event_image(before), interpolation="nearest")
    axes[2].set_title("events (noisy)")
    axes[3].imshow(event_image(after), interpolation="nearest")
    axes[3].set_title("events (kept)")
    for ax in axes:
        ax.set_axis_off()
    fig.tight_layout()
    return _save(fig, path)


def triptych(low: np.ndarray, enhanced: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Side-by-side RGB strip with a one-pixel white separator."""
    h = low.shape[0]
    sep = np.ones((h, 1, 3))
    return np.concatenate([np.clip(low, 0, 1), sep, np.clip(enhanced, 0, 1), sep, np.clip(reference, 0, 1)], axis=1)
