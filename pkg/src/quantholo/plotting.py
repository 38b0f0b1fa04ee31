"""
Figures rendered from sweep results.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .sweep import SweepResult  # noqa: E402

# fixed metadata keeps the files byte-stable across runs
_PNG_META = {"Software": "quantholo"}


def heatmap(result: SweepResult, method: str, path, reference: float | None = None):
    """PSNR colormap over bits x frames with the iso-quality frontier in black."""
    grid = result.grid(method)
    if reference is None and "naive" in result.methods:
        reference = result.reference()
    fig, ax = plt.subplots(figsize=(4.0, 4.2), dpi=100)
    finite = grid[np.isfinite(grid)]
    vmin, vmax = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
    im = ax.imshow(grid, origin="lower", cmap="viridis", vmin=vmin, vmax=vmax, aspect="auto")
    for i in range(grid.shape[0]):
        for j in range(grid.shape[1]):
            txt = "n/a" if not np.isfinite(grid[i, j]) else f"{grid[i, j]:.1f}"
            ax.text(j, i, txt, ha="center", va="center", color="w", fontsize=7)
    if reference is not None:
        front = result.frontier(method, reference)
        xs, ys = [], []
        for i, b in enumerate(result.bits):
            f = front[b]
            if f is None:
                continue
            x = result.frames.index(f) - 0.5
            xs += [x, x]
            ys += [i - 0.5, i + 0.5]
        if xs:
            ax.plot(xs, ys, color="k", linewidth=2)
    ax.set_xticks(range(len(result.frames)), [str(f) for f in result.frames])
    ax.set_yticks(range(len(result.bits)), [str(b) for b in result.bits])
    ax.set_xlabel("frames")
    ax.set_ylabel("bits")
    ax.set_title(method)
    fig.colorbar(im, ax=ax, label="PSNR (dB)")
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)


def loss_curve(losses: dict, path):
    """Loss histories keyed by label on a log scale."""
    fig, ax = plt.subplots(figsize=(5.0, 3.2), dpi=100)
    for label, hist in losses.items():
        ax.semilogy(np.arange(1, len(hist) + 1), hist, label=label)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)
