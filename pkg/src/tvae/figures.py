"""PNG image grids and simple line plots."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def grid_to_array(grid, pad: int = 2, fill: float = 1.0) -> np.ndarray:
    """Tile ``[rows, cols, H, W]`` values in [0, 1] into one uint8 image."""
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 4:
        raise ValueError(f"expected [rows, cols, H, W], got shape {g.shape}")
    rows, cols, h, w = g.shape
    out = np.full((rows * (h + pad) + pad, cols * (w + pad) + pad), fill)
    for r in range(rows):
        for c in range(cols):
            y, x = pad + r * (h + pad), pad + c * (w + pad)
            out[y:y + h, x:x + w] = g[r, c]
    return np.round(np.clip(out, 0, 1) * 255).astype(np.uint8)


def save_grid(grid, path, pad: int = 2, scale: int = 2) -> Path:
    path = Path(path)
    img = Image.fromarray(grid_to_array(grid, pad), mode="L")
    if scale > 1:
        img = img.resize((img.width * scale, img.height * scale), Image.NEAREST)
    img.save(path, format="PNG")
    return path


def save_line_plot(series: dict, path, xlabel: str, ylabel: str, title: str = "") -> Path:
    """``series`` maps a label to ``(x, mean, std_or_None)``."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, (x, mean, std) in series.items():
        x, mean = np.asarray(x), np.asarray(mean)
        ax.plot(x, mean, marker="o", label=label)
        if std is not None:
            std = np.asarray(std)
            ax.fill_between(x, mean - std, mean + std, alpha=0.25)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path
