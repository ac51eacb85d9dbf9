"""Static SVG figures: distance/rank heatmaps and sweep curves."""

from __future__ import annotations

import os

import numpy as np


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "connrank"
    return plt


def _save(fig, path):
    tmp = f"{path}.tmp{os.getpid()}.svg"
    fig.savefig(tmp, format="svg", metadata={"Date": None})
    os.replace(tmp, path)


def heatmaps(distance: np.ndarray, ranks: np.ndarray, path) -> None:
    plt = _pyplot()
    fig, axes = plt.subplots(1, 2, figsize=(10, 4.5))
    for ax, mat, title in ((axes[0], distance, "distance"), (axes[1], ranks, "rank")):
        im = ax.imshow(mat, cmap="viridis", interpolation="nearest")
        ax.set_title(title)
        ax.set_xlabel("scan")
        ax.set_ylabel("scan")
        fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)


def sweep_curve(x, y, xlabel: str, path, floor=None) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(x, y, marker="o")
    if floor is not None:
        ax.axhline(floor, color="k", lw=1)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("rank sum")
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)
