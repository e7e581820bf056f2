"""Report figures written next to the tabular outputs."""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import ListedColormap  # noqa: E402

from .evaluation import error_map  # noqa: E402
from .labeling import CLASS_NAMES, PALETTE, render_labels  # noqa: E402
from .raster import BinaryMask, LabelRaster, Raster  # noqa: E402
from .stats import LAYERS, StatsRaster  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 8,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "image.interpolation": "nearest",
}


@contextmanager
def _style():
    with plt.rc_context(STYLE):
        yield


def _extent(spec):
    xmin, ymin, xmax, ymax = spec.bounds
    return (xmin, xmax, ymin, ymax)


def _save(fig, path):
    fig.savefig(path, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)


def plot_stats_layers(stats: StatsRaster, path) -> None:
    """All 13 feature layers in one panel grid."""
    with _style():
        fig, axes = plt.subplots(4, 4, figsize=(10, 10))
        for ax, (letter, name, _, _) in zip(axes.flat, LAYERS):
            layer = np.ma.masked_invalid(stats.layer(letter))
            im = ax.imshow(layer, extent=_extent(stats.spec), cmap="viridis")
            ax.set_title(f"{letter}: {name}")
            ax.set_xticks([])
            ax.set_yticks([])
            fig.colorbar(im, ax=ax, fraction=0.046, pad=0.02)
        for ax in axes.flat[len(LAYERS):]:
            ax.axis("off")
        _save(fig, path)


def plot_label_map(labels: LabelRaster, path, truth: LabelRaster | None = None) -> None:
    panels = [("rule-based labels", labels)] + ([("reference", truth)] if truth is not None else [])
    with _style():
        fig, axes = plt.subplots(1, len(panels), figsize=(5 * len(panels), 5), squeeze=False)
        for ax, (title, lab) in zip(axes[0], panels):
            ax.imshow(render_labels(lab), extent=_extent(lab.spec))
            ax.set_title(title)
            ax.set_xlabel("x [m]")
            ax.set_ylabel("y [m]")
        handles = [plt.Rectangle((0, 0), 1, 1, color=np.array(PALETTE[c]) / 255) for c in sorted(PALETTE)]
        fig.legend(handles, [CLASS_NAMES[c].replace("_", " ") for c in sorted(PALETTE)],
                   loc="lower center", ncol=len(PALETTE), frameon=False)
        _save(fig, path)


def plot_error_maps(pred: Mapping[str, BinaryMask], truth: Mapping[str, BinaryMask], path) -> None:
    """White correct, blue missed, red false alarm; one panel per class."""
    names = [n for n in pred if n in truth]
    cols = min(3, len(names))
    rows = math.ceil(len(names) / cols)
    with _style():
        fig, axes = plt.subplots(rows, cols, figsize=(4 * cols, 4 * rows), squeeze=False)
        for ax, name in zip(axes.flat, names):
            ax.imshow(error_map(pred[name], truth[name]), extent=_extent(pred[name].spec))
            ax.set_title(name)
            ax.set_xticks([])
            ax.set_yticks([])
        for ax in axes.flat[len(names):]:
            ax.axis("off")
        _save(fig, path)


def plot_crowns(canopy: Raster, crowns: Sequence, path) -> None:
    """Canopy height with crown outlines, coloured by estimated carbon."""
    with _style():
        fig, ax = plt.subplots(figsize=(6, 6))
        im = ax.imshow(np.ma.masked_invalid(canopy.values), extent=_extent(canopy.spec),
                       cmap=ListedColormap(plt.get_cmap("Greens")(np.linspace(0.3, 1, 64))))
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.02, label="canopy top [m]")
        if crowns:
            kg = np.array([c.carbon_kg for c in crowns])
            norm = plt.Normalize(kg.min(), max(kg.max(), kg.min() + 1e-9))
            cmap = plt.get_cmap("inferno")
            for c in crowns:
                xs, ys = zip(*c.polygon)
                ax.plot(xs, ys, color=cmap(norm(c.carbon_kg)), lw=1)
        ax.set_title(f"{len(crowns)} crowns, {sum(c.carbon_kg for c in crowns):.0f} kg C")
        ax.set_xlabel("x [m]")
        ax.set_ylabel("y [m]")
        _save(fig, path)
