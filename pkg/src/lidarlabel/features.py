"""Labelled 13-feature samples for external embedding or clustering tools."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .raster import LabelRaster, check_same_grid
from .stats import LAYER_LETTERS, StatsRaster

logger = logging.getLogger(__name__)


class NoValidCells(ValueError):
    pass


@dataclass(frozen=True)
class FeatureSample:
    features: tuple[float, ...]  # layers A..M
    label: int
    cell: tuple[int, int]        # (col, row)
    world: tuple[float, float]   # cell centre


def sample_features(stats: StatsRaster, labels: LabelRaster, n_per_class: int, seed: int = 0,
                    classes: Sequence[int] | None = None) -> list[FeatureSample]:
    """Draw up to ``n_per_class`` distinct fully-valid cells per class.

    Classes are visited in ascending code order from one seeded generator, so
    the same seed always returns the same samples.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    check_same_grid(stats.spec, labels.spec)
    full = ~np.isnan(stats.data).any(axis=0) & labels.valid
    flat_codes = labels.codes.ravel()
    flat_full = full.ravel()
    if classes is None:
        classes = sorted(int(c) for c in np.unique(flat_codes[flat_full]))
    rng = np.random.default_rng(seed)
    width = stats.spec.width
    out = []
    for code in sorted(classes):
        cells = np.flatnonzero(flat_full & (flat_codes == code))
        if cells.size == 0:
            raise NoValidCells(f"class {code} has no cells with all 13 layers valid")
        if cells.size < n_per_class:
            logger.warning("class %d has only %d valid cells (%d requested)", code, cells.size, n_per_class)
            chosen = cells
        else:
            chosen = rng.choice(cells, size=n_per_class, replace=False)
        for flat in chosen.tolist():
            row, col = divmod(flat, width)
            out.append(FeatureSample(tuple(float(v) for v in stats.data[:, row, col]), code,
                                     (col, row), stats.spec.cell_center(col, row)))
    return out


def write_features_csv(samples: Sequence[FeatureSample], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(list(LAYER_LETTERS) + ["label", "col", "row", "x", "y"])
        for s in samples:
            w.writerow([repr(v) for v in s.features]
                       + [s.label, s.cell[0], s.cell[1], repr(s.world[0]), repr(s.world[1])])
