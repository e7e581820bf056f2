"""Windowed point statistics rasterised into the 13 feature layers.

Layer letters follow the usual table order: intensity r (A-D), returns count
c (E-I), elevation e (J-M).  All standard deviations are population (divide
by n) deviations.
"""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .point_io import PointCloud, PointRecord
from .raster import GridSpec, Raster, RasterError, read_ascii_grid, write_ascii_grid

logger = logging.getLogger(__name__)

# (letter, short name, attribute, statistic)
LAYERS = (
    ("A", "r_min", "intensity", "minimum"),
    ("B", "r_max", "intensity", "maximum"),
    ("C", "r_mean", "intensity", "mean"),
    ("D", "r_std", "intensity", "standard deviation"),
    ("E", "c_min", "number_of_returns", "minimum"),
    ("F", "c_max", "number_of_returns", "maximum"),
    ("G", "c_mean", "number_of_returns", "mean"),
    ("H", "c_std", "number_of_returns", "standard deviation"),
    ("I", "c_sum", "number_of_returns", "sum"),
    ("J", "e_min", "elevation", "minimum"),
    ("K", "e_max", "elevation", "maximum"),
    ("L", "e_mean", "elevation", "mean"),
    ("M", "e_std", "elevation", "standard deviation"),
)
LAYER_LETTERS = tuple(row[0] for row in LAYERS)
LAYER_INDEX = {row[0]: i for i, row in enumerate(LAYERS)}
LAYER_INDEX.update({row[1]: i for i, row in enumerate(LAYERS)})


class NonFiniteValue(ValueError):
    pass


class AllNodata(ValueError):
    pass


# ------------------------------------------------------------ scalar accumulator

def _add_partial(partials: list[float], x: float) -> None:
    # Shewchuk's exact float summation (the algorithm behind math.fsum)
    i = 0
    for y in partials:
        if abs(x) < abs(y):
            x, y = y, x
        hi = x + y
        lo = y - (hi - x)
        if lo:
            partials[i] = lo
            i += 1
        x = hi
    partials[i:] = [x]


def _exact_sum_terms(values: list[float]) -> list[float]:
    # peel off correctly rounded residuals until the remainder is exactly zero
    terms: list[float] = []
    while True:
        r = math.fsum(values + [-t for t in terms]) if terms else math.fsum(values)
        if r == 0.0:
            return terms[::-1]
        terms.append(r)


class StatAccumulator:
    """Single-pass running statistics with an exact running sum.

    ``mean``/``m2`` follow Welford's update; ``merge`` uses the pairwise
    (Chan et al.) combination so split streams can be folded in any order.
    """

    __slots__ = ("n", "min", "max", "mean", "m2", "_partials")

    def __init__(self):
        self.n = 0
        self.min = math.inf
        self.max = -math.inf
        self.mean = 0.0
        self.m2 = 0.0
        self._partials: list[float] = []

    @classmethod
    def of(cls, values: Iterable[float]) -> "StatAccumulator":
        return cls().extend(values)

    def extend(self, values: Iterable[float], chunk_size: int = 1 << 16) -> "StatAccumulator":
        """Fold a batch of values, one chunk at a time, then merge each chunk in."""
        arr = values if isinstance(values, np.ndarray) else np.fromiter(values, dtype=np.float64)
        arr = np.asarray(arr, dtype=np.float64).ravel()
        for start in range(0, arr.size, chunk_size):
            part = arr[start:start + chunk_size]
            if not np.isfinite(part).all():
                bad = part[~np.isfinite(part)][0]
                raise NonFiniteValue(f"cannot accumulate {bad}")
            chunk = StatAccumulator()
            chunk.n = int(part.size)
            chunk.min = float(part.min())
            chunk.max = float(part.max())
            chunk._partials = _exact_sum_terms(part.tolist())
            chunk.mean = math.fsum(chunk._partials) / chunk.n
            chunk.m2 = float(np.sum(np.square(part - chunk.mean)))
            merged = self.merge(chunk)
            self.n, self.min, self.max, self.mean, self.m2 = merged.n, merged.min, merged.max, merged.mean, merged.m2
            self._partials = merged._partials
        return self

    @property
    def sum(self) -> float:
        return math.fsum(self._partials)

    def accumulate(self, value: float) -> "StatAccumulator":
        value = float(value)
        if not math.isfinite(value):
            raise NonFiniteValue(f"cannot accumulate {value}")
        self.n += 1
        if value < self.min:
            self.min = value
        if value > self.max:
            self.max = value
        delta = value - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (value - self.mean)
        _add_partial(self._partials, value)
        return self

    def merge(self, other: "StatAccumulator") -> "StatAccumulator":
        out = StatAccumulator()
        if self.n == 0 or other.n == 0:
            src = other if self.n == 0 else self
            out.n, out.min, out.max, out.mean, out.m2 = src.n, src.min, src.max, src.mean, src.m2
            out._partials = list(src._partials)
            return out
        n = self.n + other.n
        delta = other.mean - self.mean
        out.n = n
        out.min = min(self.min, other.min)
        out.max = max(self.max, other.max)
        out.mean = self.mean + delta * other.n / n
        out.m2 = self.m2 + other.m2 + delta * delta * self.n * other.n / n
        out._partials = list(self._partials)
        for p in other._partials:
            _add_partial(out._partials, p)
        return out

    __add__ = merge

    def std(self) -> float:
        """Population standard deviation; NaN when empty."""
        if self.n == 0:
            return math.nan
        return math.sqrt(max(self.m2, 0.0) / self.n)

    def finalize(self) -> dict[str, float]:
        if self.n == 0:
            nan = math.nan
            return {"n": 0, "min": nan, "max": nan, "mean": nan, "std": nan, "sum": 0.0}
        return {"n": self.n, "min": self.min, "max": self.max, "mean": self.mean,
                "std": self.std(), "sum": self.sum}

    def __repr__(self):
        return f"StatAccumulator(n={self.n}, mean={self.mean:g}, std={self.std():g})"


# ------------------------------------------------------------ per-cell moments

@dataclass
class CellMoments:
    """Vectorised accumulator state, one entry per grid cell."""

    n: np.ndarray
    mean: np.ndarray
    m2: np.ndarray
    min: np.ndarray
    max: np.ndarray
    sum: np.ndarray

    @classmethod
    def empty(cls, shape) -> "CellMoments":
        return cls(np.zeros(shape, np.int64), np.zeros(shape), np.zeros(shape),
                   np.full(shape, np.inf), np.full(shape, -np.inf), np.zeros(shape))

    @classmethod
    def from_values(cls, cell: np.ndarray, values: np.ndarray, ncells: int) -> "CellMoments":
        """Two-pass moments of ``values`` grouped by flat cell index."""
        n = np.bincount(cell, minlength=ncells)
        total = np.bincount(cell, weights=values, minlength=ncells)
        with np.errstate(invalid="ignore", divide="ignore"):
            mean = np.where(n > 0, total / n, 0.0)
        dev = values - mean[cell]
        m2 = np.bincount(cell, weights=dev * dev, minlength=ncells)
        lo = np.full(ncells, np.inf)
        hi = np.full(ncells, -np.inf)
        np.minimum.at(lo, cell, values)
        np.maximum.at(hi, cell, values)
        out = cls(n, mean, m2, lo, hi, total)
        out._settle()
        return out

    def _settle(self):
        # exact zero spread for constant cells; keep mean inside [min, max]
        has = self.n > 0
        flat = has & (self.min == self.max)
        self.mean = np.where(flat, self.min, np.clip(self.mean, np.where(has, self.min, 0),
                                                     np.where(has, self.max, 0)))
        self.m2 = np.where(flat | ~has, 0.0, np.maximum(self.m2, 0.0))
        self.mean = np.where(has, self.mean, 0.0)

    def merge(self, other: "CellMoments") -> "CellMoments":
        n = self.n + other.n
        delta = other.mean - self.mean
        with np.errstate(invalid="ignore", divide="ignore"):
            wb = np.where(n > 0, other.n / np.maximum(n, 1), 0.0)
            mean = np.where(self.n == 0, other.mean,
                            np.where(other.n == 0, self.mean, self.mean + delta * wb))
            m2 = self.m2 + other.m2 + delta * delta * self.n * wb
        out = CellMoments(n, mean, m2, np.minimum(self.min, other.min),
                          np.maximum(self.max, other.max), self.sum + other.sum)
        out._settle()
        return out

    def reshape(self, shape) -> "CellMoments":
        return CellMoments(*(a.reshape(shape) for a in
                             (self.n, self.mean, self.m2, self.min, self.max, self.sum)))

    def shifted(self, dr: int, dc: int) -> "CellMoments":
        """Grid moments moved so cell (r, c) holds the state of (r+dr, c+dc)."""
        h, w = self.n.shape
        out = CellMoments.empty((h, w))
        rs = slice(max(0, -dr), min(h, h - dr))
        cs = slice(max(0, -dc), min(w, w - dc))
        rsrc = slice(max(0, dr), min(h, h + dr))
        csrc = slice(max(0, dc), min(w, w + dc))
        for name in ("n", "mean", "m2", "min", "max", "sum"):
            getattr(out, name)[rs, cs] = getattr(self, name)[rsrc, csrc]
        return out

    def windowed(self, window_cells: int) -> "CellMoments":
        half = window_cells // 2
        acc = None
        for dr in range(-half, half + 1):
            for dc in range(-half, half + 1):
                part = self.shifted(dr, dc)
                acc = part if acc is None else acc.merge(part)
        return acc


_ATTRS = ("intensity", "number_of_returns", "z")


class GridAccumulator:
    """Per-cell accumulators for intensity, returns count and elevation on one grid.

    Feed point batches with :meth:`add`; independent accumulators over the
    same grid combine with :meth:`merge`.
    """

    def __init__(self, spec: GridSpec):
        self.spec = spec
        ncell = spec.width * spec.height
        self.moments = {a: CellMoments.empty(ncell) for a in _ATTRS}
        self.points_inside = 0

    def add(self, batch: PointCloud) -> "GridAccumulator":
        cols, rows, inside = self.spec.world_to_cells(batch.x, batch.y)
        if not inside.any():
            return self
        cell = (rows[inside] * self.spec.width + cols[inside]).astype(np.int64)
        ncell = self.spec.width * self.spec.height
        self.points_inside += int(cell.size)
        for a in _ATTRS:
            vals = getattr(batch, a)[inside].astype(np.float64)
            if not np.isfinite(vals).all():
                raise NonFiniteValue(f"non-finite {a} value in point batch")
            self.moments[a] = self.moments[a].merge(CellMoments.from_values(cell, vals, ncell))
        return self

    def merge(self, other: "GridAccumulator") -> "GridAccumulator":
        if not self.spec.matches(other.spec):
            raise RasterError("cannot merge accumulators on different grids")
        out = GridAccumulator(self.spec)
        out.moments = {a: self.moments[a].merge(other.moments[a]) for a in _ATTRS}
        out.points_inside = self.points_inside + other.points_inside
        return out

    def finalize(self, window_cells: int = 5) -> "StatsRaster":
        _check_window(window_cells)
        shape = self.spec.shape
        data = np.full((len(LAYERS),) + shape, np.nan)
        stacks = {}
        for a in _ATTRS:
            stacks[a] = self.moments[a].reshape(shape).windowed(window_cells)
        n = stacks["z"].n
        has = n > 0
        for base, a in ((0, "intensity"), (4, "number_of_returns"), (9, "z")):
            m = stacks[a]
            std = np.sqrt(np.where(has, m.m2, 0.0) / np.maximum(n, 1))
            data[base + 0] = np.where(has, m.min, np.nan)
            data[base + 1] = np.where(has, m.max, np.nan)
            data[base + 2] = np.where(has, m.mean, np.nan)
            data[base + 3] = np.where(has, std, np.nan)
        data[LAYER_INDEX["I"]] = stacks["number_of_returns"].sum
        return StatsRaster(self.spec, data, window_cells=window_cells)


def _check_window(window_cells: int) -> None:
    if window_cells < 1 or window_cells % 2 != 1:
        raise ValueError(f"window_cells must be a positive odd integer, got {window_cells}")


# ------------------------------------------------------------ StatsRaster

@dataclass(frozen=True, eq=False)
class StatsRaster:
    spec: GridSpec
    data: np.ndarray  # (13, height, width); NaN = nodata
    window_cells: int = 5
    detrended: bool = False
    ground: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.data.shape != (len(LAYERS),) + self.spec.shape:
            raise RasterError(f"stats data shape {self.data.shape} does not match grid")

    def layer(self, key: str) -> np.ndarray:
        """Layer values by letter ('A'..'M') or short name ('e_min', ...)."""
        return self.data[LAYER_INDEX[key]]

    def raster(self, key: str) -> Raster:
        return Raster(self.spec, self.layer(key))

    @property
    def empty(self) -> np.ndarray:
        """Cells whose window held no points."""
        return self.layer("I") == 0

    def window(self, row0: int, col0: int, height: int, width: int) -> "StatsRaster":
        sub = self.data[:, row0:row0 + height, col0:col0 + width]
        ground = None if self.ground is None else self.ground[row0:row0 + height, col0:col0 + width]
        return replace(self, spec=self.spec.window(row0, col0, height, width), data=sub,
                       ground=ground)


def _batches(points) -> Iterator[PointCloud]:
    if isinstance(points, PointCloud):
        yield points
        return
    pending: list[PointRecord] = []
    for item in points:
        if isinstance(item, PointCloud):
            if pending:
                yield PointCloud.from_records(pending)
                pending = []
            yield item
        else:
            pending.append(item)
            if len(pending) >= 65536:
                yield PointCloud.from_records(pending)
                pending = []
    if pending:
        yield PointCloud.from_records(pending)


def rasterize_statistics(points, spec: GridSpec, window_cells: int = 5,
                         workers: int = 1) -> StatsRaster:
    """Rasterise windowed statistics of ``points`` onto ``spec``.

    ``points`` may be a :class:`PointCloud`, an iterable of clouds (e.g. LAS
    chunks) or an iterable of :class:`PointRecord`.  With ``workers > 1`` the
    batches are accumulated on a thread pool and merged in submission order,
    so the result does not depend on scheduling.
    """
    _check_window(window_cells)
    if workers <= 1:
        acc = GridAccumulator(spec)
        for batch in _batches(points):
            acc.add(batch)
    else:
        batches = list(_batches(points))
        if len(batches) == 1 and len(batches[0]) >= 2 * workers:
            cloud = batches[0]
            bounds = np.linspace(0, len(cloud), workers + 1).astype(int)
            batches = [cloud[np.arange(a, b)] for a, b in zip(bounds[:-1], bounds[1:])]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda b: GridAccumulator(spec).add(b), batches))
        acc = parts[0] if parts else GridAccumulator(spec)
        for p in parts[1:]:
            acc = acc.merge(p)
    if acc.points_inside == 0:
        logger.warning("no points fall inside the grid extent %s; statistics are all nodata",
                       spec.bounds)
    return acc.finalize(window_cells)


def ground_elevation(stats: StatsRaster, tile_cells: int | None = None,
                     percentile: float = 1.0) -> np.ndarray:
    """Per-cell ground level: the given percentile of valid e_min in each tile."""
    emin = stats.layer("J")
    h, w = stats.spec.shape
    tile = tile_cells or max(h, w)
    out = np.full((h, w), np.nan)
    for r0 in range(0, h, tile):
        for c0 in range(0, w, tile):
            block = emin[r0:r0 + tile, c0:c0 + tile]
            vals = block[~np.isnan(block)]
            if vals.size:
                out[r0:r0 + tile, c0:c0 + tile] = np.percentile(vals, percentile)
    return out


def detrend_elevation(stats: StatsRaster, tile_cells: int | None = None,
                      percentile: float = 1.0) -> StatsRaster:
    """Level the terrain: subtract the per-tile low percentile of e_min from J, K, L.

    Results are clamped at zero from below; the spread layer M is untouched.
    """
    ground = ground_elevation(stats, tile_cells, percentile)
    if np.isnan(ground).all():
        logger.warning("no valid elevation cells; detrending skipped")
        return stats
    data = stats.data.copy()
    offset = np.nan_to_num(ground)
    for key in ("J", "K", "L"):
        i = LAYER_INDEX[key]
        data[i] = np.maximum(data[i] - offset, 0.0)
    return replace(stats, data=data, detrended=True, ground=ground)


# ------------------------------------------------------------ directory I/O

def write_stats_dir(stats: StatsRaster, directory: str | os.PathLike) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    s = stats.spec
    manifest = {
        "grid": {"x0": s.x0, "y0": s.y0, "resolution": s.resolution,
                 "width": s.width, "height": s.height, "nodata": s.nodata},
        "window_cells": stats.window_cells,
        "detrended": stats.detrended,
        "layers": [{"index": letter, "name": name, "attribute": attr, "statistic": stat,
                    "file": f"stats_{letter}.asc"} for letter, name, attr, stat in LAYERS],
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    for letter in LAYER_LETTERS:
        write_ascii_grid(stats.raster(letter), d / f"stats_{letter}.asc")
    return d


def read_stats_dir(directory: str | os.PathLike) -> StatsRaster:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    layers = []
    spec = None
    for entry in manifest["layers"]:
        r = read_ascii_grid(d / entry["file"])
        if spec is None:
            spec = r.spec
        elif not spec.matches(r.spec):
            raise RasterError(f"layer {entry['index']} grid differs from layer A")
        layers.append(r.values)
    letters = [e["index"] for e in manifest["layers"]]
    if letters != list(LAYER_LETTERS):
        raise RasterError(f"manifest lists layers {letters}, expected A-M")
    data = np.stack(layers)
    data[LAYER_INDEX["I"]] = np.nan_to_num(data[LAYER_INDEX["I"]])
    return StatsRaster(spec, data, window_cells=manifest.get("window_cells", 5),
                       detrended=manifest.get("detrended", False))
