"""Grid geometry, raster containers and raster file I/O.

Conventions used everywhere in the package: rows run top to bottom, the grid
origin is the top-left corner, and a cell owns its top/left edges but not its
bottom/right edges.  Float rasters carry nodata as NaN in memory; the
``GridSpec.nodata`` sentinel only appears in files.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, replace
from typing import TextIO

import numpy as np

NODATA_CODE = -1


class RasterError(ValueError):
    pass


class OutOfBounds(RasterError):
    pass


class NonNestedResolution(RasterError):
    pass


class MalformedHeader(RasterError):
    pass


class RaggedRow(RasterError):
    pass


class SpecMismatch(RasterError):
    pass


@dataclass(frozen=True)
class GridSpec:
    x0: float
    y0: float
    resolution: float
    width: int
    height: int
    nodata: float = -9999.0

    def __post_init__(self):
        if not self.resolution > 0:
            raise RasterError(f"resolution must be > 0, got {self.resolution}")
        if self.width < 1 or self.height < 1:
            raise RasterError(f"grid must be at least 1x1, got {self.width}x{self.height}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        """(xmin, ymin, xmax, ymax) in world units."""
        return (self.x0, self.y0 - self.height * self.resolution,
                self.x0 + self.width * self.resolution, self.y0)

    @classmethod
    def from_bounds(cls, xmin, ymin, xmax, ymax, resolution, nodata=-9999.0) -> "GridSpec":
        """Smallest grid on the resolution lattice covering the box."""
        x0 = _snap(xmin, resolution, math.floor)
        y0 = _snap(ymax, resolution, math.ceil)
        width = max(1, _ceil_tol((xmax - x0) / resolution))
        height = max(1, _ceil_tol((y0 - ymin) / resolution))
        # the right/bottom edges are exclusive: points on them need one more cell
        if x0 + width * resolution <= xmax:
            width += 1
        if y0 - height * resolution >= ymin:
            height += 1
        return cls(x0, y0, resolution, width, height, nodata)

    def world_to_cell(self, x: float, y: float) -> tuple[int, int]:
        col = math.floor((x - self.x0) / self.resolution)
        row = math.floor((self.y0 - y) / self.resolution)
        if not (0 <= col < self.width and 0 <= row < self.height):
            raise OutOfBounds(f"({x}, {y}) outside grid")
        return col, row

    def world_to_cells(self, x, y) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Vectorised :meth:`world_to_cell`; returns (cols, rows, inside)."""
        col = np.floor((np.asarray(x) - self.x0) / self.resolution).astype(np.int64)
        row = np.floor((self.y0 - np.asarray(y)) / self.resolution).astype(np.int64)
        inside = (col >= 0) & (col < self.width) & (row >= 0) & (row < self.height)
        return col, row, inside

    def cell_center(self, col: int, row: int) -> tuple[float, float]:
        return (self.x0 + (col + 0.5) * self.resolution,
                self.y0 - (row + 0.5) * self.resolution)

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Meshgrid of cell-center coordinates, each shaped (height, width)."""
        xs = self.x0 + (np.arange(self.width) + 0.5) * self.resolution
        ys = self.y0 - (np.arange(self.height) + 0.5) * self.resolution
        return np.meshgrid(xs, ys)

    def matches(self, other: "GridSpec") -> bool:
        tol = 1e-6 * self.resolution
        return (self.width == other.width and self.height == other.height
                and abs(self.resolution - other.resolution) <= 1e-9 * self.resolution
                and abs(self.x0 - other.x0) <= tol and abs(self.y0 - other.y0) <= tol)

    def window(self, row0: int, col0: int, height: int, width: int) -> "GridSpec":
        """Sub-grid starting at (row0, col0)."""
        return replace(self, x0=self.x0 + col0 * self.resolution,
                       y0=self.y0 - row0 * self.resolution, width=width, height=height)


def check_same_grid(*specs: GridSpec) -> None:
    first = specs[0]
    for s in specs[1:]:
        if not first.matches(s):
            raise SpecMismatch(f"grid {s} does not match {first}")


def _ceil_tol(v: float, eps: float = 1e-9) -> int:
    r = round(v)
    return int(r) if abs(v - r) < eps else math.ceil(v)


def _snap(v: float, step: float, fn) -> float:
    k = v / step
    r = round(k)
    if abs(k - r) < 1e-9:
        return r * step
    return fn(k) * step


def align_to_nested_grid(spec: GridSpec, parent_resolution: float) -> GridSpec:
    """Snap ``spec`` onto the lattice of a coarser parent grid.

    The origin moves left/up to the nearest parent-lattice corner and the grid
    grows so the original coverage is kept.  Idempotent.
    """
    ratio = parent_resolution / spec.resolution
    if ratio < 1 - 1e-9 or abs(ratio - round(ratio)) > 1e-9:
        raise NonNestedResolution(
            f"parent resolution {parent_resolution} is not an integer multiple of {spec.resolution}")
    x0 = _snap(spec.x0, parent_resolution, math.floor)
    y0 = _snap(spec.y0, parent_resolution, math.ceil)
    if x0 == spec.x0 and y0 == spec.y0:
        return spec
    xmin, ymin, xmax, ymax = spec.bounds
    width = _ceil_tol((xmax - x0) / spec.resolution)
    height = _ceil_tol((y0 - ymin) / spec.resolution)
    return replace(spec, x0=x0, y0=y0, width=width, height=height)


@dataclass(frozen=True, eq=False)
class Raster:
    spec: GridSpec
    values: np.ndarray  # (height, width) float64, NaN = nodata

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != self.spec.shape:
            raise RasterError(f"values shape {v.shape} != grid shape {self.spec.shape}")
        if np.isinf(v).any():
            raise RasterError("raster values must be finite or nodata")
        if np.any(v == self.spec.nodata):
            raise RasterError(f"value {self.spec.nodata} is the nodata sentinel; store nodata as NaN")
        object.__setattr__(self, "values", v)

    @property
    def valid(self) -> np.ndarray:
        return ~np.isnan(self.values)

    @classmethod
    def full(cls, spec: GridSpec, fill: float = np.nan) -> "Raster":
        return cls(spec, np.full(spec.shape, fill, dtype=np.float64))


@dataclass(frozen=True, eq=False)
class BinaryMask:
    spec: GridSpec
    bits: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        valid = np.asarray(self.valid, dtype=bool)
        if bits.shape != self.spec.shape or valid.shape != self.spec.shape:
            raise RasterError("mask arrays must match the grid shape")
        object.__setattr__(self, "bits", bits & valid)
        object.__setattr__(self, "valid", valid)

    def to_raster(self) -> Raster:
        v = self.bits.astype(np.float64)
        v[~self.valid] = np.nan
        return Raster(self.spec, v)


@dataclass(frozen=True, eq=False)
class LabelRaster:
    spec: GridSpec
    codes: np.ndarray  # int32; NODATA_CODE where unknown

    def __post_init__(self):
        c = np.asarray(self.codes)
        if c.shape != self.spec.shape:
            raise RasterError(f"codes shape {c.shape} != grid shape {self.spec.shape}")
        object.__setattr__(self, "codes", c.astype(np.int32))

    @property
    def valid(self) -> np.ndarray:
        return self.codes != NODATA_CODE

    def mask(self, code: int) -> BinaryMask:
        return BinaryMask(self.spec, self.codes == code, self.valid)

    def to_raster(self) -> Raster:
        v = self.codes.astype(np.float64)
        v[~self.valid] = np.nan
        return Raster(self.spec, v)

    @classmethod
    def from_raster(cls, raster: Raster) -> "LabelRaster":
        v = raster.values
        if np.any(v[raster.valid] != np.round(v[raster.valid])):
            raise RasterError("label raster holds non-integer values")
        codes = np.where(raster.valid, np.nan_to_num(v), NODATA_CODE).astype(np.int32)
        return cls(raster.spec, codes)


def resample_nearest(raster: Raster | LabelRaster, target: GridSpec):
    """Nearest-neighbour resample onto ``target``; cells outside the source become nodata."""
    cx, cy = target.cell_centers()
    cols, rows, inside = raster.spec.world_to_cells(cx, cy)
    cols = np.clip(cols, 0, raster.spec.width - 1)
    rows = np.clip(rows, 0, raster.spec.height - 1)
    if isinstance(raster, LabelRaster):
        out = np.where(inside, raster.codes[rows, cols], NODATA_CODE)
        return LabelRaster(target, out)
    out = np.where(inside, raster.values[rows, cols], np.nan)
    return Raster(target, out)


# ---------------------------------------------------------------- ESRI ASCII

def write_ascii_grid(raster: Raster | LabelRaster | BinaryMask, sink: TextIO | str | os.PathLike) -> None:
    if not isinstance(raster, Raster):
        raster = raster.to_raster()
    if isinstance(sink, (str, os.PathLike)):
        with open(sink, "w", encoding="ascii", newline="\n") as f:
            write_ascii_grid(raster, f)
        return
    s = raster.spec
    xll, yll, _, _ = s.bounds
    sink.write(f"ncols {s.width}\nnrows {s.height}\n")
    sink.write(f"xllcorner {xll!r}\nyllcorner {yll!r}\ncellsize {s.resolution!r}\n")
    sink.write(f"NODATA_value {s.nodata:.17g}\n")
    vals = np.where(raster.valid, raster.values, s.nodata)
    np.savetxt(sink, vals, fmt="%.17g", delimiter=" ")


_HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "xllcenter", "yllcenter",
                "cellsize", "nodata_value")


def read_ascii_grid(source: TextIO | str | os.PathLike) -> Raster:
    if isinstance(source, (str, os.PathLike)):
        with open(source, encoding="ascii") as f:
            return read_ascii_grid(f)
    header: dict[str, float] = {}
    line = source.readline()
    while line:
        parts = line.split()
        if len(parts) == 2 and parts[0].lower() in _HEADER_KEYS:
            try:
                header[parts[0].lower()] = float(parts[1])
            except ValueError:
                raise MalformedHeader(f"bad header value in {line.strip()!r}") from None
            line = source.readline()
        else:
            break
    for key in ("ncols", "nrows", "cellsize"):
        if key not in header:
            raise MalformedHeader(f"missing {key}")
    width, height, res = int(header["ncols"]), int(header["nrows"]), header["cellsize"]
    if "xllcorner" in header:
        xll = header["xllcorner"]
    elif "xllcenter" in header:
        xll = header["xllcenter"] - res / 2
    else:
        raise MalformedHeader("missing xllcorner/xllcenter")
    if "yllcorner" in header:
        yll = header["yllcorner"]
    elif "yllcenter" in header:
        yll = header["yllcenter"] - res / 2
    else:
        raise MalformedHeader("missing yllcorner/yllcenter")
    nodata = header.get("nodata_value", -9999.0)
    try:
        spec = GridSpec(xll, yll + height * res, res, width, height, nodata)
    except RasterError as exc:
        raise MalformedHeader(str(exc)) from None

    values = np.empty((height, width), dtype=np.float64)
    row = 0
    while line:
        parts = line.split()
        if parts:
            if row >= height:
                raise RaggedRow(f"more than {height} data rows")
            if len(parts) != width:
                raise RaggedRow(f"row {row} has {len(parts)} values, expected {width}")
            try:
                values[row] = np.array(parts, dtype=np.float64)
            except ValueError:
                raise MalformedHeader(f"non-numeric value in row {row}") from None
            row += 1
        line = source.readline()
    if row != height:
        raise RaggedRow(f"found {row} data rows, expected {height}")
    values[values == nodata] = np.nan
    return Raster(spec, values)


def read_label_grid(source) -> LabelRaster:
    return LabelRaster.from_raster(read_ascii_grid(source))


def write_ppm(rgb: np.ndarray, path: str | os.PathLike) -> None:
    """Binary PPM (P6) writer for (h, w, 3) uint8 images."""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected (h, w, 3) image, got {rgb.shape}")
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(rgb.tobytes())


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise ValueError("not a P6 PPM file")
    w, h = int(tokens[1]), int(tokens[2])
    pos += 1
    return np.frombuffer(data[pos:pos + w * h * 3], dtype=np.uint8).reshape(h, w, 3)
