"""Point cloud ingestion: LAS 1.2/1.4 (point formats 0-3) and delimited XYZ text.

Points travel through the pipeline as :class:`PointCloud` batches (columnar
numpy arrays).  A batch also behaves as a sequence of :class:`PointRecord`
values for callers that want one record at a time.
"""

from __future__ import annotations

import io
import logging
import os
import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

LAS_MAGIC = b"LASF"
HEADER_SIZE_12 = 227
HEADER_SIZE_14 = 375
DEFAULT_CHUNK = 65536

# core 20 bytes shared by formats 0-3; extra per-format bytes are skipped
_CORE_FIELDS = [
    ("x", "<i4"),
    ("y", "<i4"),
    ("z", "<i4"),
    ("intensity", "<u2"),
    ("bits", "u1"),
    ("classification", "u1"),
    ("scan_angle", "i1"),
    ("user_data", "u1"),
    ("point_source_id", "<u2"),
]
FORMAT_RECORD_LENGTH = {0: 20, 1: 28, 2: 26, 3: 34}


class LasError(ValueError):
    """Base class for unreadable LAS input."""


class BadMagic(LasError):
    pass


class UnsupportedFormat(LasError):
    pass


class Truncated(LasError):
    pass


class XyzError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class BadColumnCount(XyzError):
    pass


class NonNumericField(XyzError):
    pass


@dataclass(frozen=True)
class LasHeader:
    signature: bytes
    version: tuple[int, int]
    point_format_id: int
    point_count: int
    scale: tuple[float, float, float]
    offset: tuple[float, float, float]
    bbox: tuple[tuple[float, float, float], tuple[float, float, float]]
    header_size: int = HEADER_SIZE_12
    offset_to_points: int = HEADER_SIZE_12
    record_length: int = 20

    def __post_init__(self):
        if self.signature != LAS_MAGIC:
            raise BadMagic(f"bad LAS signature {self.signature!r}")
        if self.point_format_id not in FORMAT_RECORD_LENGTH:
            raise UnsupportedFormat(f"point format {self.point_format_id} not supported (0-3 only)")
        if min(self.scale) <= 0:
            raise LasError(f"non-positive scale {self.scale}")
        lo, hi = self.bbox
        if self.point_count and any(a > b for a, b in zip(lo, hi)):
            raise LasError(f"inverted bounding box {self.bbox}")


@dataclass(frozen=True, slots=True)
class PointRecord:
    x: float
    y: float
    z: float
    intensity: float = 0.0
    return_number: int = 1
    number_of_returns: int = 1
    class_code: int = 0


class PointCloud(Sequence[PointRecord]):
    """Columnar batch of points; indexing yields :class:`PointRecord`."""

    __slots__ = ("x", "y", "z", "intensity", "return_number", "number_of_returns", "class_code")

    def __init__(self, x, y, z, intensity=None, return_number=None, number_of_returns=None,
                 class_code=None):
        self.x = np.asarray(x, dtype=np.float64)
        n = self.x.shape[0]
        self.y = np.asarray(y, dtype=np.float64)
        self.z = np.asarray(z, dtype=np.float64)
        self.intensity = (np.zeros(n) if intensity is None
                          else np.asarray(intensity, dtype=np.float64))
        self.return_number = (np.ones(n, np.int32) if return_number is None
                              else np.asarray(return_number, dtype=np.int32))
        self.number_of_returns = (np.ones(n, np.int32) if number_of_returns is None
                                  else np.asarray(number_of_returns, dtype=np.int32))
        self.class_code = (np.zeros(n, np.int32) if class_code is None
                           else np.asarray(class_code, dtype=np.int32))
        for name in self.__slots__:
            if getattr(self, name).shape != (n,):
                raise ValueError(f"column {name} has shape {getattr(self, name).shape}, expected ({n},)")

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.empty(0), np.empty(0), np.empty(0))

    @classmethod
    def from_records(cls, records: Iterable[PointRecord]) -> "PointCloud":
        recs = list(records)
        if not recs:
            return cls.empty()
        cols = list(zip(*((r.x, r.y, r.z, r.intensity, r.return_number, r.number_of_returns,
                           r.class_code) for r in recs)))
        return cls(*cols)

    @classmethod
    def concatenate(cls, clouds: Iterable["PointCloud"]) -> "PointCloud":
        clouds = list(clouds)
        if not clouds:
            return cls.empty()
        return cls(*(np.concatenate([getattr(c, name) for c in clouds]) for name in cls.__slots__))

    def __len__(self) -> int:
        return self.x.shape[0]

    def __getitem__(self, i):
        if isinstance(i, (slice, np.ndarray)):
            return PointCloud(*(getattr(self, name)[i] for name in self.__slots__))
        return PointRecord(float(self.x[i]), float(self.y[i]), float(self.z[i]),
                           float(self.intensity[i]), int(self.return_number[i]),
                           int(self.number_of_returns[i]), int(self.class_code[i]))

    def __iter__(self) -> Iterator[PointRecord]:
        for i in range(len(self)):
            yield self[i]

    def bounds(self) -> tuple[tuple[float, float, float], tuple[float, float, float]]:
        if not len(self):
            return (0.0, 0.0, 0.0), (0.0, 0.0, 0.0)
        return ((float(self.x.min()), float(self.y.min()), float(self.z.min())),
                (float(self.x.max()), float(self.y.max()), float(self.z.max())))


BBox2D = tuple[float, float, float, float]  # xmin, ymin, xmax, ymax


def _read_exact(src: BinaryIO, n: int) -> bytes:
    data = src.read(n)
    if len(data) != n:
        raise Truncated(f"expected {n} bytes, got {len(data)}")
    return data


def parse_las_header(src: BinaryIO) -> LasHeader:
    """Decode the public header block. Leaves ``src`` positioned after it."""
    head = src.read(HEADER_SIZE_12)
    if head[:4] != LAS_MAGIC:
        if len(head) < 4:
            raise Truncated("file too short for a LAS header")
        raise BadMagic(f"bad LAS signature {head[:4]!r}")
    if len(head) < HEADER_SIZE_12:
        raise Truncated(f"LAS header needs {HEADER_SIZE_12} bytes, got {len(head)}")

    major, minor = head[24], head[25]
    header_size, offset_to_points = struct.unpack_from("<HI", head, 94)
    fmt_raw, record_length, legacy_count = struct.unpack_from("<BHI", head, 104)
    scale = struct.unpack_from("<3d", head, 131)
    offset = struct.unpack_from("<3d", head, 155)
    maxx, minx, maxy, miny, maxz, minz = struct.unpack_from("<6d", head, 179)

    if fmt_raw & 0xC0:
        raise UnsupportedFormat("compressed LAZ point data is not supported; decompress first")
    point_count = legacy_count
    if (major, minor) >= (1, 4) and header_size >= HEADER_SIZE_14:
        ext = _read_exact(src, HEADER_SIZE_14 - HEADER_SIZE_12)
        (count64,) = struct.unpack_from("<Q", ext, 247 - HEADER_SIZE_12)
        if legacy_count == 0:
            point_count = count64
    if fmt_raw not in FORMAT_RECORD_LENGTH:
        raise UnsupportedFormat(f"point format {fmt_raw} not supported (0-3 only)")
    if record_length < FORMAT_RECORD_LENGTH[fmt_raw]:
        raise LasError(f"record length {record_length} too short for format {fmt_raw}")

    return LasHeader(
        signature=LAS_MAGIC,
        version=(major, minor),
        point_format_id=fmt_raw,
        point_count=point_count,
        scale=tuple(scale),
        offset=tuple(offset),
        bbox=((minx, miny, minz), (maxx, maxy, maxz)),
        header_size=header_size,
        offset_to_points=offset_to_points,
        record_length=record_length,
    )


def _record_dtype(record_length: int) -> np.dtype:
    pad = record_length - 20
    fields = list(_CORE_FIELDS)
    if pad:
        fields.append(("_extra", f"V{pad}"))
    return np.dtype(fields)


def _remaining_bytes(src: BinaryIO) -> int | None:
    try:
        here = src.tell()
        end = src.seek(0, os.SEEK_END)
        src.seek(here)
        return end - here
    except (OSError, AttributeError, io.UnsupportedOperation):
        return None


class PointStream:
    """Iterator over the point block of an open LAS source.

    Reads ``chunk_size`` records at a time, so memory stays bounded by the
    buffer regardless of file size.  Records whose return number is outside
    ``1..number_of_returns`` are dropped and counted in ``corrupt_count``.
    """

    def __init__(self, src: BinaryIO, header: LasHeader, spatial_filter: BBox2D | None = None,
                 chunk_size: int = DEFAULT_CHUNK):
        self.src = src
        self.header = header
        self.spatial_filter = spatial_filter
        self.chunk_size = chunk_size
        self.corrupt_count = 0
        self.yielded = 0
        self._dtype = _record_dtype(header.record_length)
        src.seek(header.offset_to_points)
        available = _remaining_bytes(src)
        needed = header.point_count * header.record_length
        if available is not None and available < needed:
            raise Truncated(
                f"header declares {header.point_count} points but only "
                f"{available // header.record_length} records are present")

    def chunks(self) -> Iterator[PointCloud]:
        h = self.header
        left = h.point_count
        sx, sy, sz = h.scale
        ox, oy, oz = h.offset
        while left > 0:
            n = min(left, self.chunk_size)
            buf = self.src.read(n * h.record_length)
            if len(buf) != n * h.record_length:
                raise Truncated(f"point block ended after {h.point_count - left + len(buf) // h.record_length}"
                                f" of {h.point_count} records")
            left -= n
            raw = np.frombuffer(buf, dtype=self._dtype)
            rn = (raw["bits"] & 0x07).astype(np.int32)
            nr = ((raw["bits"] >> 3) & 0x07).astype(np.int32)
            ok = (rn >= 1) & (nr >= 1) & (rn <= nr)
            bad = int(n - np.count_nonzero(ok))
            if bad:
                self.corrupt_count += bad
            x = raw["x"] * sx + ox
            y = raw["y"] * sy + oy
            if self.spatial_filter is not None:
                xmin, ymin, xmax, ymax = self.spatial_filter
                ok &= (x >= xmin) & (x <= xmax) & (y >= ymin) & (y <= ymax)
            if not ok.all():
                raw, x, y, rn, nr = raw[ok], x[ok], y[ok], rn[ok], nr[ok]
            self.yielded += len(raw)
            yield PointCloud(x, y, raw["z"] * sz + oz, raw["intensity"], rn, nr,
                             raw["classification"] & 0x1F)
        if self.corrupt_count:
            logger.warning("skipped %d corrupt LAS records", self.corrupt_count)

    def __iter__(self) -> Iterator[PointRecord]:
        for chunk in self.chunks():
            yield from chunk


def stream_points(src: BinaryIO, header: LasHeader, spatial_filter: BBox2D | None = None,
                  chunk_size: int = DEFAULT_CHUNK) -> PointStream:
    return PointStream(src, header, spatial_filter, chunk_size)


def read_las(path: str | os.PathLike, spatial_filter: BBox2D | None = None) -> PointCloud:
    """Load a whole LAS file into one batch."""
    with open(path, "rb") as f:
        header = parse_las_header(f)
        return PointCloud.concatenate(stream_points(f, header, spatial_filter).chunks())


def write_las(sink: BinaryIO, points: PointCloud, scale=(0.001, 0.001, 0.001),
              offset: tuple[float, float, float] | None = None, point_format: int = 0) -> LasHeader:
    """Write ``points`` as LAS 1.2.  Only the field subset this package reads is populated."""
    if point_format not in FORMAT_RECORD_LENGTH:
        raise UnsupportedFormat(f"point format {point_format} not supported (0-3 only)")
    n = len(points)
    lo, hi = points.bounds()
    if offset is None:
        offset = tuple(float(np.floor(v)) for v in lo)
    record_length = FORMAT_RECORD_LENGTH[point_format]
    rec = np.zeros(n, dtype=_record_dtype(record_length))
    rec["x"] = np.round((points.x - offset[0]) / scale[0])
    rec["y"] = np.round((points.y - offset[1]) / scale[1])
    rec["z"] = np.round((points.z - offset[2]) / scale[2])
    rec["intensity"] = np.clip(np.round(points.intensity), 0, 65535)
    if np.any((points.return_number < 1) | (points.return_number > 7)
              | (points.number_of_returns > 7)):
        raise ValueError("return fields must lie in 1..7 for point formats 0-3")
    rec["bits"] = (points.return_number & 0x07) | ((points.number_of_returns & 0x07) << 3)
    rec["classification"] = points.class_code & 0x1F

    by_return = [int(np.count_nonzero(points.return_number == k)) for k in range(1, 6)]
    head = bytearray(HEADER_SIZE_12)
    head[0:4] = LAS_MAGIC
    head[24], head[25] = 1, 2
    head[26:26 + 9] = b"lidarlabel"[:9]
    head[58:58 + 10] = b"lidarlabel"
    struct.pack_into("<HI", head, 94, HEADER_SIZE_12, HEADER_SIZE_12)
    struct.pack_into("<IBHI", head, 100, 0, point_format, record_length, n)
    struct.pack_into("<5I", head, 111, *by_return)
    struct.pack_into("<3d", head, 131, *scale)
    struct.pack_into("<3d", head, 155, *offset)
    struct.pack_into("<6d", head, 179, hi[0], lo[0], hi[1], lo[1], hi[2], lo[2])
    sink.write(bytes(head))
    sink.write(rec.tobytes())
    return parse_las_header(io.BytesIO(bytes(head)))


def write_las_file(path: str | os.PathLike, points: PointCloud, **kwargs) -> LasHeader:
    with open(path, "wb") as f:
        return write_las(f, points, **kwargs)


XYZ_FIELDS = ("x", "y", "z", "intensity", "return_number", "number_of_returns")


def read_xyz_text(lines: Iterable[str], column_map: dict[str, int] | Sequence[str],
                  delimiter: str | None = ",") -> PointCloud:
    """Parse delimited text into points.

    ``column_map`` maps field names to column indices, or lists field names in
    column order.  Lines starting with ``#`` and blank lines are skipped.
    Missing intensity/return fields default to 0, 1, 1.
    """
    if not isinstance(column_map, dict):
        column_map = {name: i for i, name in enumerate(column_map)}
    unknown = set(column_map) - set(XYZ_FIELDS)
    if unknown or not {"x", "y", "z"} <= set(column_map):
        raise ValueError(f"column map needs x, y, z and only {XYZ_FIELDS}; got {sorted(column_map)}")
    ncols = max(column_map.values()) + 1
    cols: dict[str, list[float]] = {name: [] for name in column_map}
    for lineno, line in enumerate(lines, start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        parts = s.split(delimiter) if delimiter else s.split()
        if len(parts) < ncols:
            raise BadColumnCount(f"expected at least {ncols} columns, got {len(parts)}", lineno)
        for name, idx in column_map.items():
            try:
                cols[name].append(float(parts[idx]))
            except ValueError:
                raise NonNumericField(f"non-numeric {name} field {parts[idx].strip()!r}", lineno) from None
    n = len(cols["x"])
    rn = np.asarray(cols.get("return_number", np.ones(n)))
    nr = np.asarray(cols.get("number_of_returns", np.ones(n)))
    return PointCloud(cols["x"], cols["y"], cols["z"], cols.get("intensity"),
                      rn.astype(np.int32), nr.astype(np.int32))
