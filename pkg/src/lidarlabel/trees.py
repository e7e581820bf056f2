"""Tree crowns from a vegetation mask and the maximum-elevation layer.

Flow: vegetation mask -> 4-connected components -> crop canopy height ->
marker watershed -> shape/size filter -> per-crown height and carbon.
"""

from __future__ import annotations

import heapq
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage

from .raster import NODATA_CODE, BinaryMask, GridSpec, LabelRaster, Raster, check_same_grid
from .stats import StatsRaster, ground_elevation

logger = logging.getLogger(__name__)

FOUR = ndimage.generate_binary_structure(2, 1)
EIGHT = ndimage.generate_binary_structure(2, 2)


class NoValidCells(ValueError):
    pass


class UnknownSpeciesCode(UserWarning):
    pass


# ------------------------------------------------------------ components and outlines

@dataclass
class Component:
    label: int
    rows: np.ndarray
    cols: np.ndarray
    polygon: list[tuple[float, float]]

    @property
    def size(self) -> int:
        return int(self.rows.size)


def _ring_area(ring) -> float:
    xs = np.array([p[0] for p in ring])
    ys = np.array([p[1] for p in ring])
    return 0.5 * float(np.dot(xs, np.roll(ys, -1)) - np.dot(ys, np.roll(xs, -1)))


def trace_outline(mask: np.ndarray) -> list[tuple[int, int]]:
    """Outer boundary of a 4-connected cell set along cell edges.

    Returns vertices as (col, -row) lattice points, counter-clockwise, with
    collinear vertices dropped.  At diagonal pinch points the walk turns
    toward the current cell, so diagonal neighbours stay separate.
    """
    m = np.pad(np.asarray(mask, dtype=bool), 1)
    rr, cc = np.nonzero(m)
    out_edges: dict[tuple[int, int], list[tuple[int, int]]] = {}

    def add(a, b):
        out_edges.setdefault(a, []).append(b)

    for r, c in zip(rr.tolist(), cc.tolist()):
        # vertices in (X, Y) = (col, -row); interior kept on the left
        tl, tr, br, bl = (c, -r), (c + 1, -r), (c + 1, -r - 1), (c, -r - 1)
        if not m[r + 1, c]:
            add(bl, br)
        if not m[r, c + 1]:
            add(br, tr)
        if not m[r - 1, c]:
            add(tr, tl)
        if not m[r, c - 1]:
            add(tl, bl)

    rings = []
    while out_edges:
        start = min(out_edges)
        ring = [start]
        prev = start
        cur = out_edges[start].pop()
        if not out_edges[start]:
            del out_edges[start]
        while cur != start:
            ring.append(cur)
            options = out_edges[cur]
            d = (cur[0] - prev[0], cur[1] - prev[1])
            if len(options) > 1:
                left = (cur[0] - d[1], cur[1] + d[0])
                nxt = left if left in options else options[0]
                options.remove(nxt)
            else:
                nxt = options.pop()
            if not options:
                del out_edges[cur]
            prev, cur = cur, nxt
        rings.append(ring)
    outer = max(rings, key=_ring_area)
    # undo padding and drop collinear vertices
    pts = [(x - 1, y + 1) for x, y in outer]
    simple = []
    n = len(pts)
    for i in range(n):
        a, b, c = pts[i - 1], pts[i], pts[(i + 1) % n]
        if (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]) != 0:
            simple.append(b)
    return simple


def _to_world(spec: GridSpec, ring, row0: int = 0, col0: int = 0) -> list[tuple[float, float]]:
    res = spec.resolution
    pts = [(spec.x0 + (x + col0) * res, spec.y0 + (y - row0) * res) for x, y in ring]
    return pts + [pts[0]]


def mask_to_components(mask: BinaryMask) -> list[Component]:
    """4-connected components of the mask, each with its outer outline in world units."""
    labels, n = ndimage.label(mask.bits, structure=FOUR)
    comps = []
    for k, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None:
            continue
        local = labels[sl] == k
        rows, cols = np.nonzero(local)
        ring = trace_outline(local)
        comps.append(Component(k, rows + sl[0].start, cols + sl[1].start,
                               _to_world(mask.spec, ring, sl[0].start, sl[1].start)))
    return comps


def crop_height(stats: StatsRaster, components: Sequence[Component],
                spec: GridSpec | None = None) -> Raster:
    """Maximum-elevation layer kept inside the components, nodata elsewhere."""
    if spec is not None:
        check_same_grid(stats.spec, spec)
    keep = np.zeros(stats.spec.shape, dtype=bool)
    for comp in components:
        keep[comp.rows, comp.cols] = True
    return Raster(stats.spec, np.where(keep, stats.layer("K"), np.nan))


# ------------------------------------------------------------ watershed

def smooth_height(height: Raster) -> np.ndarray:
    """3x3 mean over valid neighbours; nodata stays nodata."""
    valid = height.valid
    v = np.where(valid, height.values, 0.0)
    total = ndimage.uniform_filter(v, size=3, mode="constant") * 9
    count = ndimage.uniform_filter(valid.astype(float), size=3, mode="constant") * 9
    with np.errstate(invalid="ignore", divide="ignore"):
        out = total / np.round(count)
    return np.where(valid, out, np.nan)


def _disc(radius: int) -> np.ndarray:
    y, x = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    return x * x + y * y <= radius * radius


def find_markers(surface: np.ndarray, radius_cells: int) -> list[tuple[int, int]]:
    """Local maxima with non-maximum suppression, in descending height order.

    A flat top counts once, at its first cell in row-major scan order.  Maxima
    are suppressed only by higher (or earlier equal) maxima within
    ``radius_cells`` in the same connected valid region.
    """
    valid = ~np.isnan(surface)
    if not valid.any():
        return []
    filled = np.where(valid, surface, -np.inf)
    region, _ = ndimage.label(valid, structure=FOUR)
    disc = _disc(radius_cells)
    cand = np.zeros(surface.shape, dtype=bool)
    # maxima are searched per region so a taller neighbour region never hides one
    for k, sl in enumerate(ndimage.find_objects(region), start=1):
        own = region[sl] == k
        local = np.where(own, filled[sl], -np.inf)
        peak = ndimage.maximum_filter(local, footprint=disc, mode="constant", cval=-np.inf)
        cand[sl] |= own & (local == peak)
    plateaus, _ = ndimage.label(cand, structure=EIGHT)
    reps = {}
    for r, c in zip(*np.nonzero(cand)):
        reps.setdefault((region[r, c], plateaus[r, c]), (int(r), int(c)))
    order = sorted(reps.values(), key=lambda rc: (-filled[rc], rc[0] * surface.shape[1] + rc[1]))
    kept: list[tuple[int, int]] = []
    r2 = radius_cells * radius_cells
    for r, c in order:
        if any(region[r, c] == region[kr, kc] and (r - kr) ** 2 + (c - kc) ** 2 <= r2 for kr, kc in kept):
            continue
        kept.append((r, c))
    return kept


def flood_from_markers(surface: np.ndarray, markers: Sequence[tuple[int, int]]) -> np.ndarray:
    """Priority flood on the inverted surface: highest cells are claimed first.

    Returns segment ids 1..len(markers), and NODATA_CODE on nodata cells.
    Ties in height are resolved first-in first-out.
    """
    h, w = surface.shape
    valid = ~np.isnan(surface)
    seg = np.where(valid, 0, NODATA_CODE).astype(np.int32)
    heap: list[tuple[float, int, int, int]] = []
    counter = 0
    for k, (r, c) in enumerate(markers, start=1):
        seg[r, c] = k
        heapq.heappush(heap, (-surface[r, c], counter, r, c))
        counter += 1
    while heap:
        _, _, r, c = heapq.heappop(heap)
        lab = seg[r, c]
        for nr, nc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if 0 <= nr < h and 0 <= nc < w and seg[nr, nc] == 0:
                seg[nr, nc] = lab
                heapq.heappush(heap, (-surface[nr, nc], counter, nr, nc))
                counter += 1
    return seg


@dataclass
class Segmentation:
    segments: LabelRaster     # 1..n per segment, NODATA_CODE outside the canopy
    markers: list[tuple[int, int]]
    surface: np.ndarray       # smoothed height the flood ran on


def watershed_segment(height: Raster, suppression_radius_m: float = 1.0) -> Segmentation:
    """Split canopy height into crowns by marker-based watershed.

    Markers are maxima of the 3x3-smoothed height at least
    ``suppression_radius_m`` apart; every valid cell joins exactly one segment.
    """
    surface = smooth_height(height)
    radius = max(1, math.ceil(suppression_radius_m / height.spec.resolution - 1e-9))
    markers = find_markers(surface, radius)
    seg = flood_from_markers(surface, markers)
    return Segmentation(LabelRaster(height.spec, seg), markers, surface)


# ------------------------------------------------------------ shape and filtering

def eccentricity(rows: np.ndarray, cols: np.ndarray) -> float:
    """Moment-ellipse eccentricity sqrt(1 - l2/l1) of the cell centres."""
    rows = np.asarray(rows, dtype=float)
    cols = np.asarray(cols, dtype=float)
    if rows.size < 2:
        return 0.0
    dr, dc = rows - rows.mean(), cols - cols.mean()
    cov = np.array([[np.mean(dc * dc), np.mean(dc * dr)], [np.mean(dc * dr), np.mean(dr * dr)]])
    l2, l1 = np.linalg.eigvalsh(cov)
    if l1 <= 0:
        return 0.0
    return float(math.sqrt(min(1.0, max(0.0, 1.0 - l2 / l1))))


@dataclass
class Segment:
    segment_id: int
    rows: np.ndarray
    cols: np.ndarray
    area: float
    eccentricity: float
    polygon: list[tuple[float, float]]

    @property
    def diameter(self) -> float:
        return 2.0 * math.sqrt(self.area / math.pi)


def segments_from_labels(segments: LabelRaster) -> list[Segment]:
    spec = segments.spec
    codes = np.where(segments.codes > 0, segments.codes, 0)
    out = []
    for k, sl in enumerate(ndimage.find_objects(codes), start=1):
        if sl is None:
            continue
        local = codes[sl] == k
        rows, cols = np.nonzero(local)
        # watershed regions can be 4-disconnected only through ties; outline the largest piece
        parts, npart = ndimage.label(local, structure=FOUR)
        if npart > 1:
            sizes = np.bincount(parts.ravel())[1:]
            outline_mask = parts == (int(np.argmax(sizes)) + 1)
        else:
            outline_mask = local
        ring = trace_outline(outline_mask)
        out.append(Segment(k, rows + sl[0].start, cols + sl[1].start,
                           rows.size * spec.resolution ** 2,
                           eccentricity(rows, cols),
                           _to_world(spec, ring, sl[0].start, sl[1].start)))
    return out


def filter_crowns(segments: Sequence[Segment], min_area: float = 2.0, max_area: float = 400.0,
                  max_eccentricity: float = 0.95) -> list[Segment]:
    """Keep tree-sized, roughly round segments."""
    if not (0 < min_area < max_area) or max_eccentricity <= 0:
        raise ValueError("need 0 < min_area < max_area and max_eccentricity > 0")
    return [s for s in segments
            if min_area <= s.area <= max_area and s.eccentricity <= max_eccentricity]


# ------------------------------------------------------------ height and carbon

@dataclass(frozen=True)
class AllometryParams:
    """biomass_kg = a * diameter**b * height**c; carbon = carbon_fraction * biomass."""

    a: float
    b: float
    c: float
    carbon_fraction: float = 0.5

    def __post_init__(self):
        if not (self.a > 0 and self.b >= 0 and self.c >= 0 and 0 < self.carbon_fraction < 1):
            raise ValueError(f"invalid allometry parameters {self}")


# placeholder broadleaf coefficients; replace with calibrated per-species values
GENERIC_ALLOMETRY = AllometryParams(0.08, 2.2, 0.9, 0.5)
GENERIC_SPECIES = 0


def tree_height(rows, cols, height: Raster, ground: float | np.ndarray = 0.0) -> float:
    """Crown top above ground: max height inside the crown minus ground elevation."""
    vals = height.values[rows, cols]
    ok = ~np.isnan(vals)
    if not ok.any():
        raise NoValidCells("crown has no valid height cells")
    i = int(np.argmax(np.where(ok, vals, -np.inf)))
    g = ground if np.isscalar(ground) else float(np.asarray(ground)[rows[i], cols[i]])
    return float(vals[i] - g)


def estimate_carbon(diameter: float, height: float, params: AllometryParams) -> float:
    if diameter <= 0 or height <= 0:
        raise ValueError("crown diameter and height must be positive")
    return params.carbon_fraction * params.a * diameter ** params.b * height ** params.c


def lookup_allometry(species_code: int, table: Mapping[int, AllometryParams] | None) -> AllometryParams:
    table = table or {}
    if species_code in table:
        return table[species_code]
    if species_code != GENERIC_SPECIES:
        warnings.warn(f"no allometry for species {species_code}; using generic parameters",
                      UnknownSpeciesCode, stacklevel=2)
    return table.get(GENERIC_SPECIES, GENERIC_ALLOMETRY)


@dataclass
class CrownRecord:
    crown_id: int
    polygon: list[tuple[float, float]]
    area: float
    diameter: float
    eccentricity: float
    height: float
    species_code: int
    carbon_kg: float
    center: tuple[float, float]
    rows: np.ndarray = field(repr=False)
    cols: np.ndarray = field(repr=False)


@dataclass
class TreeResult:
    crowns: list[CrownRecord]
    segmentation: Segmentation
    canopy_height: Raster
    rejected: list[Segment]


def find_trees(stats: StatsRaster, vegetation: BinaryMask, *, min_area: float = 2.0,
               max_area: float = 400.0, max_eccentricity: float = 0.95,
               suppression_radius_m: float = 1.0, ground: float | np.ndarray | None = None,
               tile_cells: int | None = None, ground_percentile: float = 1.0,
               species: Sequence[tuple[float, float, int]] = (),
               allometry: Mapping[int, AllometryParams] | None = None) -> TreeResult:
    """Run the crown pipeline on one raster.

    ``species`` holds (x, y, species_code) reference points; a crown takes the
    code of the first point falling inside it, else the generic code.
    """
    check_same_grid(stats.spec, vegetation.spec)
    comps = mask_to_components(vegetation)
    canopy = crop_height(stats, comps)
    if ground is None:
        ground = ground_elevation(stats, tile_cells, ground_percentile)
    if not canopy.valid.any():
        empty = Segmentation(LabelRaster(stats.spec, np.full(stats.spec.shape, NODATA_CODE)), [],
                             canopy.values)
        return TreeResult([], empty, canopy, [])
    seg = watershed_segment(canopy, suppression_radius_m)
    segments = segments_from_labels(seg.segments)
    kept = filter_crowns(segments, min_area, max_area, max_eccentricity)
    kept_ids = {s.segment_id for s in kept}
    rejected = [s for s in segments if s.segment_id not in kept_ids]

    species_at = {}
    for x, y, code in species:
        col, row, inside = stats.spec.world_to_cells(np.array([x]), np.array([y]))
        if inside[0]:
            k = int(seg.segments.codes[row[0], col[0]])
            if k > 0:
                species_at.setdefault(k, int(code))

    crowns = []
    for s in kept:
        h = tree_height(s.rows, s.cols, canopy, ground)
        if h <= 0:
            logger.info("segment %d has non-positive height %.2f; skipped", s.segment_id, h)
            continue
        code = species_at.get(s.segment_id, GENERIC_SPECIES)
        params = lookup_allometry(code, allometry)
        cx, cy = stats.spec.cell_center(float(s.cols.mean()), float(s.rows.mean()))
        crowns.append(CrownRecord(
            crown_id=s.segment_id, polygon=s.polygon, area=s.area, diameter=s.diameter,
            eccentricity=s.eccentricity, height=h, species_code=code,
            carbon_kg=estimate_carbon(s.diameter, h, params), center=(cx, cy),
            rows=s.rows, cols=s.cols))
    return TreeResult(crowns, seg, canopy, rejected)


# ------------------------------------------------------------ outputs

def crowns_geojson(crowns: Sequence[CrownRecord]) -> dict:
    feats = []
    for c in crowns:
        feats.append({
            "type": "Feature",
            "geometry": {"type": "Polygon", "coordinates": [[list(p) for p in c.polygon]]},
            "properties": {"crown_id": c.crown_id, "area": round(c.area, 6),
                           "diameter": round(c.diameter, 6), "eccentricity": round(c.eccentricity, 6),
                           "height": round(c.height, 6), "species_code": c.species_code,
                           "carbon_kg": round(c.carbon_kg, 6)},
        })
    return {"type": "FeatureCollection", "features": feats}


def write_geojson(crowns: Sequence[CrownRecord], path) -> None:
    with open(path, "w") as f:
        json.dump(crowns_geojson(crowns), f, indent=1)
        f.write("\n")


def carbon_density(spec: GridSpec, crowns: Sequence[CrownRecord]) -> Raster:
    """kg of carbon per square metre painted over each crown's cells; zero elsewhere."""
    out = np.zeros(spec.shape)
    for c in crowns:
        out[c.rows, c.cols] = c.carbon_kg / c.area
    return Raster(spec, out)


def carbon_by_tile(spec: GridSpec, crowns: Sequence[CrownRecord], tile_cells: int):
    """Rows of (tile_row, tile_col, crowns, carbon_kg), crowns binned by centroid."""
    totals: dict[tuple[int, int], list] = {}
    for c in crowns:
        key = (int(c.rows.mean()) // tile_cells, int(c.cols.mean()) // tile_cells)
        t = totals.setdefault(key, [0, 0.0])
        t[0] += 1
        t[1] += c.carbon_kg
    return [(r, c, n, kg) for (r, c), (n, kg) in sorted(totals.items())]
