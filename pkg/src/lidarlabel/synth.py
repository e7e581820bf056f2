"""Deterministic synthetic LiDAR scenes with per-cell ground truth.

Objects paint the ground plane with precedence building > vegetation > road >
water > ground.  Pulses are laid on a jittered lattice (one pulse per
1/density square, uniform within it), so no gap between neighbouring pulses
exceeds two lattice steps.  Each pulse produces returns according to what it
hits: one return on roofs, roads and ground, 2-4 returns through canopies, and
none over water.  Water is withheld per truth cell, so water cells hold no
points at all.

Random draw order (one ``numpy.random.default_rng(seed)`` stream):

1. pulse x jitter, then pulse y jitter (lattice order: row-major from the origin)
2. one uniform per pulse for first-return intensity
3. one standard normal per pulse for elevation jitter
4. per vegetation pulse, in pulse order: returns count, then a (n, 3) block of
   uniforms for the lower return heights and another for their intensities
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .labeling import BARE_LAND, BUILDINGS, ROADS, VEGETATION, WATER
from .point_io import PointCloud
from .raster import GridSpec, LabelRaster, _ceil_tol

Band = tuple[float, float]


class ObjectOutOfExtent(ValueError):
    pass


class DoesNotFit(ValueError):
    pass


@dataclass
class Building:
    x0: float
    y0: float
    x1: float
    y1: float
    roof_height: float
    intensity: Band = (60.0, 120.0)


@dataclass
class Tree:
    cx: float
    cy: float
    crown_radius: float
    apex_height: float
    returns: tuple[int, int] = (2, 4)
    species_code: int = 0


@dataclass
class Hedge:
    """Elongated vegetation strip whose top peaks mid-length."""

    x0: float
    y0: float
    x1: float
    y1: float
    height: float
    returns: tuple[int, int] = (2, 4)


@dataclass
class Road:
    polyline: list[tuple[float, float]]
    width: float = 8.0
    marker_width: float = 0.2
    dash: tuple[float, float] = (3.0, 3.0)
    asphalt_intensity: Band = (30.0, 60.0)
    marker_intensity: Band = (200.0, 255.0)


@dataclass
class Pond:
    polygon: list[tuple[float, float]]


@dataclass
class SceneConfig:
    extent: tuple[float, float] = (100.0, 100.0)
    density: float = 10.0
    seed: int = 0
    resolution: float = 0.3
    ground_elevation: float = 0.0
    ground_slope: tuple[float, float] = (0.0, 0.0)
    z_noise: float = 0.03
    ground_intensity: Band = (5.0, 20.0)
    vegetation_intensity: Band = (15.0, 45.0)
    buildings: list[Building] = field(default_factory=list)
    trees: list[Tree] = field(default_factory=list)
    hedges: list[Hedge] = field(default_factory=list)
    roads: list[Road] = field(default_factory=list)
    ponds: list[Pond] = field(default_factory=list)

    def validate(self) -> None:
        if not self.density > 0:
            raise ValueError(f"density must be > 0, got {self.density}")
        w, h = self.extent
        if not (w > 0 and h > 0):
            raise ValueError(f"extent must be positive, got {self.extent}")

        def inside(x, y):
            return 0 <= x <= w and 0 <= y <= h

        for b in self.buildings:
            if not (inside(b.x0, b.y0) and inside(b.x1, b.y1)) or b.x0 >= b.x1 or b.y0 >= b.y1:
                raise ObjectOutOfExtent(f"building {b} outside extent {self.extent}")
        for t in self.trees:
            r = t.crown_radius
            if not (inside(t.cx - r, t.cy - r) and inside(t.cx + r, t.cy + r)):
                raise ObjectOutOfExtent(f"tree at ({t.cx}, {t.cy}) outside extent {self.extent}")
        for g in self.hedges:
            if not (inside(g.x0, g.y0) and inside(g.x1, g.y1)):
                raise ObjectOutOfExtent(f"hedge {g} outside extent {self.extent}")
        for rd in self.roads:
            if not all(inside(x, y) for x, y in rd.polyline):
                raise ObjectOutOfExtent(f"road vertices outside extent {self.extent}")
        for p in self.ponds:
            if not all(inside(x, y) for x, y in p.polygon):
                raise ObjectOutOfExtent(f"pond vertices outside extent {self.extent}")

    def grid(self) -> GridSpec:
        w, h = self.extent
        return GridSpec(0.0, float(h), self.resolution, _ceil_tol(w / self.resolution),
                        _ceil_tol(h / self.resolution))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        kinds = {"buildings": Building, "trees": Tree, "hedges": Hedge, "roads": Road, "ponds": Pond}
        for key, kind in kinds.items():
            d[key] = [kind(**_tuplify(o)) for o in d.get(key, [])]
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown scene keys: {sorted(unknown)}")
        return cls(**_tuplify(d))


def _tuplify(d: dict) -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, list) and v and not isinstance(v[0], (dict, Building, Tree, Hedge, Road, Pond)):
            if k in ("polyline", "polygon"):
                v = [tuple(p) for p in v]
            else:
                v = tuple(v)
        out[k] = v
    return out


@dataclass
class SyntheticScene:
    points: PointCloud
    truth: LabelRaster
    config: SceneConfig

    def sidecar(self) -> dict:
        """Planted-object ground truth as a JSON-ready dict."""
        return {"config": self.config.to_dict(),
                "trees": [{"cx": t.cx, "cy": t.cy, "height": t.apex_height,
                           "crown_radius": t.crown_radius, "species_code": t.species_code}
                          for t in self.config.trees]}


# ------------------------------------------------------------------ geometry

def points_in_polygon(x: np.ndarray, y: np.ndarray, poly: Sequence[tuple[float, float]]) -> np.ndarray:
    """Even-odd rule point-in-polygon test."""
    inside = np.zeros(np.shape(x), dtype=bool)
    n = len(poly)
    for i in range(n):
        xa, ya = poly[i]
        xb, yb = poly[(i + 1) % n]
        crosses = (ya > y) != (yb > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = xa + (y - ya) * (xb - xa) / (yb - ya)
        inside ^= crosses & (x < xint)
    return inside


def _polyline_distance(x, y, polyline):
    """Distance to the polyline and the along-track position of the closest point."""
    best = np.full(np.shape(x), np.inf)
    along = np.zeros(np.shape(x))
    s0 = 0.0
    for (xa, ya), (xb, yb) in zip(polyline[:-1], polyline[1:]):
        dx, dy = xb - xa, yb - ya
        seg = math.hypot(dx, dy)
        t = np.clip(((x - xa) * dx + (y - ya) * dy) / (seg * seg), 0.0, 1.0)
        d = np.hypot(x - (xa + t * dx), y - (ya + t * dy))
        closer = d < best
        best = np.where(closer, d, best)
        along = np.where(closer, s0 + t * seg, along)
        s0 += seg
    return best, along


@dataclass
class _Paint:
    code: np.ndarray
    obj: np.ndarray          # index into the class's object list, -1 if none
    top: np.ndarray          # first-return height above local ground (vegetation/buildings)
    base: np.ndarray         # lowest canopy return height above ground
    marker: np.ndarray


def _paint(cfg: SceneConfig, x: np.ndarray, y: np.ndarray) -> _Paint:
    n = x.shape[0]
    code = np.full(n, BARE_LAND, dtype=np.int32)
    obj = np.full(n, -1, dtype=np.int64)
    top = np.zeros(n)
    base = np.zeros(n)
    marker = np.zeros(n, dtype=bool)
    free = np.ones(n, dtype=bool)

    def claim(hit, c):
        hit = hit & free
        code[hit] = c
        free[hit] = False
        return hit

    for i, b in enumerate(cfg.buildings):
        hit = claim((x >= b.x0) & (x < b.x1) & (y >= b.y0) & (y < b.y1), BUILDINGS)
        obj[hit] = i
        top[hit] = b.roof_height
    for i, t in enumerate(cfg.trees):
        d = np.hypot(x - t.cx, y - t.cy)
        hit = claim(d < t.crown_radius, VEGETATION)
        obj[hit] = i
        frac = np.sqrt(np.clip(1.0 - (d[hit] / t.crown_radius) ** 2, 0.0, 1.0))
        top[hit] = t.apex_height * (0.3 + 0.7 * frac)
        base[hit] = 0.3 * t.apex_height
    for i, g in enumerate(cfg.hedges):
        hit = claim((x >= g.x0) & (x < g.x1) & (y >= g.y0) & (y < g.y1), VEGETATION)
        obj[hit] = len(cfg.trees) + i
        long_x = (g.x1 - g.x0) >= (g.y1 - g.y0)
        u, v = (x[hit], y[hit]) if long_x else (y[hit], x[hit])
        (ua, ub), (va, vb) = ((g.x0, g.x1), (g.y0, g.y1)) if long_x else ((g.y0, g.y1), (g.x0, g.x1))
        along = 1.0 - np.abs(u - (ua + ub) / 2) / ((ub - ua) / 2)
        across = np.sqrt(np.clip(1.0 - ((v - (va + vb) / 2) / ((vb - va) / 2)) ** 2, 0.0, 1.0))
        top[hit] = g.height * (0.5 + 0.5 * along) * (0.3 + 0.7 * across)
        base[hit] = 0.3 * g.height * 0.5
    for i, rd in enumerate(cfg.roads):
        d, s = _polyline_distance(x, y, rd.polyline)
        hit = claim(d <= rd.width / 2, ROADS)
        obj[hit] = i
        period = rd.dash[0] + rd.dash[1]
        marker[hit] = (d[hit] <= rd.marker_width / 2) & (np.mod(s[hit], period) < rd.dash[0])
    for i, p in enumerate(cfg.ponds):
        hit = claim(points_in_polygon(x, y, p.polygon), WATER)
        obj[hit] = i
    return _Paint(code, obj, top, base, marker)


def _ground(cfg: SceneConfig, x, y):
    sx, sy = cfg.ground_slope
    return cfg.ground_elevation + sx * x + sy * y


def synth_scene(cfg: SceneConfig) -> SyntheticScene:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    w, h = cfg.extent
    nx = max(1, math.ceil(w * math.sqrt(cfg.density) - 1e-9))
    ny = max(1, math.ceil(h * math.sqrt(cfg.density) - 1e-9))
    n = nx * ny
    lat_y, lat_x = np.divmod(np.arange(n), nx)
    px = np.minimum((lat_x + rng.uniform(size=n)) * (w / nx), np.nextafter(w, 0.0))
    py = np.minimum((lat_y + rng.uniform(size=n)) * (h / ny), np.nextafter(h, 0.0))
    u_int = rng.uniform(size=n)
    jitter = rng.standard_normal(n) * cfg.z_noise

    paint = _paint(cfg, px, py)
    truth = truth_raster(cfg)
    cols, rows, _ = truth.spec.world_to_cells(px, py)
    rows = np.clip(rows, 0, truth.spec.height - 1)
    cols = np.clip(cols, 0, truth.spec.width - 1)
    keep = truth.codes[rows, cols] != WATER
    z = _ground(cfg, px, py) + jitter
    lo = np.full(n, cfg.ground_intensity[0])
    hi = np.full(n, cfg.ground_intensity[1])

    def band(mask, b):
        lo[mask], hi[mask] = b

    for i, b in enumerate(cfg.buildings):
        m = (paint.code == BUILDINGS) & (paint.obj == i)
        z[m] = _ground(cfg, (b.x0 + b.x1) / 2, (b.y0 + b.y1) / 2) + b.roof_height + jitter[m]
        band(m, b.intensity)
    veg = paint.code == VEGETATION
    band(veg, cfg.vegetation_intensity)
    centers = [(t.cx, t.cy) for t in cfg.trees] + [((g.x0 + g.x1) / 2, (g.y0 + g.y1) / 2) for g in cfg.hedges]
    returns = [t.returns for t in cfg.trees] + [g.returns for g in cfg.hedges]
    veg_ground = np.zeros(n)
    for i, (cx, cy) in enumerate(centers):
        m = veg & (paint.obj == i)
        veg_ground[m] = _ground(cfg, cx, cy)
    z[veg] = veg_ground[veg] + paint.top[veg] + jitter[veg]
    for i, rd in enumerate(cfg.roads):
        m = (paint.code == ROADS) & (paint.obj == i)
        band(m & ~paint.marker, rd.asphalt_intensity)
        band(m & paint.marker, rd.marker_intensity)
    intensity = lo + u_int * (hi - lo)

    # canopy pulses: extra returns spread down to the crown base
    vidx = np.flatnonzero(veg)
    rmin = np.array([returns[k][0] for k in paint.obj[vidx]], dtype=np.int64) if vidx.size else np.empty(0, np.int64)
    rmax = np.array([returns[k][1] for k in paint.obj[vidx]], dtype=np.int64) if vidx.size else np.empty(0, np.int64)
    nret_v = rng.integers(rmin, rmax + 1) if vidx.size else np.empty(0, np.int64)
    frac = rng.uniform(size=(vidx.size, 3))
    extra_int = rng.uniform(size=(vidx.size, 3))

    nret = np.ones(n, dtype=np.int64)
    nret[vidx] = nret_v
    nret = np.where(keep, nret, 0)
    total = int(nret.sum())
    owner = np.repeat(np.arange(n), nret)
    first = np.r_[0, np.cumsum(nret)[:-1]]
    rank = np.arange(total) - np.repeat(first, nret)  # 0-based return index

    out_z = z[owner].copy()
    out_i = intensity[owner].copy()
    deeper = rank > 0
    if deeper.any():
        vpos = np.full(n, -1, dtype=np.int64)
        vpos[vidx] = np.arange(vidx.size)
        vp = vpos[owner[deeper]]
        r = rank[deeper]
        # z_k = base + (z_{k-1} - base) * f_k, so heights fall monotonically
        top_rel = paint.top[owner[deeper]]
        base_rel = paint.base[owner[deeper]]
        cum = np.ones(r.size)
        for k in (1, 2, 3):
            cum = np.where(r >= k, cum * frac[vp, k - 1], cum)
        gz = veg_ground[owner[deeper]]
        out_z[deeper] = gz + base_rel + (top_rel - base_rel) * cum + jitter[owner[deeper]]
        vlo, vhi = cfg.vegetation_intensity
        out_i[deeper] = vlo + extra_int[vp, r - 1] * (vhi - vlo)

    points = PointCloud(px[owner], py[owner], out_z, np.round(out_i), rank + 1,
                        nret[owner], np.ones(total, dtype=np.int32))
    return SyntheticScene(points, truth, cfg)


def truth_raster(cfg: SceneConfig) -> LabelRaster:
    """Painted class at every cell centre of the scene grid."""
    spec = cfg.grid()
    cx, cy = spec.cell_centers()
    paint = _paint(cfg, cx.ravel(), cy.ravel())
    return LabelRaster(spec, paint.code.reshape(spec.shape))


# ------------------------------------------------------------------ fixtures

def plant_grove(n: int, spacing: float, height_range: tuple[float, float] = (8.0, 16.0),
                radius_range: tuple[float, float] = (2.0, 3.0), seed: int = 0,
                extent: tuple[float, float] | None = None, **scene_kwargs) -> SceneConfig:
    """Scene config with ``n`` trees on a jittered square lattice.

    Jitter is bounded so neighbouring crowns never touch.  The planted trees
    (centre, apex height, radius) are the config's ``trees`` list.
    """
    r_max = radius_range[1]
    if 2 * r_max >= spacing:
        raise DoesNotFit(f"crowns of radius {r_max} overlap at spacing {spacing}")
    cols = max(1, math.ceil(math.sqrt(n)))
    rows = max(1, math.ceil(n / cols))
    need = (cols * spacing, rows * spacing)
    if extent is None:
        extent = need
    elif n and (need[0] > extent[0] + 1e-9 or need[1] > extent[1] + 1e-9):
        raise DoesNotFit(f"{n} trees at spacing {spacing} need {need}, extent is {extent}")
    rng = np.random.default_rng(seed)
    jmax = 0.45 * (spacing - 2 * r_max) / 2
    jx = rng.uniform(-jmax, jmax, n)
    jy = rng.uniform(-jmax, jmax, n)
    heights = rng.uniform(*height_range, n)
    radii = rng.uniform(*radius_range, n)
    trees = []
    for k in range(n):
        row, col = divmod(k, cols)
        trees.append(Tree(cx=float((col + 0.5) * spacing + jx[k]), cy=float((row + 0.5) * spacing + jy[k]),
                          crown_radius=float(radii[k]), apex_height=float(heights[k])))
    return SceneConfig(extent=tuple(float(e) for e in extent), seed=seed, trees=trees, **scene_kwargs)


def circle_polygon(cx: float, cy: float, r: float, n: int = 48) -> list[tuple[float, float]]:
    a = np.linspace(0.0, 2 * math.pi, n, endpoint=False)
    return [(float(cx + r * math.cos(t)), float(cy + r * math.sin(t))) for t in a]


def demo_scene(seed: int = 0, cells: int = 512, resolution: float = 0.3,
               ground_elevation: float = 12.0) -> SceneConfig:
    """Mixed urban block: buildings, a marked road, a pond and a few dozen trees."""
    size = cells * resolution
    s = size / 153.6  # layout designed on a 153.6 m square
    buildings = [
        Building(8 * s, 8 * s, 34 * s, 30 * s, 9.0),
        Building(48 * s, 12 * s, 70 * s, 40 * s, 12.0),
        Building(98 * s, 8 * s, 142 * s, 34 * s, 8.0),
        Building(12 * s, 102 * s, 40 * s, 128 * s, 15.0),
    ]
    road = Road([(0.0, 76.8 * s), (size, 76.8 * s)])
    pond_c, pond_r = (122 * s, 124 * s), 15 * s
    ponds = [Pond(circle_polygon(*pond_c, pond_r))]

    rng = np.random.default_rng(seed + 7919)
    trees: list[Tree] = []
    candidates = []
    for gy in np.arange(6 * s, size - 6 * s, 10 * s):
        for gx in np.arange(6 * s, size - 6 * s, 10 * s):
            candidates.append((float(gx), float(gy)))
    order = rng.permutation(len(candidates))
    for k in order:
        cx, cy = candidates[k]
        r = float(rng.uniform(2.0, 3.5))
        apex = float(rng.uniform(8.0, 16.0))
        clear = r + 3.0
        if min(cx, cy) < r or max(cx, cy) > size - r:
            continue
        if any(b.x0 - clear < cx < b.x1 + clear and b.y0 - clear < cy < b.y1 + clear for b in buildings):
            continue
        if abs(cy - 76.8 * s) < road.width / 2 + clear:
            continue
        if math.hypot(cx - pond_c[0], cy - pond_c[1]) < pond_r + clear:
            continue
        if any(math.hypot(cx - t.cx, cy - t.cy) < r + t.crown_radius + 3.0 for t in trees):
            continue
        trees.append(Tree(cx, cy, r, apex))
        if len(trees) >= 30:
            break
    return SceneConfig(extent=(size, size), seed=seed, resolution=resolution,
                       ground_elevation=ground_elevation, buildings=buildings, trees=trees,
                       roads=[road], ponds=ponds)


def write_sidecar(scene: SyntheticScene, path) -> None:
    with open(path, "w") as f:
        json.dump(scene.sidecar(), f, indent=2)
        f.write("\n")
