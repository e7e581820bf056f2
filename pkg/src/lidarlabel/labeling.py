"""Physical threshold rules that turn feature layers into land-cover masks.

Buildings and vegetation compare each cell against scene (tile) means of the
referenced layers; roads use static fractions of the scene's maximum
reflectance and maximum levelled elevation; water is any cell whose window
returned no laser signal at all.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .raster import BinaryMask, GridSpec, LabelRaster, SpecMismatch, check_same_grid
from .stats import AllNodata, StatsRaster

logger = logging.getLogger(__name__)

BARE_LAND, BUILDINGS, VEGETATION, ROADS, WATER = 0, 1, 2, 3, 4
CLASS_CODES = {"bare_land": BARE_LAND, "buildings": BUILDINGS, "vegetation": VEGETATION,
               "roads": ROADS, "water": WATER}
CLASS_NAMES = {v: k for k, v in CLASS_CODES.items()}
DEFAULT_PRECEDENCE = ("buildings", "vegetation", "roads", "water")
DEFAULT_ROAD_COEFFICIENTS = (0.1, 0.6, 0.1)

# bare land yellow, buildings dark green, vegetation dark purple, roads lime, water blue
PALETTE = {
    BARE_LAND: (255, 221, 0),
    BUILDINGS: (0, 100, 0),
    VEGETATION: (112, 28, 80),
    ROADS: (50, 205, 50),
    WATER: (30, 90, 255),
}

PSEUDO_RGB_LAYERS = {
    "buildings": ("J", "M", "K"),   # e_min, e_std, e_max
    "vegetation": ("F", "M", "H"),  # c_max, e_std, c_std
    "roads": ("A", "C", "J"),       # r_min, r_mean, e_min
}


class UnknownClass(ValueError):
    pass


@dataclass(frozen=True)
class RuleThresholds:
    mean_e_minus: float
    mean_e_delta: float
    mean_e_plus: float
    mean_c_plus: float
    mean_c_delta: float
    r_max: float
    e_max: float
    road_coefficients: tuple[float, float, float] = DEFAULT_ROAD_COEFFICIENTS
    spec: GridSpec | None = None


def _valid_mean(layer: np.ndarray, name: str) -> float:
    vals = layer[~np.isnan(layer)]
    if vals.size == 0:
        raise AllNodata(f"layer {name} has no valid cells")
    return float(vals.mean())


def _valid_max(layer: np.ndarray, name: str) -> float:
    vals = layer[~np.isnan(layer)]
    if vals.size == 0:
        raise AllNodata(f"layer {name} has no valid cells")
    return float(vals.max())


def compute_thresholds(stats: StatsRaster,
                       road_coefficients: Sequence[float] = DEFAULT_ROAD_COEFFICIENTS) -> RuleThresholds:
    """Scene means and maxima over valid cells of ``stats``."""
    return RuleThresholds(
        mean_e_minus=_valid_mean(stats.layer("J"), "J (e_min)"),
        mean_e_delta=_valid_mean(stats.layer("M"), "M (e_std)"),
        mean_e_plus=_valid_mean(stats.layer("K"), "K (e_max)"),
        mean_c_plus=_valid_mean(stats.layer("F"), "F (c_max)"),
        mean_c_delta=_valid_mean(stats.layer("H"), "H (c_std)"),
        r_max=_valid_max(stats.layer("B"), "B (r_max)"),
        e_max=_valid_max(stats.layer("K"), "K (e_max)"),
        road_coefficients=tuple(float(c) for c in road_coefficients),
        spec=stats.spec,
    )


def _check(stats: StatsRaster, th: RuleThresholds) -> None:
    if th.spec is not None and not th.spec.matches(stats.spec):
        raise SpecMismatch("thresholds were computed on a different grid")


def _normalize(layer: np.ndarray) -> np.ndarray:
    valid = ~np.isnan(layer)
    out = np.zeros(layer.shape, dtype=np.uint8)
    if not valid.any():
        return out
    lo, hi = layer[valid].min(), layer[valid].max()
    if hi > lo:
        scaled = (layer[valid] - lo) / (hi - lo) * 255.0
        out[valid] = np.round(scaled).astype(np.uint8)
    return out


def pseudo_rgb(stats: StatsRaster, class_name: str) -> np.ndarray:
    """False-colour (h, w, 3) uint8 composite for one class; nodata is black."""
    try:
        keys = PSEUDO_RGB_LAYERS[class_name]
    except KeyError:
        raise UnknownClass(f"no pseudo-RGB composition for {class_name!r}") from None
    return np.stack([_normalize(stats.layer(k)) for k in keys], axis=-1)


def _valid_all(stats: StatsRaster, keys) -> np.ndarray:
    valid = np.ones(stats.spec.shape, dtype=bool)
    for k in keys:
        valid &= ~np.isnan(stats.layer(k))
    return valid


def label_buildings(stats: StatsRaster, th: RuleThresholds) -> BinaryMask:
    _check(stats, th)
    e_min, e_std, e_max = stats.layer("J"), stats.layer("M"), stats.layer("K")
    valid = _valid_all(stats, ("J", "M", "K"))
    with np.errstate(invalid="ignore"):
        bits = (e_min > th.mean_e_minus) & (e_std < th.mean_e_delta) & (e_max > th.mean_e_plus)
    return BinaryMask(stats.spec, bits, valid)


def label_vegetation(stats: StatsRaster, th: RuleThresholds) -> BinaryMask:
    _check(stats, th)
    c_max, e_std, c_std = stats.layer("F"), stats.layer("M"), stats.layer("H")
    valid = _valid_all(stats, ("F", "M", "H"))
    with np.errstate(invalid="ignore"):
        bits = (c_max > th.mean_c_plus) & (e_std > th.mean_e_delta) & (c_std > th.mean_c_delta)
    return BinaryMask(stats.spec, bits, valid)


def label_roads(stats: StatsRaster, th: RuleThresholds) -> BinaryMask:
    _check(stats, th)
    k_min, k_mean, k_elev = th.road_coefficients
    r_min, r_mean, e_min = stats.layer("A"), stats.layer("C"), stats.layer("J")
    valid = _valid_all(stats, ("A", "C", "J"))
    if valid.any() and np.min(e_min[valid]) > 0.05 * th.e_max:
        logger.warning("minimum e_min %.3g exceeds 5%% of e_max %.3g; elevation looks not detrended",
                       float(np.min(e_min[valid])), th.e_max)
    with np.errstate(invalid="ignore"):
        bits = ((r_min > k_min * th.r_max) & (r_mean < k_mean * th.r_max)
                & (e_min < k_elev * th.e_max))
    return BinaryMask(stats.spec, bits, valid)


def label_water(stats: StatsRaster) -> BinaryMask:
    """Cells whose window received no returns."""
    return BinaryMask(stats.spec, stats.empty, np.ones(stats.spec.shape, dtype=bool))


def compose_label_map(masks: Mapping[str, BinaryMask],
                      precedence: Sequence[str] = DEFAULT_PRECEDENCE) -> LabelRaster:
    """One code per cell: the first class in ``precedence`` whose mask fires, else bare land."""
    if not masks:
        raise ValueError("no masks to compose")
    specs = [m.spec for m in masks.values()]
    check_same_grid(*specs)
    for name in masks:
        if name not in CLASS_CODES or name == "bare_land":
            raise UnknownClass(name)
    codes = np.full(specs[0].shape, BARE_LAND, dtype=np.int32)
    taken = np.zeros(specs[0].shape, dtype=bool)
    for name in precedence:
        if name not in masks:
            continue
        fire = masks[name].bits & ~taken
        codes[fire] = CLASS_CODES[name]
        taken |= fire
    return LabelRaster(specs[0], codes)


def label_tile(stats: StatsRaster, road_coefficients=DEFAULT_ROAD_COEFFICIENTS,
               precedence: Sequence[str] = DEFAULT_PRECEDENCE):
    """Thresholds, class masks and composite for one tile."""
    th = compute_thresholds(stats, road_coefficients)
    masks = {
        "buildings": label_buildings(stats, th),
        "vegetation": label_vegetation(stats, th),
        "roads": label_roads(stats, th),
        "water": label_water(stats),
    }
    return th, masks, compose_label_map(masks, precedence)


@dataclass
class SceneLabels:
    labels: LabelRaster
    masks: dict[str, BinaryMask]
    thresholds: list[tuple[tuple[int, int], RuleThresholds]]  # ((row0, col0), thresholds)


def label_scene(stats: StatsRaster, tile_cells: int | None = 512,
                road_coefficients=DEFAULT_ROAD_COEFFICIENTS,
                precedence: Sequence[str] = DEFAULT_PRECEDENCE) -> SceneLabels:
    """Label a whole raster tile by tile; scene means are computed per tile.

    Tiles whose window data is entirely missing become water.
    """
    h, w = stats.spec.shape
    tile = tile_cells or max(h, w)
    codes = np.zeros((h, w), dtype=np.int32)
    bits = {k: np.zeros((h, w), bool) for k in ("buildings", "vegetation", "roads", "water")}
    valid = {k: np.zeros((h, w), bool) for k in bits}
    thresholds = []
    for r0 in range(0, h, tile):
        for c0 in range(0, w, tile):
            sub = stats.window(r0, c0, min(tile, h - r0), min(tile, w - c0))
            sl = (slice(r0, r0 + sub.spec.height), slice(c0, c0 + sub.spec.width))
            if sub.empty.all():
                codes[sl] = WATER
                bits["water"][sl] = True
                valid["water"][sl] = True
                continue
            th, masks, lab = label_tile(sub, road_coefficients, precedence)
            thresholds.append(((r0, c0), th))
            codes[sl] = lab.codes
            for k, m in masks.items():
                bits[k][sl] = m.bits
                valid[k][sl] = m.valid
    masks = {k: BinaryMask(stats.spec, bits[k], valid[k]) for k in bits}
    return SceneLabels(LabelRaster(stats.spec, codes), masks, thresholds)


def render_labels(labels: LabelRaster) -> np.ndarray:
    """Palette rendering of a label map; unknown codes are black."""
    rgb = np.zeros(labels.codes.shape + (3,), dtype=np.uint8)
    for code, colour in PALETTE.items():
        rgb[labels.codes == code] = colour
    return rgb
