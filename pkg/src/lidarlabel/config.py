"""Pipeline configuration: JSON in, strict keys, documented defaults."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

from .labeling import CLASS_CODES, DEFAULT_PRECEDENCE, DEFAULT_ROAD_COEFFICIENTS
from .trees import GENERIC_ALLOMETRY, AllometryParams

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class UnknownKey(ConfigError):
    pass


class RangeViolation(ConfigError):
    pass


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise RangeViolation(msg)


@dataclass
class GridConfig:
    resolution: float = 0.3
    window_cells: int = 5
    tile_cells: int = 512
    workers: int = 1

    def validate(self):
        _require(self.resolution > 0, f"grid.resolution must be > 0, got {self.resolution}")
        _require(self.window_cells >= 1 and self.window_cells % 2 == 1,
                 f"grid.window_cells must be a positive odd integer, got {self.window_cells}")
        _require(self.tile_cells >= 1, f"grid.tile_cells must be >= 1, got {self.tile_cells}")
        _require(self.workers >= 1, f"grid.workers must be >= 1, got {self.workers}")


@dataclass
class RulesConfig:
    road_coefficients: tuple[float, float, float] = DEFAULT_ROAD_COEFFICIENTS
    precedence: tuple[str, ...] = DEFAULT_PRECEDENCE

    def validate(self):
        _require(len(self.road_coefficients) == 3 and all(0 < c <= 1 for c in self.road_coefficients),
                 f"rules.road_coefficients must be three values in (0, 1], got {self.road_coefficients}")
        bad = [p for p in self.precedence if p not in CLASS_CODES or p == "bare_land"]
        _require(not bad and len(set(self.precedence)) == len(self.precedence),
                 f"rules.precedence has invalid or repeated classes: {self.precedence}")


@dataclass
class DetrendConfig:
    enabled: bool = True
    percentile: float = 1.0

    def validate(self):
        _require(0 <= self.percentile <= 100, f"detrend.percentile must be in [0, 100], got {self.percentile}")


@dataclass
class TreesConfig:
    min_area: float = 2.0
    max_area: float = 400.0
    max_eccentricity: float = 0.95
    suppression_radius_m: float = 1.0

    def validate(self):
        _require(0 < self.min_area < self.max_area, "trees: need 0 < min_area < max_area")
        _require(0 < self.max_eccentricity <= 1, "trees.max_eccentricity must be in (0, 1]")
        _require(self.suppression_radius_m > 0, "trees.suppression_radius_m must be > 0")


@dataclass
class AllometryConfig:
    generic: dict[str, float] = field(default_factory=lambda: asdict(GENERIC_ALLOMETRY))
    species: dict[str, dict[str, float]] = field(default_factory=dict)

    def validate(self):
        try:
            self.table()
        except (TypeError, ValueError) as exc:
            raise RangeViolation(f"allometry: {exc}") from None

    def table(self) -> dict[int, AllometryParams]:
        table = {0: AllometryParams(**self.generic)}
        for code, params in self.species.items():
            table[int(code)] = AllometryParams(**params)
        return table


@dataclass
class SceneSection:
    preset: str = "demo"
    density: float = 10.0
    cells: int = 512
    ground_elevation: float = 12.0
    grove_trees: int = 50
    grove_spacing: float = 8.0
    custom: dict | None = None

    def validate(self):
        _require(self.preset in ("demo", "grove", "custom"), f"scene.preset must be demo|grove|custom")
        _require(self.density > 0, f"scene.density must be > 0, got {self.density}")
        _require(self.cells >= 16, f"scene.cells must be >= 16, got {self.cells}")
        _require(self.grove_trees >= 0 and self.grove_spacing > 0, "scene: invalid grove parameters")
        _require(self.preset != "custom" or isinstance(self.custom, dict),
                 "scene.custom must hold a scene description when preset is custom")


@dataclass
class PipelineConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    rules: RulesConfig = field(default_factory=RulesConfig)
    detrend: DetrendConfig = field(default_factory=DetrendConfig)
    trees: TreesConfig = field(default_factory=TreesConfig)
    allometry: AllometryConfig = field(default_factory=AllometryConfig)
    scene: SceneSection = field(default_factory=SceneSection)
    seed: int = 0

    def validate(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if is_dataclass(v):
                v.validate()

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def scene_config(self):
        from .synth import SceneConfig, demo_scene, plant_grove

        s = self.scene
        if s.preset == "custom":
            try:
                cfg = SceneConfig.from_dict({"seed": self.seed, "resolution": self.grid.resolution, **s.custom})
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"scene.custom: {exc}") from None
        elif s.preset == "grove":
            cfg = plant_grove(s.grove_trees, s.grove_spacing, seed=self.seed,
                              resolution=self.grid.resolution, ground_elevation=s.ground_elevation)
        else:
            cfg = demo_scene(self.seed, s.cells, self.grid.resolution, s.ground_elevation)
        cfg.density = s.density
        return cfg


def _coerce(value: Any, default: Any, where: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise RangeViolation(f"{where} must be true or false")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise RangeViolation(f"{where} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise RangeViolation(f"{where} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise RangeViolation(f"{where} must be a list")
        return tuple(value)
    return value


def _build(cls, data: dict, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'} must be a JSON object")
    known = {f.name: f for f in fields(cls)}
    for key in data:
        if key not in known:
            raise UnknownKey(f"unknown config key: {prefix}{key}")
    obj = cls()
    for key, value in data.items():
        default = getattr(obj, key)
        where = f"{prefix}{key}"
        if is_dataclass(default):
            setattr(obj, key, _build(type(default), value, where + "."))
        elif default is None or isinstance(default, dict):
            if value is not None and not isinstance(value, dict):
                raise RangeViolation(f"{where} must be an object")
            setattr(obj, key, value)
        else:
            setattr(obj, key, _coerce(value, default, where))
    return obj


def config_from_dict(data: dict) -> PipelineConfig:
    cfg = _build(PipelineConfig, data, "")
    cfg.validate()
    return cfg


def load_config(path: str | Path | None) -> PipelineConfig:
    """Read a JSON config; absent fields take defaults. ``None`` gives the defaults."""
    if path is None:
        cfg = config_from_dict({})
    else:
        text = Path(path).read_text()
        try:
            data = json.loads(text) if text.strip() else {}
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        cfg = config_from_dict(data)
    logger.info("effective config: %s", json.dumps(cfg.to_dict(), sort_keys=True))
    return cfg
