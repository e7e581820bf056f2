"""Rule-based land-cover labelling and tree-crown analysis from airborne LiDAR."""

__version__ = "0.1.0"

from .evaluation import evaluate_label_map, f1_score, metrics  # noqa: E402
from .labeling import label_scene  # noqa: E402
from .point_io import PointCloud, PointRecord, read_las, read_xyz_text, stream_points, write_las  # noqa: E402
from .raster import BinaryMask, GridSpec, LabelRaster, Raster  # noqa: E402
from .stats import StatsRaster, detrend_elevation, rasterize_statistics  # noqa: E402
from .synth import SceneConfig, synth_scene  # noqa: E402
from .trees import find_trees  # noqa: E402

__all__ = [
    "BinaryMask", "GridSpec", "LabelRaster", "PointCloud", "PointRecord", "Raster", "SceneConfig",
    "StatsRaster", "detrend_elevation", "evaluate_label_map", "f1_score", "find_trees", "label_scene",
    "metrics", "rasterize_statistics", "read_las", "read_xyz_text", "stream_points", "synth_scene",
    "write_las",
]
