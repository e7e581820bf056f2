"""Command line entry point.

Exit codes: 0 success, 1 usage error, 2 unreadable or invalid input,
3 internal invariant violation.  Logs go to stderr; results only to the
declared output paths.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, PipelineConfig, load_config
from .evaluation import NYC_LANDCOVER_MAPPING, error_map, evaluate_label_map, format_table, metrics_csv
from .features import NoValidCells as NoFeatureCells
from .features import sample_features, write_features_csv
from .labeling import CLASS_CODES, label_scene, pseudo_rgb, render_labels
from .point_io import LasError, XyzError, read_las, read_xyz_text, write_las_file
from .raster import (GridSpec, RasterError, read_ascii_grid, read_label_grid, resample_nearest,
                     write_ascii_grid, write_ppm)
from .stats import AllNodata, detrend_elevation, rasterize_statistics, read_stats_dir, write_stats_dir
from .synth import DoesNotFit, ObjectOutOfExtent, synth_scene, write_sidecar
from .trees import NoValidCells, carbon_by_tile, carbon_density, find_trees, write_geojson

logger = logging.getLogger("lidarlabel")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_INTERNAL = 0, 1, 2, 3
INPUT_ERRORS = (OSError, ConfigError, ObjectOutOfExtent, DoesNotFit, LasError, XyzError, RasterError, AllNodata, NoValidCells,
                NoFeatureCells, json.JSONDecodeError, KeyError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_run_manifest(out: Path, command: str, cfg: PipelineConfig, outputs) -> None:
    manifest = {"command": command, "version": __version__, "config": cfg.to_dict(),
                "outputs": sorted(str(o) for o in outputs)}
    (out / "run.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _require_file(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"input not found: {p}")
    return p


# ------------------------------------------------------------------ commands

def cmd_synth(args, cfg: PipelineConfig) -> int:
    out = _out_dir(args.out)
    scene_cfg = cfg.scene_config()
    scene = synth_scene(scene_cfg)
    logger.info("synthesised %d points on a %dx%d grid", len(scene.points), *scene.truth.spec.shape[::-1])
    outputs = ["truth.asc", "truth.ppm", "scene.json"]
    if args.format == "xyz":
        p = scene.points
        with open(out / "points.xyz", "w") as f:
            f.write("# x,y,z,intensity,return_number,number_of_returns\n")
            for row in zip(p.x, p.y, p.z, p.intensity, p.return_number, p.number_of_returns):
                f.write("%.3f,%.3f,%.3f,%d,%d,%d\n" % row)
        outputs.append("points.xyz")
    else:
        write_las_file(out / "points.las", scene.points)
        outputs.append("points.las")
    write_ascii_grid(scene.truth, out / "truth.asc")
    write_ppm(render_labels(scene.truth), out / "truth.ppm")
    write_sidecar(scene, out / "scene.json")
    _write_run_manifest(out, "synth", cfg, outputs)
    return EXIT_OK


def _load_points(path: Path, fmt: str | None):
    fmt = fmt or ("xyz" if path.suffix.lower() in (".xyz", ".txt", ".csv") else "las")
    if fmt == "las":
        return read_las(path)
    with open(path) as f:
        return read_xyz_text(f, ["x", "y", "z", "intensity", "return_number", "number_of_returns"])


def cmd_rasterize(args, cfg: PipelineConfig) -> int:
    src = _require_file(args.input)
    points = _load_points(src, args.format)
    if args.like:
        spec = read_ascii_grid(_require_file(args.like)).spec
    else:
        (xmin, ymin, _), (xmax, ymax, _) = points.bounds()
        spec = GridSpec.from_bounds(xmin, ymin, xmax, ymax, cfg.grid.resolution)
    logger.info("rasterising %d points onto %dx%d cells", len(points), spec.width, spec.height)
    stats = rasterize_statistics(points, spec, cfg.grid.window_cells, workers=cfg.grid.workers)
    if cfg.detrend.enabled:
        stats = detrend_elevation(stats, cfg.grid.tile_cells, cfg.detrend.percentile)
    out = write_stats_dir(stats, args.out)
    outputs = ["manifest.json"] + [f"stats_{k}.asc" for k in "ABCDEFGHIJKLM"]
    if not args.no_figures:
        from .plotting import plot_stats_layers

        plot_stats_layers(stats, out / "stats.png")
        outputs.append("stats.png")
    _write_run_manifest(out, "rasterize", cfg, outputs)
    return EXIT_OK


def cmd_label(args, cfg: PipelineConfig) -> int:
    stats = read_stats_dir(_require_file(args.stats))
    result = label_scene(stats, cfg.grid.tile_cells, cfg.rules.road_coefficients, cfg.rules.precedence)
    out = _out_dir(args.out)
    outputs = ["labels.asc", "labels.ppm", "thresholds.json"]
    write_ascii_grid(result.labels, out / "labels.asc")
    write_ppm(render_labels(result.labels), out / "labels.ppm")
    for name, mask in result.masks.items():
        write_ascii_grid(mask, out / f"mask_{name}.asc")
        outputs.append(f"mask_{name}.asc")
    for name in ("buildings", "vegetation", "roads"):
        write_ppm(pseudo_rgb(stats, name), out / f"pseudo_{name}.ppm")
        outputs.append(f"pseudo_{name}.ppm")
    th = [{"tile_row": r0, "tile_col": c0,
           **{k: v for k, v in vars(t).items() if k != "spec"}} for (r0, c0), t in result.thresholds]
    (out / "thresholds.json").write_text(json.dumps(th, indent=2) + "\n")
    counts = {name: int(np.count_nonzero(result.labels.codes == code)) for name, code in CLASS_CODES.items()}
    logger.info("label cell counts: %s", counts)
    if not args.no_figures:
        from .plotting import plot_label_map

        plot_label_map(result.labels, out / "labels.png")
        outputs.append("labels.png")
    _write_run_manifest(out, "label", cfg, outputs)
    return EXIT_OK


def _mapping(arg: str | None):
    if arg in (None, "identity"):
        return None
    if arg == "nyc":
        return NYC_LANDCOVER_MAPPING
    data = json.loads(_require_file(arg).read_text())
    return {int(k): int(v) for k, v in data.items()}


def cmd_evaluate(args, cfg: PipelineConfig) -> int:
    pred = read_label_grid(_require_file(args.pred))
    truth = read_label_grid(_require_file(args.truth))
    if not truth.spec.matches(pred.spec):
        logger.info("resampling truth from %.3g m to %.3g m (nearest neighbour)",
                    truth.spec.resolution, pred.spec.resolution)
        truth = resample_nearest(truth, pred.spec)
    ev = evaluate_label_map(pred, truth, _mapping(args.mapping))
    out = _out_dir(args.out)
    (out / "metrics.csv").write_text(metrics_csv(ev))
    table = format_table(ev)
    (out / "metrics.txt").write_text(table + "\n")
    for line in table.splitlines():
        logger.info("%s", line)
    outputs = ["metrics.csv", "metrics.txt"]
    from .evaluation import remap_truth

    mapped, _ = remap_truth(truth, _mapping(args.mapping))
    pred_masks, truth_masks = {}, {}
    for name in ("buildings", "vegetation", "roads", "water"):
        code = CLASS_CODES[name]
        pred_masks[name], truth_masks[name] = pred.mask(code), mapped.mask(code)
        write_ppm(error_map(pred_masks[name], truth_masks[name]), out / f"error_{name}.ppm")
        outputs.append(f"error_{name}.ppm")
    if not args.no_figures:
        from .plotting import plot_error_maps, plot_label_map

        plot_error_maps(pred_masks, truth_masks, out / "error_maps.png")
        plot_label_map(pred, out / "labels_vs_truth.png", truth=mapped)
        outputs += ["error_maps.png", "labels_vs_truth.png"]
    _write_run_manifest(out, "evaluate", cfg, outputs)
    return EXIT_OK


def _read_species(path: Path):
    rows = []
    with open(path, newline="") as f:
        for rec in csv.DictReader(f):
            rows.append((float(rec["x"]), float(rec["y"]), int(rec["species_code"])))
    return rows


def cmd_trees(args, cfg: PipelineConfig) -> int:
    stats = read_stats_dir(_require_file(args.stats))
    labels = read_label_grid(_require_file(args.labels))
    species = _read_species(_require_file(args.species)) if args.species else ()
    t = cfg.trees
    result = find_trees(stats, labels.mask(CLASS_CODES["vegetation"]), min_area=t.min_area,
                        max_area=t.max_area, max_eccentricity=t.max_eccentricity,
                        suppression_radius_m=t.suppression_radius_m, tile_cells=cfg.grid.tile_cells,
                        ground_percentile=cfg.detrend.percentile, species=species,
                        allometry=cfg.allometry.table())
    out = _out_dir(args.out)
    write_geojson(result.crowns, out / "crowns.geojson")
    with open(out / "carbon_tiles.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["tile_row", "tile_col", "crowns", "carbon_kg"])
        for r, c, n, kg in carbon_by_tile(stats.spec, result.crowns, cfg.grid.tile_cells):
            w.writerow([r, c, n, f"{kg:.6f}"])
    write_ascii_grid(carbon_density(stats.spec, result.crowns), out / "carbon_density.asc")
    outputs = ["crowns.geojson", "carbon_tiles.csv", "carbon_density.asc"]
    logger.info("%d crowns kept, %d segments rejected, %.1f kg carbon (placeholder allometry)",
                len(result.crowns), len(result.rejected), sum(c.carbon_kg for c in result.crowns))
    if not args.no_figures:
        from .plotting import plot_crowns

        plot_crowns(result.canopy_height, result.crowns, out / "crowns.png")
        outputs.append("crowns.png")
    _write_run_manifest(out, "trees", cfg, outputs)
    return EXIT_OK


def cmd_sample_features(args, cfg: PipelineConfig) -> int:
    stats = read_stats_dir(_require_file(args.stats))
    labels = read_label_grid(_require_file(args.labels))
    seed = cfg.seed if args.seed is None else args.seed
    samples = sample_features(stats, labels, args.per_class, seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_features_csv(samples, out)
    logger.info("wrote %d feature samples to %s", len(samples), out)
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON pipeline config (defaults when omitted)")
    common.add_argument("-v", "--verbose", action="store_true")
    common.add_argument("--no-figures", action="store_true", help="skip matplotlib figures")

    p = _Parser(prog="lidarlabel", description="Rule-based land-cover labels from LiDAR statistics.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic scene")
    s.add_argument("--out", required=True)
    s.add_argument("--format", choices=("las", "xyz"), default="las")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("rasterize", parents=[common], help="point cloud -> 13 statistics layers")
    s.add_argument("--input", required=True)
    s.add_argument("--format", choices=("las", "xyz"))
    s.add_argument("--like", help="take the output grid from this .asc raster")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_rasterize)

    s = sub.add_parser("label", parents=[common], help="statistics -> class masks and label map")
    s.add_argument("--stats", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_label)

    s = sub.add_parser("evaluate", parents=[common], help="score a label map against a reference")
    s.add_argument("--pred", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--mapping", help="identity (default), nyc, or a JSON file {truth_code: class_code}")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("trees", parents=[common], help="tree crowns, heights and carbon")
    s.add_argument("--stats", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--species", help="CSV with x,y,species_code reference points")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_trees)

    s = sub.add_parser("sample-features", parents=[common], help="labelled 13-feature samples as CSV")
    s.add_argument("--stats", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--per-class", type=int, required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample_features)
    return p


def _setup_logging(verbose: bool) -> None:
    root = logging.getLogger()
    for h in list(root.handlers):
        if getattr(h, "_lidarlabel", False):
            root.removeHandler(h)
    handler = logging.StreamHandler(sys.stderr)
    handler._lidarlabel = True
    handler.setFormatter(logging.Formatter("level=%(levelname)s logger=%(name)s msg=%(message)s"))
    root.addHandler(handler)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
    except UsageError as exc:
        sys.stderr.write(str(exc))
        return EXIT_USAGE
    _setup_logging(args.verbose)
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except INPUT_ERRORS as exc:
        logger.error("input error: %s", exc)
        return EXIT_INPUT
    except Exception:
        logger.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
