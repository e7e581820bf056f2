from dataclasses import dataclass

import numpy as np
import pytest

from lidarlabel.evaluation import evaluate_label_map
from lidarlabel.labeling import label_scene
from lidarlabel.point_io import PointCloud
from lidarlabel.raster import GridSpec
from lidarlabel.stats import detrend_elevation, rasterize_statistics
from lidarlabel.synth import Hedge, demo_scene, plant_grove, synth_scene


ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion")
    config.stash[ACCEPTANCE] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark and (rep.when == "call" or (rep.when == "setup" and rep.failed)):
        detail = dict(item.user_properties).get("detail", "")
        item.config.stash[ACCEPTANCE].append((mark.args[0], mark.args[1], rep.passed, detail))


def pytest_terminal_summary(terminalreporter, config):
    rows = sorted(config.stash.get(ACCEPTANCE, []))
    if not rows:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number, title, passed, detail in rows:
        line = f"criterion {number} {'PASS' if passed else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))


@dataclass
class Run:
    scene: object
    raw: object
    stats: object
    labels: object
    evaluation: object = None


def run_pipeline(cfg, tile_cells=512):
    scene = synth_scene(cfg)
    raw = rasterize_statistics(scene.points, scene.truth.spec, 5)
    stats = detrend_elevation(raw, tile_cells, 1.0)
    labels = label_scene(stats, tile_cells)
    return Run(scene, raw, stats, labels)


@pytest.fixture(scope="session")
def demo_run():
    run = run_pipeline(demo_scene(seed=0))
    run.evaluation = evaluate_label_map(run.labels.labels, run.scene.truth)
    return run


HEDGE = Hedge(12.0, 59.5, 52.0, 62.5, 6.0)


def grove_config(seed=3):
    return plant_grove(50, 8.0, seed=seed, extent=(64.0, 64.0), hedges=[HEDGE])


@pytest.fixture(scope="session")
def grove_run():
    return run_pipeline(grove_config())


def random_cloud(rng, n, extent=(10.0, 10.0), origin=(0.0, 0.0)):
    x = origin[0] + rng.uniform(0, extent[0], n)
    y = origin[1] + rng.uniform(0, extent[1], n)
    nr = rng.integers(1, 5, n)
    rn = np.minimum(rng.integers(1, 5, n), nr)
    return PointCloud(x, y, rng.normal(5, 2, n), rng.integers(0, 256, n).astype(float), rn, nr)


def small_spec(width=8, height=6, res=0.5, x0=0.0, y0=3.0):
    return GridSpec(x0, y0, res, width, height)


def cli_pipeline(root, config=None, figures=False):
    """Run synth, rasterize, label, evaluate, trees and sample-features into ``root``."""
    from lidarlabel.cli import main

    extra = [] if figures else ["--no-figures"]
    if config is not None:
        extra += ["--config", str(config)]
    steps = [
        ["synth", "--out", f"{root}/scene"],
        ["rasterize", "--input", f"{root}/scene/points.las", "--like", f"{root}/scene/truth.asc",
         "--out", f"{root}/stats"],
        ["label", "--stats", f"{root}/stats", "--out", f"{root}/labels"],
        ["evaluate", "--pred", f"{root}/labels/labels.asc", "--truth", f"{root}/scene/truth.asc",
         "--out", f"{root}/eval"],
        ["trees", "--stats", f"{root}/stats", "--labels", f"{root}/labels/labels.asc", "--out", f"{root}/trees"],
        ["sample-features", "--stats", f"{root}/stats", "--labels", f"{root}/labels/labels.asc",
         "--per-class", "10", "--out", f"{root}/features.csv"],
    ]
    return [main(step + extra) for step in steps]
