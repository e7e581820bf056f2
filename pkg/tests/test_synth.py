import io
import json

import numpy as np
import pytest

from lidarlabel.labeling import CLASS_CODES
from lidarlabel.point_io import write_las
from lidarlabel.synth import (Building, DoesNotFit, ObjectOutOfExtent, Pond, Road, SceneConfig, Tree,
                              circle_polygon, plant_grove, points_in_polygon, synth_scene, write_sidecar)


def mixed(seed=0, **kw):
    return SceneConfig(extent=(60.0, 60.0), seed=seed,
                       buildings=[Building(5, 5, 20, 20, 10.0)],
                       trees=[Tree(40, 40, 3, 12)],
                       roads=[Road([(0, 30), (60, 30)], width=6)],
                       ponds=[Pond(circle_polygon(45, 12, 6))], **kw)


def test_same_seed_byte_identical():
    a, b = synth_scene(mixed(3)), synth_scene(mixed(3))
    buf_a, buf_b = io.BytesIO(), io.BytesIO()
    write_las(buf_a, a.points)
    write_las(buf_b, b.points)
    assert buf_a.getvalue() == buf_b.getvalue()
    np.testing.assert_array_equal(a.truth.codes, b.truth.codes)


def test_different_seed_differs():
    assert not np.array_equal(synth_scene(mixed(1)).points.x, synth_scene(mixed(2)).points.x)


def test_no_trees_no_vegetation():
    cfg = mixed()
    cfg.trees = []
    assert not (synth_scene(cfg).truth.codes == CLASS_CODES["vegetation"]).any()


def test_point_count_over_land():
    cfg = SceneConfig(extent=(10.0, 10.0), density=10.0, seed=5)
    first = synth_scene(cfg).points.return_number == 1
    assert abs(first.sum() - 1000) <= 50


def test_pond_withholds_points():
    scene = synth_scene(mixed())
    pond = scene.config.ponds[0].polygon
    inside = points_in_polygon(scene.points.x, scene.points.y, pond)
    # only the rim, where cell centres fall outside the polygon, keeps returns
    assert inside.mean() < 0.01
    cx, cy = 45, 12
    assert np.hypot(scene.points.x[inside] - cx, scene.points.y[inside] - cy).min() > 6 - 0.3


def test_roof_returns():
    scene = synth_scene(mixed())
    p = scene.points
    b = scene.config.buildings[0]
    on = (p.x > b.x0) & (p.x < b.x1) & (p.y > b.y0) & (p.y < b.y1)
    assert (p.number_of_returns[on] == 1).all()
    assert np.std(p.z[on] - b.roof_height) <= 0.05


def test_canopy_returns():
    scene = synth_scene(mixed())
    p = scene.points
    t = scene.config.trees[0]
    on = np.hypot(p.x - t.cx, p.y - t.cy) < t.crown_radius
    assert set(np.unique(p.number_of_returns[on])) <= {2, 3, 4}
    assert (p.z[on] <= t.apex_height + 0.2).all()
    assert (p.z[on] >= 0.3 * t.apex_height - 0.2).all()
    # later returns never sit above earlier ones of the same pulse
    idx = np.flatnonzero(on & (p.return_number > 1))
    assert (p.z[idx] <= p.z[idx - 1] + 1e-9).all()


def test_road_intensities():
    scene = synth_scene(mixed())
    p = scene.points
    road = (np.abs(p.y - 30) < 2.5) & (p.x > 1) & (p.x < 59)
    marker = np.abs(p.y - 30) < 0.1
    on_dash = (p.x % 6.0) < 3.0
    assert p.intensity[marker & on_dash].min() >= 200
    assert p.intensity[road & ~(np.abs(p.y - 30) < 0.1)].max() <= 60


def test_truth_consistent_with_points():
    from lidarlabel.stats import rasterize_statistics

    scene = synth_scene(mixed(density=5.0))
    spec = scene.truth.spec
    cols, rows, inside = spec.world_to_cells(scene.points.x, scene.points.y)
    counts = np.zeros(spec.shape, int)
    np.add.at(counts, (rows[inside], cols[inside]), 1)
    codes = scene.truth.codes
    assert (counts[codes == CLASS_CODES["water"]] == 0).all()
    # a 0.3 m cell expects under one pulse at 5/m^2, so "contains" is read over
    # the cell's 5x5 statistics window: its maximum must reach the roof
    b = scene.config.buildings[0]
    stats = rasterize_statistics(scene.points, spec, 5)
    roof_cells = codes == CLASS_CODES["buildings"]
    assert (stats.layer("K")[roof_cells] >= b.roof_height - 0.2).all()


def test_precedence_building_over_tree():
    cfg = SceneConfig(extent=(30.0, 30.0), buildings=[Building(5, 5, 15, 15, 6.0)], trees=[Tree(15, 15, 3, 10)])
    truth = synth_scene(cfg).truth
    c, r = truth.spec.world_to_cell(14.0, 14.0)
    assert truth.codes[r, c] == CLASS_CODES["buildings"]


def test_out_of_extent():
    with pytest.raises(ObjectOutOfExtent):
        synth_scene(SceneConfig(extent=(10.0, 10.0), trees=[Tree(9, 9, 3, 10)]))


def test_grove_layout():
    cfg = plant_grove(50, 8.0, seed=1)
    assert len(cfg.trees) == 50
    for i, a in enumerate(cfg.trees):
        for b in cfg.trees[i + 1:]:
            assert np.hypot(a.cx - b.cx, a.cy - b.cy) > a.crown_radius + b.crown_radius
    cfg.validate()


def test_empty_grove():
    scene = synth_scene(plant_grove(0, 8.0, extent=(20.0, 20.0)))
    assert (scene.truth.codes == 0).all()


def test_grove_does_not_fit():
    with pytest.raises(DoesNotFit):
        plant_grove(10, 5.0, radius_range=(2.0, 3.0))
    with pytest.raises(DoesNotFit):
        plant_grove(50, 8.0, extent=(20.0, 20.0))


def test_draw_order_independent_of_object_order():
    a = mixed()
    b = mixed()
    b.trees = list(reversed(b.trees + [Tree(50, 50, 2, 8)]))
    a.trees = a.trees + [Tree(50, 50, 2, 8)]
    pa, pb = synth_scene(a).points, synth_scene(b).points
    np.testing.assert_array_equal(pa.x, pb.x)


def test_sidecar(tmp_path):
    scene = synth_scene(plant_grove(4, 8.0, seed=2))
    write_sidecar(scene, tmp_path / "s.json")
    data = json.loads((tmp_path / "s.json").read_text())
    assert len(data["trees"]) == 4
    back = SceneConfig.from_dict(data["config"])
    assert back == scene.config


def test_config_round_trip_regenerates_scene():
    cfg = mixed(7)
    again = SceneConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    np.testing.assert_array_equal(synth_scene(cfg).points.z, synth_scene(again).points.z)
