import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lidarlabel.labeling import (BUILDINGS, CLASS_CODES, PALETTE, UnknownClass, compose_label_map,
                                 compute_thresholds, label_buildings, label_roads, label_scene,
                                 label_vegetation, label_water, pseudo_rgb, render_labels)
from lidarlabel.raster import BinaryMask, GridSpec, SpecMismatch
from lidarlabel.stats import LAYER_INDEX, AllNodata, StatsRaster
from lidarlabel.synth import Building, SceneConfig, Tree


def make_stats(shape=(1, 3), fill=1.0, **layers):
    h, w = shape
    data = np.full((13, h, w), fill, dtype=float)
    for key, v in layers.items():
        data[LAYER_INDEX[key]] = np.asarray(v, dtype=float).reshape(h, w)
    return StatsRaster(GridSpec(0.0, float(h), 1.0, w, h), data, detrended=True)


def test_uniform_layer_mean_and_max():
    th = compute_thresholds(make_stats(fill=5.0))
    assert th.mean_e_minus == 5 and th.r_max == 5 and th.e_max == 5


def test_mean_of_1_to_100():
    v = np.arange(1, 101, dtype=float)
    th = compute_thresholds(make_stats((10, 10), J=v))
    assert th.mean_e_minus == 50.5


def test_masked_mean_oracle():
    rng = np.random.default_rng(3)
    v = rng.normal(10, 3, (40, 40))
    v[rng.uniform(size=v.shape) < 0.3] = np.nan
    th = compute_thresholds(make_stats((40, 40), K=v))
    valid = [x for x in v.ravel() if x == x]
    assert th.mean_e_plus == pytest.approx(sum(valid) / len(valid), rel=1e-12)
    assert th.e_max == max(valid)


def test_all_nodata_layer_named():
    with pytest.raises(AllNodata, match="H"):
        compute_thresholds(make_stats(H=[np.nan] * 3))


def test_pseudo_rgb_layer_sources():
    s = make_stats((1, 3), J=[0, 1, 2], M=[5, 5, 5], K=[2, 0, 1])
    rgb = pseudo_rgb(s, "buildings")
    assert rgb[0, :, 0].tolist() == [0, 128, 255]
    assert rgb[0, :, 1].tolist() == [0, 0, 0]  # constant layer maps to zero
    assert rgb[0, :, 2].tolist() == [255, 0, 128]


def test_pseudo_rgb_unknown_and_nodata():
    with pytest.raises(UnknownClass):
        pseudo_rgb(make_stats(), "water")
    rgb = pseudo_rgb(make_stats(A=[1, np.nan, 3]), "roads")
    assert rgb[0, 1].tolist() == [0, 0, 0]


def test_buildings_three_cells():
    s = make_stats(J=[10, 0, 9], M=[0.1, 2, 0.2], K=[10.2, 3, 9.5])
    th = compute_thresholds(s)
    assert label_buildings(s, th).bits[0].tolist() == [True, False, True]


def test_uniform_scene_labels_nothing():
    s = make_stats((4, 4), fill=3.0)
    th = compute_thresholds(s)
    for fn in (label_buildings, label_vegetation):
        assert not fn(s, th).bits.any()
    labels = label_scene(s).labels
    assert (labels.codes == 0).all()


def test_vegetation_two_cells():
    s = make_stats((1, 2), F=[3, 1], M=[2.0, 0.1], H=[1.0, 0.0])
    th = compute_thresholds(s)
    assert label_vegetation(s, th).bits[0].tolist() == [True, False]


def test_single_return_scene_no_vegetation():
    rng = np.random.default_rng(0)
    s = make_stats((5, 5), F=np.ones(25), M=rng.uniform(0, 3, 25), H=np.zeros(25))
    assert not label_vegetation(s, compute_thresholds(s)).bits.any()


def road_stats(a, c, j):
    # r_max = 100 from B, e_max = 50 from K
    return make_stats((1, 2), A=[a, 0], C=[c, 0], J=[j, 0], B=[100, 100], K=[50, 0])


def test_road_hand_example():
    s = road_stats(15, 40, 2)
    assert label_roads(s, compute_thresholds(s)).bits[0, 0]


def test_road_low_minimum_fails():
    s = road_stats(5, 40, 2)
    assert not label_roads(s, compute_thresholds(s)).bits[0, 0]


def test_not_detrended_warning(caplog):
    s = make_stats((1, 2), J=[30, 40], K=[50, 60])
    label_roads(s, compute_thresholds(s))
    assert "not detrended" in caplog.text


def test_spec_mismatch():
    a = make_stats((2, 2))
    b = make_stats((1, 3))
    with pytest.raises(SpecMismatch):
        label_buildings(b, compute_thresholds(a))


def test_water_is_empty_window():
    s = make_stats((1, 3), I=[0, 2, 1])
    m = label_water(s)
    assert m.bits[0].tolist() == [True, False, False]


def test_rules_ignore_invalid_cells():
    s = make_stats(J=[10, np.nan, 9], M=[0.1, 2, 0.2], K=[10.2, 3, 9.5])
    m = label_buildings(s, compute_thresholds(s))
    assert m.valid[0].tolist() == [True, False, True]


def masks_from(bits: dict, shape=(1, 4)):
    spec = GridSpec(0, shape[0], 1, shape[1], shape[0])
    ones = np.ones(shape, bool)
    return {k: BinaryMask(spec, np.array(v, bool).reshape(shape), ones) for k, v in bits.items()}


def test_precedence_and_residual():
    masks = masks_from({"buildings": [1, 0, 0, 0], "vegetation": [1, 1, 0, 0],
                        "roads": [0, 1, 1, 0], "water": [0, 0, 1, 0]})
    lab = compose_label_map(masks)
    assert lab.codes[0].tolist() == [1, 2, 3, 0]


@settings(max_examples=50, deadline=None)
@given(arrays(bool, (4, 16)), st.permutations(["buildings", "vegetation", "roads", "water"]),
       st.integers(0, 2))
def test_precedence_swap_only_changes_overlaps(bits, order, i):
    masks = masks_from(dict(zip(["buildings", "vegetation", "roads", "water"], bits)), (1, 16))
    a = compose_label_map(masks, order)
    swapped = list(order)
    swapped[i], swapped[i + 1] = swapped[i + 1], swapped[i]
    b = compose_label_map(masks, swapped)
    both = masks[order[i]].bits & masks[order[i + 1]].bits
    differ = a.codes != b.codes
    assert not (differ & ~both).any()
    assert set(np.unique(a.codes)) <= {0, 1, 2, 3, 4}


def fake_stats(seed, shape=(12, 12)):
    rng = np.random.default_rng(seed)
    data = rng.uniform(0.5, 20, (13,) + shape)
    data[LAYER_INDEX["E"]] = rng.integers(1, 3, shape)
    data[LAYER_INDEX["F"]] = data[LAYER_INDEX["E"]] + rng.integers(0, 3, shape)
    return StatsRaster(GridSpec(0, shape[0], 1, shape[1], shape[0]), data, detrended=True)


def scaled(stats, keys, k):
    data = stats.data.copy()
    for key in keys:
        data[LAYER_INDEX[key]] *= k
    return StatsRaster(stats.spec, data, detrended=True)


@pytest.mark.parametrize("k", [0.1, 3.0, 100.0])
def test_scale_invariance_each_rule(k):
    s = fake_stats(1)
    cases = [(label_buildings, "JKLM"), (label_vegetation, "EFGHI"), (label_roads, "ABCD")]
    for fn, keys in cases:
        base = fn(s, compute_thresholds(s)).bits
        t = scaled(s, keys, k)
        np.testing.assert_array_equal(fn(t, compute_thresholds(t)).bits, base)


def test_per_tile_thresholds():
    s = fake_stats(2, (10, 10))
    out = label_scene(s, tile_cells=5)
    assert len(out.thresholds) == 4
    sub = s.window(5, 0, 5, 5)
    th = compute_thresholds(sub)
    np.testing.assert_array_equal(out.masks["buildings"].bits[5:, :5], label_buildings(sub, th).bits)


def test_render_palette():
    s = make_stats((1, 3), J=[10, 0, 9], M=[0.1, 2, 0.2], K=[10.2, 3, 9.5])
    rgb = render_labels(label_scene(s).labels)
    assert tuple(rgb[0, 0]) == PALETTE[BUILDINGS]


# ---------------------------------------------------------------- synthetic scenes

def test_flat_roof_interior_covered():
    from conftest import run_pipeline

    cfg = SceneConfig(extent=(60.0, 60.0), seed=4, buildings=[Building(20, 20, 40, 40, 8.0)],
                      trees=[Tree(8, 8, 3, 10), Tree(50, 50, 3, 12)])
    run = run_pipeline(cfg)
    spec = run.stats.spec
    cx, cy = spec.cell_centers()
    inner = (cx > 20.75) & (cx < 39.25) & (cy > 20.75) & (cy < 39.25)  # eroded by half a window
    frac = run.labels.masks["buildings"].bits[inner].mean()
    assert frac >= 0.9


def test_grove_canopy_interior(grove_run):
    spec = grove_run.stats.spec
    cx, cy = spec.cell_centers()
    inner = np.zeros(spec.shape, bool)
    for t in grove_run.scene.config.trees:
        inner |= np.hypot(cx - t.cx, cy - t.cy) < t.crown_radius - 0.75
    assert grove_run.labels.masks["vegetation"].bits[inner].mean() >= 0.9


def test_lane_markers_brightest_in_green(demo_run):
    rgb = pseudo_rgb(demo_run.stats, "roads")
    truth = demo_run.scene.truth.codes
    road = truth == CLASS_CODES["roads"]
    g = rgb[..., 1]
    road_y = demo_run.scene.config.roads[0].polyline[0][1]
    _, cy = demo_run.stats.spec.cell_centers()
    centre = road & (np.abs(cy - road_y) < 0.3)
    assert g[centre].mean() > g[road & ~centre].mean()
    # the brightest road cell sits within half a window (plus the stripe) of the markers
    r, c = np.unravel_index(np.argmax(np.where(road, g, 0)), g.shape)
    assert abs(cy[r, c] - road_y) <= 2.5 * 0.3 + 0.1


def test_pond_water_iou():
    from conftest import run_pipeline
    from lidarlabel.evaluation import confusion_counts, metrics
    from lidarlabel.synth import Pond, circle_polygon

    cfg = SceneConfig(extent=(90.0, 90.0), seed=2, ponds=[Pond(circle_polygon(45, 45, 30, 96))],
                      buildings=[Building(2, 2, 12, 12, 6.0)])
    run = run_pipeline(cfg)
    m = metrics(confusion_counts(run.labels.masks["water"], run.scene.truth.mask(CLASS_CODES["water"])))
    assert m.iou >= 0.95


def test_composite_equals_per_cell_oracle(demo_run):
    stats = demo_run.stats
    th = demo_run.labels.thresholds[0][1]
    L = {k: stats.layer(k) for k in "ABCFHIJKM"}
    rc, mc, ec = th.road_coefficients
    h, w = stats.spec.shape
    expect = np.zeros((h, w), int)
    for r in range(0, h, 7):
        for c in range(w):
            v = {k: float(L[k][r, c]) for k in L}
            if v["J"] > th.mean_e_minus and v["M"] < th.mean_e_delta and v["K"] > th.mean_e_plus:
                code = 1
            elif v["F"] > th.mean_c_plus and v["M"] > th.mean_e_delta and v["H"] > th.mean_c_delta:
                code = 2
            elif v["A"] > rc * th.r_max and v["C"] < mc * th.r_max and v["J"] < ec * th.e_max:
                code = 3
            elif v["I"] == 0:
                code = 4
            else:
                code = 0
            expect[r, c] = code
    np.testing.assert_array_equal(demo_run.labels.labels.codes[::7], expect[::7])
