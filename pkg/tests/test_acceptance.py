"""Acceptance gate: one test per criterion, each reported as a PASS/FAIL line."""

import filecmp
import io
import json
import math
import time

import numpy as np
import pytest

from conftest import HEDGE, cli_pipeline, grove_config, run_pipeline
from lidarlabel.evaluation import ConfusionCounts, evaluate_label_map, f1_score, metrics
from lidarlabel.labeling import label_scene
from lidarlabel.point_io import PointCloud, parse_las_header, stream_points, write_las
from lidarlabel.stats import LAYER_INDEX, StatAccumulator, StatsRaster, rasterize_statistics
from lidarlabel.synth import Building, Pond, Road, SceneConfig, Tree, circle_polygon, demo_scene, synth_scene
from lidarlabel.trees import find_trees
from oracles import two_pass, window_stats


@pytest.mark.acceptance(1, "F1 arithmetic reproduces the published table rows")
def test_criterion_1_table_f1(record_property):
    rows = [((.98, .62), .76), ((.52, .60), .55), ((.91, .44), .59)]
    got = [(p, r, f1_score(p, r), want) for (p, r), want in rows]
    record_property("detail", "; ".join(f"F1({p},{r})={f:.4f} vs {w}" for p, r, f, w in got))
    for p, r, f, want in got:
        assert abs(f - want) <= 0.005, f"F1({p}, {r}) = {f:.4f}, expected {want} +/- 0.005"


@pytest.mark.acceptance(2, "F1-IoU identity over 10,000 random confusion counts")
def test_criterion_2_f1_iou(record_property):
    rng = np.random.default_rng(2)
    raw = rng.integers(0, 10**6, (10_000, 4))
    start = time.perf_counter()
    worst = 0.0
    for tp, fp, fn, tn in raw.tolist():
        m = metrics(ConfusionCounts(tp, fp, fn, tn))
        if not math.isnan(m.iou):
            worst = max(worst, abs(m.f1 - 2 * m.iou / (1 + m.iou)))
    elapsed = time.perf_counter() - start
    record_property("detail", f"max |dev| {worst:.2e}, {elapsed:.2f} s")
    assert worst <= 1e-12
    assert elapsed < 1.0


@pytest.mark.acceptance(3, "streaming statistics vs two-pass oracle and 7-way merge")
def test_criterion_3_streaming(record_property):
    rng = np.random.default_rng(3)
    vals = rng.normal(50.0, 20.0, 1_000_000)
    start = time.perf_counter()
    single = StatAccumulator.of(vals).finalize()
    cuts = np.sort(rng.choice(np.arange(1, vals.size), 6, replace=False))
    parts = np.split(vals, cuts)
    acc = StatAccumulator()
    for k in rng.permutation(7):
        acc = acc.merge(StatAccumulator.of(parts[k]))
    merged = acc.finalize()
    elapsed = time.perf_counter() - start
    n, lo, hi, total, mean, std = two_pass(vals.tolist())
    assert (single["n"], single["min"], single["max"], single["sum"]) == (n, lo, hi, total)
    assert abs(single["mean"] - mean) <= 1e-9 * abs(mean)
    assert abs(single["std"] - std) <= 1e-9 * std
    assert (merged["n"], merged["min"], merged["max"], merged["sum"]) == (n, lo, hi, total)
    assert abs(merged["mean"] - single["mean"]) <= 1e-10 * abs(single["mean"])
    assert abs(merged["std"] - single["std"]) <= 1e-10 * single["std"]
    record_property("detail", f"{elapsed:.2f} s")
    assert elapsed < 5.0


@pytest.mark.acceptance(4, "windowed rasterisation vs brute-force gather per cell")
def test_criterion_4_window_oracle(record_property):
    cfg = SceneConfig(extent=(100.0, 100.0), density=10.0, seed=4,
                      buildings=[Building(10, 10, 35, 30, 9.0)],
                      trees=[Tree(70, 70, 3, 12), Tree(60, 20, 2.5, 9)],
                      roads=[Road([(0, 50), (100, 50)])], ponds=[Pond(circle_polygon(25, 80, 8))])
    scene = synth_scene(cfg)
    spec = scene.truth.spec
    start = time.perf_counter()
    got = rasterize_statistics(scene.points, spec, 5).data
    elapsed = time.perf_counter() - start
    want = window_stats(scene.points, spec, 5)
    np.testing.assert_array_equal(np.isnan(got), np.isnan(want))
    ok = ~np.isnan(want)
    exact = np.zeros(13, bool)
    exact[[LAYER_INDEX[k] for k in "ABEFIJK"]] = True  # min, max and sum layers
    np.testing.assert_array_equal(got[exact][ok[exact]], want[exact][ok[exact]])
    g, w = got[~exact][ok[~exact]], want[~exact][ok[~exact]]
    rel = np.abs(g - w) / np.maximum(np.abs(w), 1e-300)
    close = (rel <= 1e-9) | (np.abs(g - w) <= 1e-12)
    record_property("detail", f"{len(scene.points)} points, {spec.width}x{spec.height} cells, "
                              f"max rel {rel[np.abs(w) > 0].max():.1e}, {elapsed:.2f} s")
    assert close.all()
    assert elapsed < 60.0


@pytest.mark.acceptance(5, "end-to-end labelling accuracy on the demo scene")
def test_criterion_5_labelling(record_property):
    start = time.perf_counter()
    cfg = demo_scene(seed=0)
    run = run_pipeline(cfg)
    ev = evaluate_label_map(run.labels.labels, run.scene.truth)
    elapsed = time.perf_counter() - start
    assert run.labels.labels.spec.shape == (512, 512)
    assert len(cfg.buildings) >= 3 and len(cfg.trees) >= 20 and cfg.roads and cfg.ponds
    acc = {k: ev.rows[k][1].accuracy for k in ("buildings", "vegetation", "roads", "water")}
    p_b, p_v = ev.rows["buildings"][1].precision, ev.rows["vegetation"][1].precision
    record_property("detail", ", ".join(f"{k} {v:.3f}" for k, v in acc.items())
                    + f"; P buildings {p_b:.3f} > P vegetation {p_v:.3f}; {elapsed:.1f} s")
    assert all(v >= 0.90 for v in acc.values())
    assert p_b > p_v
    assert elapsed < 120.0


@pytest.mark.acceptance(6, "masks invariant to scaling their input layers")
def test_criterion_6_scale_invariance(demo_run, record_property):
    base = demo_run.labels.masks
    cases = [("buildings", "JKLM"), ("roads", "ABCD"), ("vegetation", "EFGHI")]
    for k in (0.1, 3.0, 100.0):
        for name, keys in cases:
            data = demo_run.stats.data.copy()
            for key in keys:
                data[LAYER_INDEX[key]] *= k
            scaled = StatsRaster(demo_run.stats.spec, data, detrended=True)
            got = label_scene(scaled, 512).masks[name]
            np.testing.assert_array_equal(got.bits, base[name].bits, err_msg=f"{name} at k={k}")
    record_property("detail", "k in {0.1, 3, 100} on the demo scene")


@pytest.mark.acceptance(7, "LAS round trip")
def test_criterion_7_las_round_trip(record_property):
    pts = synth_scene(demo_scene(seed=7, cells=256)).points
    scale = (0.001, 0.001, 0.001)
    buf = io.BytesIO()
    write_las(buf, pts, scale=scale)
    buf.seek(0)
    back = PointCloud.concatenate(stream_points(buf, parse_las_header(buf)).chunks())
    assert len(back) == len(pts)
    dev = [float(np.max(np.abs(getattr(back, a) - getattr(pts, a)))) for a in "xyz"]
    record_property("detail", f"{len(pts)} points, max |dxyz| {max(dev):.2e}")
    assert all(d <= s / 2 + 1e-9 for d, s in zip(dev, scale))
    for field in ("intensity", "return_number", "number_of_returns"):
        np.testing.assert_array_equal(getattr(back, field), getattr(pts, field))


@pytest.mark.acceptance(8, "tree pipeline on a planted grove with a hedge")
def test_criterion_8_grove(record_property):
    start = time.perf_counter()
    run = run_pipeline(grove_config())
    result = find_trees(run.stats, run.labels.masks["vegetation"], tile_cells=512)
    elapsed = time.perf_counter() - start
    planted = run.scene.config.trees
    errs = []
    for t in planted:
        near = min(result.crowns, key=lambda c: math.hypot(c.center[0] - t.cx, c.center[1] - t.cy))
        errs.append(abs(near.height - t.apex_height))
    mae = float(np.mean(errs))
    in_hedge = [c for c in result.crowns
                if HEDGE.x0 <= c.center[0] <= HEDGE.x1 and HEDGE.y0 <= c.center[1] <= HEDGE.y1]
    hedge_rejects = [s for s in result.rejected if s.area > 60 and s.eccentricity > 0.95]
    record_property("detail", f"{len(result.crowns)} crowns of {len(planted)}, height MAE {mae:.3f} m, "
                              f"{elapsed:.1f} s")
    assert 45 <= len(result.crowns) <= 55
    assert mae <= 0.5
    assert not in_hedge and hedge_rejects
    assert elapsed < 60.0


@pytest.mark.acceptance(9, "two full CLI runs give bit-identical outputs")
def test_criterion_9_determinism(tmp_path, record_property):
    cfg = tmp_path / "config.json"
    cfg.write_text(json.dumps({"seed": 5}))
    runs = [tmp_path / "a", tmp_path / "b"]
    for root in runs:
        root.mkdir()
        assert cli_pipeline(root, cfg, figures=True) == [0] * 6
    files = sorted(p.relative_to(runs[0]) for p in runs[0].rglob("*") if p.is_file())
    files = [f for f in files if f.name != "config.json"]
    assert files == sorted(p.relative_to(runs[1]) for p in runs[1].rglob("*")
                           if p.is_file() and p.name != "config.json")
    diff = [str(f) for f in files if not filecmp.cmp(runs[0] / f, runs[1] / f, shallow=False)]
    record_property("detail", f"{len(files)} files compared, {len(diff)} differ")
    assert not diff, diff
