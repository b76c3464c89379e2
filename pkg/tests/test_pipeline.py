from __future__ import annotations

import csv

import numpy as np
import pytest

from hdseg.evaluate import compare, reproject_lines, sample_refline
from hdseg.ingest import load_config
from hdseg.geo import GeoPoint
from hdseg.osm import parse_extract, write_extract
from hdseg.pipeline import (
    REPORT_COLUMNS,
    RunResult,
    SegmentResult,
    run_pipeline,
    segment_seed,
    write_outputs,
)
from hdseg.synth import SceneSpec, generate_scene
from hdseg.xodr import XodrDocument, join_errors


def test_straight_scene_succeeds(straight_run, straight_scene):
    res = straight_run
    assert res.exit_code == 0
    assert res.success_rate == 1.0
    assert all(r.status == "ok" for r in res.segments)
    assert res.unmatched_frames == 0
    gen = reproject_lines(sample_refline(res.document), res.document.geo_reference,
                          straight_scene.truth.geo_reference)
    assert compare(gen, sample_refline(straight_scene.truth)).rmse < 0.05
    for road in res.document.roads:
        assert all(dp <= 1e-3 and dh <= 1e-3 for dp, dh in join_errors(road))


def test_segment_results_carry_diagnostics(straight_run):
    for r in straight_run.segments:
        assert r.threshold == pytest.approx(0.25)
        assert r.n_frames > 0 and r.edge_length > 0 and r.coverage >= 0.5
        assert {"accumulate", "markings", "refline"} <= set(r.timings)
        assert r.refline is not None and r.refline.shape[1] == 3
        assert {c.cls for c in r.chains} >= {"solid", "dashed"}
    assert {"matching", "segments", "export"} == set(straight_run.timings)


def _seg(i, status, length=100.0):
    return SegmentResult(f"1:{i}", 1, i, status, edge_length=length)


def test_success_rate_bookkeeping():
    res = RunResult(XodrDocument(), [_seg(i, "failed" if i == 4 else "ok") for i in range(10)], None)
    assert res.success_rate == pytest.approx(0.9)
    assert sum(r.status == "failed" for r in res.segments) == 1


def test_success_rate_is_distance_weighted():
    segs = [_seg(0, "ok", 300.0), _seg(1, "failed", 100.0), _seg(2, "flagged", 100.0)]
    assert RunResult(None, segs, None).success_rate == pytest.approx(0.8)


def test_exit_codes():
    assert RunResult(None, [_seg(0, "failed")], None).exit_code == 2
    assert RunResult(None, [], None).success_rate == 0.0


def test_segment_seed():
    assert segment_seed(0, "100:1") == segment_seed(0, "100:1")
    assert segment_seed(0, "100:1") != segment_seed(0, "100:2")
    assert segment_seed(0, "100:1") != segment_seed(1, "100:1")


def test_zero_marking_edge_fails_without_crash(tmp_path):
    spec = SceneSpec("zero", course=[["line", 450.0]], no_marking_edges=[1], seed=5)
    g = generate_scene(spec, tmp_path, write_frames=False)
    res = run_pipeline(g.frames, parse_extract(g.paths["osm"]), load_config())
    failed = [r for r in res.segments if r.status == "failed"]
    assert len(failed) == 1 and (failed[0].way_id, failed[0].edge_index) == (100, 1)
    assert failed[0].reason
    assert res.exit_code == 1
    assert 0.0 < res.success_rate < 1.0
    # the failed edge is bridged, so the road stays one piece
    assert len(res.document.roads) == 1


def test_no_frames_matched(straight_scene, tmp_path):
    far = {k: GeoPoint(v.lat + 0.05, v.lon) for k, v in straight_scene.osm_nodes.items()}
    write_extract(far, straight_scene.osm_ways, tmp_path / "far.osm")
    res = run_pipeline(straight_scene.frames, parse_extract(tmp_path / "far.osm"), load_config())
    assert res.document is None and res.exit_code == 2
    assert res.unmatched_frames == len(straight_scene.frames)


def test_outputs_written(straight_run, tmp_path):
    paths = write_outputs(straight_run, tmp_path)
    assert set(paths) == {"report", "flags", "xodr"}
    with open(paths["report"]) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == REPORT_COLUMNS
    assert len(rows) == 1 + len(straight_run.segments)
    with open(paths["flags"]) as fh:
        assert len(list(csv.reader(fh))) == 1


def test_debug_dumps(straight_scene, tmp_path):
    graph = parse_extract(straight_scene.paths["osm"])
    frames = straight_scene.frames[:200]
    run_pipeline(frames, graph, load_config(), debug_dir=tmp_path)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert any(n.endswith("_cloud.csv") for n in names)
    assert any(n.endswith("_chains.csv") for n in names)
    assert all(":" not in n for n in names)


@pytest.mark.slow
def test_worker_count_does_not_change_output(straight_scene, straight_run, tmp_path):
    graph = parse_extract(straight_scene.paths["osm"])
    res2 = run_pipeline(straight_scene.frames, graph, load_config(workers=2))
    a = write_outputs(straight_run, tmp_path / "a")["xodr"].read_bytes()
    b = write_outputs(res2, tmp_path / "b")["xodr"].read_bytes()
    assert a == b
    for r1, r2 in zip(straight_run.segments, res2.segments):
        np.testing.assert_array_equal(r1.refline, r2.refline)
