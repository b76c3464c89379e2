from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from hdseg.evaluate import (
    SampledLine,
    XodrParseError,
    compare,
    compare_files,
    read_xodr,
    sample_refline,
)
from hdseg.geometry import GeometryElement
from hdseg.xodr import RoadModel, XodrDocument, geo_reference_string, lane_section, write_xml

GEO = geo_reference_string(48.7, 9.0)


def doc_of(*elements, junction="-1"):
    r = RoadModel("1", 1, junction=junction)
    s = 0.0
    for e in elements:
        e.s = s
        s += e.length
    r.geometry = list(elements)
    r.lane_sections = [lane_section(0.0, 1, 3.5, None)]
    return XodrDocument(GEO, roads=[r])


def sl(points):
    return [SampledLine("1", np.asarray(points, float), 1.0)]


def test_line_sample_count():
    lines = sample_refline(doc_of(GeometryElement(0.0, 0, 0, 0, 100.0, "line")), 10.0)
    assert len(lines) == 1 and len(lines[0].points) == 11
    assert lines[0].length == pytest.approx(100.0)


def test_quarter_arc_end():
    e = GeometryElement(0.0, 0, 0, 0, math.pi * 50, "arc", {"curvature": 0.01})
    # spacing divides the length so the last sample is the end point
    p = sample_refline(doc_of(e), e.length / 1000)[0].points
    assert len(p) == 1001
    assert p[-1] == pytest.approx([100.0, 100.0], abs=1e-9)


def test_spiral_against_quadrature():
    e = GeometryElement(0.0, 0, 0, 0, 100.0, "spiral", {"curvStart": 0.0, "curvEnd": 0.01})
    p = sample_refline(doc_of(e), 5.0)[0].points
    th = lambda s: 0.5 * 0.01 / 100.0 * s * s
    for k, s in enumerate(np.arange(0, 100.0 + 1e-9, 5.0)):
        x = quad(lambda u: math.cos(th(u)), 0, s, epsabs=1e-12)[0]
        y = quad(lambda u: math.sin(th(u)), 0, s, epsabs=1e-12)[0]
        assert p[k] == pytest.approx([x, y], abs=1e-6)


def test_junction_roads_excluded_by_default():
    doc = doc_of(GeometryElement(0.0, 0, 0, 0, 50.0, "line"), junction="7")
    assert sample_refline(doc) == []
    assert len(sample_refline(doc, include_junction_roads=True)) == 1


def test_bad_spacing():
    with pytest.raises(ValueError):
        sample_refline(doc_of(GeometryElement(0.0, 0, 0, 0, 10.0, "line")), 0.0)


def test_identical_lines_zero():
    a = sl(np.column_stack([np.arange(101.0), np.zeros(101)]))
    st_ = compare(a, a)
    assert (st_.rmse, st_.avg_distance, st_.std_dev) == (0.0, 0.0, 0.0)
    assert st_.evaluated_length == pytest.approx(100.0)


def test_parallel_offset():
    x = np.arange(101.0)
    a = sl(np.column_stack([x, np.full(101, 0.3)]))
    b = sl(np.column_stack([x, np.zeros(101)]))
    s = compare(a, b)
    assert s.avg_distance == pytest.approx(0.3)
    assert s.rmse == pytest.approx(0.3)
    assert s.std_dev == pytest.approx(0.0, abs=1e-12)


def test_metric_is_point_to_polyline():
    # coarse target vertices do not inflate the distance
    a = sl(np.column_stack([np.arange(0.0, 100.5, 0.5), np.zeros(201)]))
    b = sl([[0.0, 0.0], [100.0, 0.0]])
    assert compare(a, b).rmse == pytest.approx(0.0, abs=1e-12)


def test_half_extent_uses_generated_length():
    a = sl(np.column_stack([np.arange(51.0), np.zeros(51)]))
    b = sl(np.column_stack([np.arange(101.0), np.zeros(101)]))
    assert compare(a, b).evaluated_length == pytest.approx(50.0)
    assert compare(a, b).rmse == 0.0
    assert compare(b, a).rmse > 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_rmse_identity(seed):
    rng = np.random.default_rng(seed)
    x = np.arange(200.0)
    a = sl(np.column_stack([x, rng.normal(0, 0.5, 200)]))
    b = sl(np.column_stack([x, np.zeros(200)]))
    s = compare(a, b)
    assert s.rmse**2 == pytest.approx(s.avg_distance**2 + s.std_dev**2, rel=1e-12)


def test_rigid_align_recovers_shift():
    x = np.arange(0.0, 200.0)
    b = sl(np.column_stack([x, 5 * np.sin(x / 30)]))
    a = sl(b[0].points + [0.0, 0.4])
    assert compare(a, b).avg_distance > 0.3
    assert compare(a, b, align=True).rmse < 1e-3


def test_empty_compare_rejected():
    with pytest.raises(ValueError):
        compare([], sl([[0, 0], [1, 0]]))


def test_compare_files_self(tmp_path):
    e = GeometryElement(0.0, 0, 0, 0.2, 120.0, "arc", {"curvature": 0.002})
    write_xml(doc_of(e), tmp_path / "a.xodr")
    s = compare_files(tmp_path / "a.xodr", tmp_path / "a.xodr")
    assert s.rmse == 0.0 and s.evaluated_length == pytest.approx(120.0, rel=1e-6)


def test_compare_files_different_origins(tmp_path):
    # same line, expressed in two projections
    from hdseg.geo import GeoPoint, reproject

    o1, o2 = GeoPoint(48.7, 9.0), GeoPoint(48.7005, 9.002)
    d1 = doc_of(GeometryElement(0.0, 0, 0, 0, 100.0, "line"))
    p0 = reproject(np.array([[0.0, 0.0], [100.0, 0.0]]), o1, o2)
    h = math.atan2(*(p0[1] - p0[0])[::-1])
    d2 = doc_of(GeometryElement(0.0, p0[0, 0], p0[0, 1], h, 100.0, "line"))
    d2.geo_reference = geo_reference_string(o2.lat, o2.lon)
    write_xml(d1, tmp_path / "a.xodr")
    write_xml(d2, tmp_path / "b.xodr")
    assert compare_files(tmp_path / "a.xodr", tmp_path / "b.xodr").rmse < 1e-4


@pytest.mark.parametrize("text", [
    "not xml at all",
    "<foo/>",
    '<OpenDRIVE><header/><road id="1" length="10"><planView>'
    '<geometry s="0" x="0" y="0" hdg="0"><line/></geometry></planView></road></OpenDRIVE>',
    '<OpenDRIVE><header/><road id="1" length="10"><planView>'
    '<geometry s="0" x="0" y="0" hdg="0" length="10"><poly3/></geometry></planView></road></OpenDRIVE>',
])
def test_parse_errors(tmp_path, text):
    p = tmp_path / "bad.xodr"
    p.write_text(text)
    with pytest.raises(XodrParseError):
        read_xodr(p)


def test_missing_file():
    with pytest.raises(XodrParseError):
        read_xodr("/nonexistent/file.xodr")
