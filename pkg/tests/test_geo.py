from __future__ import annotations

import math

import numpy as np
import pytest
from geographiclib.geodesic import Geodesic
from hypothesis import given, settings
from hypothesis import strategies as st

from hdseg.geo import (GeoPoint, Pose, ProjectionDomainError, SegmentFrameDef, from_segment_frame,
                       grid_convergence, pose_from_geo, project_tm, project_tm_array, reproject,
                       segment_frame_for, to_segment_frame, unproject_tm_array)

ORIGIN = GeoPoint(48.7, 9.0)
WGS = Geodesic.WGS84


def test_origin_maps_to_zero():
    np.testing.assert_allclose(project_tm(ORIGIN, ORIGIN), [0.0, 0.0, 0.0], atol=1e-9)


def test_meridian_step_matches_geodesic():
    p = project_tm(GeoPoint(48.7009, 9.0), ORIGIN)
    s = WGS.Inverse(48.7, 9.0, 48.7009, 9.0)["s12"]
    assert p[0] == pytest.approx(0.0, abs=1e-9)
    assert p[1] == pytest.approx(s, abs=1e-6)
    assert p[1] == pytest.approx(100.0835, abs=1e-4)


def test_parallel_step_matches_geodesic_and_series():
    p = project_tm(GeoPoint(48.7, 9.0014), ORIGIN)
    s = WGS.Inverse(48.7, 9.0, 48.7, 9.0014)["s12"]
    # second-order expansion of the northing along a parallel
    a, f = WGS.a, WGS.f
    e2 = f * (2 - f)
    phi, dl = math.radians(48.7), math.radians(0.0014)
    nu = a / math.sqrt(1 - e2 * math.sin(phi) ** 2)
    y_series = nu * math.sin(phi) * math.cos(phi) * dl**2 / 2
    assert p[0] == pytest.approx(s, rel=1e-6)
    assert p[1] == pytest.approx(y_series, abs=1e-6)
    assert p[1] > 0


def test_altitude_passthrough():
    assert project_tm(GeoPoint(48.71, 9.01, 312.5), ORIGIN)[2] == 312.5


def test_out_of_band_longitude():
    with pytest.raises(ProjectionDomainError):
        project_tm(GeoPoint(48.7, 15.5), ORIGIN)


def test_geopoint_ranges():
    with pytest.raises(ValueError):
        GeoPoint(91.0, 0.0)
    with pytest.raises(ValueError):
        GeoPoint(0.0, 181.0)


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 360), st.floats(10, 1000), st.floats(0, 360), st.floats(10, 1000))
def test_local_distances_preserved(az1, d1, az2, d2):
    a = WGS.Direct(ORIGIN.lat, ORIGIN.lon, az1, d1)
    b = WGS.Direct(ORIGIN.lat, ORIGIN.lon, az2, d2)
    s = WGS.Inverse(a["lat2"], a["lon2"], b["lat2"], b["lon2"])["s12"]
    if s < 1.0:
        return
    xy = project_tm_array([a["lat2"], b["lat2"]], [a["lon2"], b["lon2"]], ORIGIN)
    assert np.linalg.norm(xy[1] - xy[0]) == pytest.approx(s, rel=1e-4)


def test_inverse_projection_round_trip():
    rng = np.random.default_rng(1)
    lat = 48.7 + rng.uniform(-0.2, 0.2, 200)
    lon = 9.0 + rng.uniform(-0.3, 0.3, 200)
    xy = project_tm_array(lat, lon, ORIGIN)
    lat2, lon2 = unproject_tm_array(xy[:, 0], xy[:, 1], ORIGIN)
    np.testing.assert_allclose(lat2, lat, atol=1e-10)
    np.testing.assert_allclose(lon2, lon, atol=1e-10)


def test_reproject_between_origins():
    other = GeoPoint(48.72, 9.03)
    lat, lon = np.array([48.71, 48.705]), np.array([9.02, 9.01])
    a = project_tm_array(lat, lon, ORIGIN)
    b = project_tm_array(lat, lon, other)
    np.testing.assert_allclose(reproject(a, ORIGIN, other), b, atol=1e-6)


def test_convergence_matches_geodesic_azimuth():
    # grid bearing of a short eastward geodesic = true bearing rotated by the convergence
    lat, lon = 48.71, 9.05
    d = WGS.Direct(lat, lon, 90.0, 5.0)
    xy = project_tm_array([lat, d["lat2"]], [lon, d["lon2"]], ORIGIN)
    grid_yaw = math.atan2(*(xy[1] - xy[0])[::-1])
    true_yaw = 0.0   # east, counter-clockwise from east
    conv = grid_convergence(lat, lon, ORIGIN)[0]
    assert grid_yaw == pytest.approx(true_yaw + conv, abs=1e-6)
    assert conv > 0   # east of the central meridian in the northern hemisphere


def test_segment_frame_identity():
    pose = Pose(np.array([5.0, -3.0, 1.0]), 0.3, 0.02, -0.01)
    seg = SegmentFrameDef(pose, ORIGIN)
    np.testing.assert_allclose(to_segment_frame([1.0, 2.0, 3.0], pose, seg), [1.0, 2.0, 3.0],
                               atol=1e-12)


def test_segment_frame_translation():
    seg = SegmentFrameDef(Pose(), ORIGIN)
    fp = Pose(np.array([10.0, 0.0, 0.0]))
    np.testing.assert_allclose(to_segment_frame([0.0, 0.0, 0.0], fp, seg), [10.0, 0.0, 0.0])


def test_segment_frame_rotation():
    seg = SegmentFrameDef(Pose(), ORIGIN)
    fp = Pose(np.zeros(3), math.pi / 2)
    np.testing.assert_allclose(to_segment_frame([1.0, 0.0, 0.0], fp, seg), [0.0, 1.0, 0.0],
                               atol=1e-12)


def test_positive_pitch_is_nose_down():
    r = Pose(np.zeros(3), 0.0, 0.1, 0.0).apply([1.0, 0.0, 0.0])
    assert r[2] < 0


def test_first_frame_is_identity():
    g = GeoPoint(48.701, 9.002, 250.0)
    seg = segment_frame_for(g, 0.4, 0.01, 0.02)
    first = pose_from_geo(g, 0.4, 0.01, 0.02, seg.projection_origin)
    rel = seg.origin_pose.inverse().compose(first)
    np.testing.assert_allclose(rel.position, 0.0, atol=1e-9)
    np.testing.assert_allclose(rel.rotation, np.eye(3), atol=1e-12)


def test_round_trip_random_poses():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        o = Pose(rng.uniform(-500, 500, 3), *rng.uniform(-math.pi, math.pi, 1),
                 *rng.uniform(-1.2, 1.2, 1), *rng.uniform(-math.pi, math.pi, 1))
        f = Pose(rng.uniform(-500, 500, 3), *rng.uniform(-math.pi, math.pi, 1),
                 *rng.uniform(-1.2, 1.2, 1), *rng.uniform(-math.pi, math.pi, 1))
        seg = SegmentFrameDef(o, ORIGIN)
        p = rng.uniform(-50, 50, 3)
        q = from_segment_frame(to_segment_frame(p, f, seg), f, seg)
        assert np.abs(q - p).max() < 1e-9


def test_compose_with_inverse_is_identity():
    rng = np.random.default_rng(3)
    for _ in range(200):
        p = Pose(rng.uniform(-100, 100, 3), *rng.uniform(-3, 3, 1), *rng.uniform(-1.5, 1.5, 1),
                 *rng.uniform(-3, 3, 1))
        e = p.compose(p.inverse())
        assert np.abs(e.position).max() < 1e-9
        assert max(abs(e.yaw), abs(e.pitch), abs(e.roll)) < 1e-12
