from __future__ import annotations

import numpy as np
import pytest

from hdseg.geo import GeoPoint
from hdseg.ingest import (ConfigError, Frame, ParseError, PipelineConfig, RoadType,
                          ValidationError, load_config, load_recording, load_regulations,
                          write_config, write_recording)

FRAME_HEADER = "frame_id,t,x,y,z,refl\n"
POSE_HEADER = "frame_id,t,lat,lon,alt,yaw,pitch,roll\n"


def _write(tmp_path, frames: str, poses: str):
    f, p = tmp_path / "frames.csv", tmp_path / "poses.csv"
    f.write_text(FRAME_HEADER + frames)
    p.write_text(POSE_HEADER + poses)
    return f, p


def _points(fid, t, n=3):
    return "".join(f"{fid},{t},{i}.0,0.5,-2.0,0.3\n" for i in range(n))


def test_empty_recording(tmp_path):
    f, p = _write(tmp_path, "", "")
    frames, dropped = load_recording(f, p)
    assert frames == [] and dropped == 0


def test_two_frames(tmp_path):
    f, p = _write(tmp_path, _points(0, 0.0) + _points(1, 0.1),
                  "0,0.0,48.7,9.0,300,0.1,0,0\n1,0.1,48.70001,9.0,300,0.1,0,0\n")
    frames, dropped = load_recording(f, p)
    assert [len(fr.points) for fr in frames] == [3, 3]
    assert dropped == 0
    assert frames[0].pose_geo == GeoPoint(48.7, 9.0, 300.0)


def test_missing_pose_drops_frame(tmp_path):
    f, p = _write(tmp_path, _points(0, 0.0) + _points(1, 0.1), "0,0.0,48.7,9.0,300,0.1,0,0\n")
    frames, dropped = load_recording(f, p)
    assert len(frames) == 1 and dropped == 1


def test_malformed_row_reports_line(tmp_path):
    f, p = _write(tmp_path, _points(0, 0.0) + "0,0.0,abc,0,0,0.1\n", "0,0.0,48.7,9.0,0,0,0,0\n")
    with pytest.raises(ParseError, match=":5"):
        load_recording(f, p)


def test_non_monotonic_time(tmp_path):
    f, p = _write(tmp_path, _points(0, 0.0) + _points(1, 0.1),
                  "0,0.2,48.7,9.0,0,0,0,0\n1,0.1,48.7,9.0,0,0,0,0\n")
    with pytest.raises(ValidationError):
        load_recording(f, p)


def test_reflectivity_out_of_range_rejected(tmp_path):
    f, p = _write(tmp_path, "0,0.0,1,2,3,1.5\n", "0,0.0,48.7,9.0,0,0,0,0\n")
    with pytest.raises(ValidationError):
        load_recording(f, p)
    with pytest.raises(ValidationError):
        Frame(0, 0.0, np.array([[0, 0, 0, -0.1]]), GeoPoint(0, 0), 0, 0, 0)


def test_recording_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    frames = []
    for i in range(4):
        pts = np.round(np.column_stack([rng.uniform(-20, 20, (50, 3)), rng.uniform(0, 1, 50)]), 6)
        frames.append(Frame(i, round(0.1 * i, 6), pts, GeoPoint(round(48.7 + 1e-5 * i, 10), 9.0, 300.0),
                            0.123456789, -0.01, 0.002))
    write_recording(frames, tmp_path / "f.csv", tmp_path / "p.csv")
    back, dropped = load_recording(tmp_path / "f.csv", tmp_path / "p.csv")
    assert dropped == 0
    for a, b in zip(frames, back):
        np.testing.assert_array_equal(a.points, b.points)
        assert (a.frame_id, a.t, a.pose_geo) == (b.frame_id, b.t, b.pose_geo)
        assert (a.yaw, a.pitch, a.roll) == (b.yaw, b.pitch, b.roll)
    write_recording(back, tmp_path / "f2.csv", tmp_path / "p2.csv")
    assert (tmp_path / "f.csv").read_bytes() == (tmp_path / "f2.csv").read_bytes()
    assert (tmp_path / "p.csv").read_bytes() == (tmp_path / "p2.csv").read_bytes()


def test_german_highway_profile():
    regs = load_regulations(None, "DE", RoadType.HIGHWAY)
    assert regs.dash_length == 6.0
    assert regs.dash_center_spacing == 18.0
    assert regs.lane_width == 3.75


def test_unknown_country():
    with pytest.raises(ConfigError, match="XX.highway"):
        load_regulations(None, "XX", "highway")


def test_config_defaults():
    cfg = PipelineConfig()
    assert (cfg.reflectivity_start, cfg.reflectivity_step, cfg.reflectivity_floor) == (0.25, 0.05,
                                                                                        0.05)
    assert (cfg.chain_step, cfg.chain_max_factor, cfg.fuse_max_factor) == (3.0, 1.5, 3.5)
    assert (cfg.split_threshold, cfg.split_part, cfg.revisit_window) == (12.0, 6.0, 8.0)
    assert (cfg.matching_max_dist, cfg.continuity_flag_threshold, cfg.endpoint_weight) == (
        30.0, 0.5, 10.0)
    assert cfg.reflectivity_schedule() == [0.25, 0.2, 0.15, 0.1, 0.05]


@pytest.mark.parametrize("kw", [dict(reflectivity_floor=0.3), dict(workers=0),
                                dict(chain_max_factor=0.5)])
def test_config_invariants(kw):
    with pytest.raises(ConfigError):
        PipelineConfig(**kw)


def test_config_file_round_trip(tmp_path):
    cfg = load_config(workers=4, seed=9)
    write_config(cfg, tmp_path / "c.ini")
    assert load_config(tmp_path / "c.ini") == cfg


def test_config_unknown_key(tmp_path):
    (tmp_path / "c.ini").write_text("[pipeline]\nbogus = 1\n")
    with pytest.raises(ConfigError, match="bogus"):
        load_config(tmp_path / "c.ini")
