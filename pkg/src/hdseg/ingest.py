"""Recording, regulation-profile and pipeline-config loading.

File formats
------------
``frames.csv``  ``frame_id,t,x,y,z,refl`` one row per LiDAR return, sensor frame,
               reflectivity normalised to [0, 1].
``poses.csv``   ``frame_id,t,lat,lon,alt,yaw,pitch,roll``; angles in radians, yaw
               counter-clockwise from true east, intrinsic Z-Y'-X''.
Regulations and pipeline config are INI files (``key = value`` under
``[country.road_type]`` / ``[pipeline]`` sections).
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import logging
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path

import numpy as np
import pandas as pd
import pyarrow as pa
import pyarrow.csv as pa_csv

from .geo import GeoPoint

log = logging.getLogger(__name__)

FRAME_COLUMNS = ["frame_id", "t", "x", "y", "z", "refl"]
POSE_COLUMNS = ["frame_id", "t", "lat", "lon", "alt", "yaw", "pitch", "roll"]
_POSE_FMT = "{:d},{:.6f},{:.10f},{:.10f},{:.6f},{:.10f},{:.10f},{:.10f}\n"


class ParseError(ValueError):
    pass


class ValidationError(ValueError):
    pass


class ConfigError(KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class RoadType(str, Enum):
    HIGHWAY = "highway"
    ENTRY_EXIT = "entry_exit"
    OTHER = "other"


@dataclass
class Frame:
    frame_id: int
    t: float
    points: np.ndarray  # (n, 4): x, y, z, reflectivity in the sensor frame
    pose_geo: GeoPoint
    yaw: float
    pitch: float
    roll: float

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 4)
        refl = self.points[:, 3]
        if refl.size and (refl.min() < 0.0 or refl.max() > 1.0):
            raise ValidationError(f"frame {self.frame_id}: reflectivity outside [0, 1]")


@dataclass(frozen=True)
class RegulationProfile:
    country: str
    road_type: RoadType
    dash_length: float
    dash_center_spacing: float
    lane_width: float
    shoulder_width: float
    boundary_marking: str = "solid"
    reference_line_rule: str = "middle_of_left_lane"

    def __post_init__(self):
        for name in ("dash_length", "dash_center_spacing", "lane_width", "shoulder_width"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{self.country}.{self.road_type.value}: {name} must be > 0")
        if self.dash_center_spacing <= self.dash_length:
            raise ConfigError(
                f"{self.country}.{self.road_type.value}: dash_center_spacing must exceed dash_length"
            )


@dataclass(frozen=True)
class PipelineConfig:
    # adaptive reflectivity filter (fractions of full scale)
    reflectivity_start: float = 0.25
    reflectivity_step: float = 0.05
    reflectivity_floor: float = 0.05
    # chaining / fusion
    chain_step: float = 3.0
    chain_max_factor: float = 1.5
    fuse_max_factor: float = 3.5
    smoothing_gamma: float = 0.5
    split_threshold: float = 12.0
    split_part: float = 6.0
    split_min_part: float = 1.0
    # segmentation
    revisit_window: float = 8.0  # hours
    matching_max_dist: float = 30.0
    flicker_margin: float = 1.0
    # export
    continuity_flag_threshold: float = 0.5
    endpoint_weight: float = 10.0
    taper_length: float = 60.0
    ramp_length: float = 100.0
    ramp_end_curvature: float = 1.0 / 150.0
    ramp_lane_width: float = 3.5
    # point cloud conditioning
    height_slack: float = 0.5
    plane_threshold: float = 0.10
    plane_max_iters: int = 1000
    outlier_radius: float = 0.5
    outlier_min_neighbors: int = 3
    dbscan_eps: float = 0.3
    dbscan_min_pts: int = 5
    max_marking_width: float = 0.8
    max_direction_deviation: float = 15.0  # degrees from the local ego heading
    min_cluster_length: float = 1.0
    line_threshold: float = 0.05
    dedup_radius: float = 0.25
    min_edge_coverage: float = 0.5
    # execution
    workers: int = 1
    seed: int = 0
    strict_osm: bool = False

    def __post_init__(self):
        if not (0 < self.reflectivity_floor <= self.reflectivity_start <= 1):
            raise ConfigError("reflectivity thresholds must satisfy 0 < floor <= start <= 1")
        if self.reflectivity_step <= 0:
            raise ConfigError("reflectivity_step must be > 0")
        if self.chain_max_factor < 1 or self.fuse_max_factor < 1:
            raise ConfigError("chain_max_factor and fuse_max_factor must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if not (0.0 <= self.smoothing_gamma <= 1.0):
            raise ConfigError("smoothing_gamma must lie in [0, 1]")

    def reflectivity_schedule(self) -> list[float]:
        """Thresholds tried in order: start, start - step, ... down to the floor."""
        out = []
        k = 0
        while True:
            thr = round(self.reflectivity_start - k * self.reflectivity_step, 9)
            if thr < self.reflectivity_floor - 1e-12:
                break
            out.append(thr)
            k += 1
        return out


# ---------------------------------------------------------------- recordings


def _locate_bad_row(path: Path, columns: list[str]) -> str:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != columns:
            return f"{path}:1: expected header {','.join(columns)}"
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(columns):
                return f"{path}:{lineno}: expected {len(columns)} fields, got {len(row)}"
            try:
                int(row[0])
                [float(v) for v in row[1:]]
            except ValueError:
                return f"{path}:{lineno}: non-numeric field in {row!r}"
    return f"{path}: unreadable table"


def _read_table(path: Path, columns: list[str]) -> pd.DataFrame:
    try:
        df = pd.read_csv(path, dtype={c: float for c in columns[1:]} | {columns[0]: "int64"})
    except (ValueError, pd.errors.ParserError) as exc:
        raise ParseError(_locate_bad_row(path, columns)) from exc
    if list(df.columns) != columns:
        raise ParseError(f"{path}:1: expected header {','.join(columns)}")
    if len(df) and not np.isfinite(df[columns[1:]].to_numpy()).all():
        raise ParseError(_locate_bad_row(path, columns))
    return df


def load_recording(frames_path, poses_path) -> tuple[list[Frame], int]:
    """Join sweeps with poses on ``frame_id``.

    Returns the frames sorted by time and the number of sweeps dropped for
    lack of a pose.
    """
    frames_path, poses_path = Path(frames_path), Path(poses_path)
    pts = _read_table(frames_path, FRAME_COLUMNS)
    poses = _read_table(poses_path, POSE_COLUMNS)
    if poses["frame_id"].duplicated().any():
        raise ValidationError(f"{poses_path}: duplicate frame_id")

    refl = pts["refl"].to_numpy()
    if refl.size and (refl.min() < 0.0 or refl.max() > 1.0):
        bad = int(np.flatnonzero((refl < 0.0) | (refl > 1.0))[0])
        raise ValidationError(f"{frames_path}:{bad + 2}: reflectivity {refl[bad]} outside [0, 1]")

    pose_ids = set(poses["frame_id"].tolist())
    point_ids = pd.unique(pts["frame_id"])
    dropped = int(sum(1 for fid in point_ids if fid not in pose_ids))
    if dropped:
        log.warning("dropped %d frame(s) without pose", dropped)

    ids = pts["frame_id"].to_numpy()
    order = np.argsort(ids, kind="stable")
    ids_sorted = ids[order]
    xyzr = pts[["x", "y", "z", "refl"]].to_numpy()[order]
    uniq, starts = np.unique(ids_sorted, return_index=True)
    bounds = dict(zip(uniq.tolist(), zip(starts.tolist(), list(starts[1:]) + [len(ids_sorted)])))

    frames = []
    for row in poses.sort_values("frame_id").itertuples(index=False):
        fid = int(row.frame_id)
        lo, hi = bounds.get(fid, (0, 0))
        frames.append(Frame(fid, float(row.t), xyzr[lo:hi], GeoPoint(row.lat, row.lon, row.alt),
                            float(row.yaw), float(row.pitch), float(row.roll)))
    ts = np.array([f.t for f in frames])
    if np.any(np.diff(ts) <= 0):
        k = int(np.flatnonzero(np.diff(ts) <= 0)[0])
        raise ValidationError(
            f"t not strictly increasing by frame_id at frame {frames[k + 1].frame_id}"
        )
    return frames, dropped


def write_recording(frames: list[Frame], frames_path, poses_path) -> None:
    """Inverse of :func:`load_recording` at the documented decimal precision."""
    chunks = []
    for f in frames:
        n = len(f.points)
        block = np.empty((n, 6))
        block[:, 0] = f.frame_id
        block[:, 1] = f.t
        block[:, 2:] = f.points
        chunks.append(block)
    data = np.vstack(chunks) if chunks else np.empty((0, 6))
    # rounded doubles print in shortest form; "+ 0.0" folds -0 into 0
    cols = {"frame_id": pa.array(data[:, 0].astype(np.int64))}
    cols.update({c: pa.array(np.round(data[:, k + 1], 6) + 0.0)
                 for k, c in enumerate(FRAME_COLUMNS[1:])})
    pa_csv.write_csv(pa.table(cols), frames_path,
                     pa_csv.WriteOptions(quoting_style="none", quoting_header="none"))
    with open(poses_path, "w", newline="") as fh:
        fh.write(",".join(POSE_COLUMNS) + "\n")
        for f in frames:
            fh.write(_POSE_FMT.format(f.frame_id, f.t, f.pose_geo.lat, f.pose_geo.lon,
                                      f.pose_geo.alt, f.yaw, f.pitch, f.roll))


# ------------------------------------------------------------------ profiles


def default_regulations_path() -> Path:
    return Path(str(resources.files("hdseg") / "data" / "regulations.ini"))


def load_regulations(path, country: str, road_type) -> RegulationProfile:
    road_type = RoadType(road_type)
    parser = configparser.ConfigParser()
    path = Path(path) if path is not None else default_regulations_path()
    if not parser.read(path):
        raise ConfigError(f"regulation file not found: {path}")
    key = f"{country}.{road_type.value}"
    if not parser.has_section(key):
        raise ConfigError(f"no regulation profile for [{key}] in {path}")
    sec = parser[key]
    try:
        return RegulationProfile(
            country=country,
            road_type=road_type,
            dash_length=sec.getfloat("dash_length"),
            dash_center_spacing=sec.getfloat("dash_center_spacing"),
            lane_width=sec.getfloat("lane_width"),
            shoulder_width=sec.getfloat("shoulder_width"),
            boundary_marking=sec.get("boundary_marking", "solid"),
            reference_line_rule=sec.get("reference_line_rule", "middle_of_left_lane"),
        )
    except TypeError as exc:
        raise ConfigError(f"[{key}] is missing a required key") from exc


def load_config(path=None, **overrides) -> PipelineConfig:
    """Read ``[pipeline]`` from an INI file; unknown keys are rejected."""
    values = {}
    if path is not None:
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise ConfigError(f"config file not found: {path}")
        if parser.has_section("pipeline"):
            types = {f.name: f.type for f in dataclasses.fields(PipelineConfig)}
            for key, raw in parser["pipeline"].items():
                if key not in types:
                    raise ConfigError(f"unknown pipeline config key: {key}")
                kind = types[key]
                if kind in ("bool", bool):
                    values[key] = parser["pipeline"].getboolean(key)
                elif kind in ("int", int):
                    values[key] = int(raw)
                else:
                    values[key] = float(raw)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return PipelineConfig(**values)


def write_config(cfg: PipelineConfig, path) -> None:
    parser = configparser.ConfigParser()
    parser["pipeline"] = {f.name: str(getattr(cfg, f.name)) for f in dataclasses.fields(cfg)}
    with open(path, "w") as fh:
        parser.write(fh)


__all__ = [
    "Frame", "RegulationProfile", "PipelineConfig", "RoadType", "ParseError", "ValidationError",
    "ConfigError", "load_recording", "write_recording", "load_regulations", "load_config",
    "write_config",
]
