"""Synthetic drives with exact ground truth.

A scene is a reference line built from line/arc/clothoid primitives with a
lane layout around it.  The reference line is the middle of the leftmost
lane, so boundary ``k`` lies at lateral ``w/2 - k*w`` (left positive).  A
generic ray-grid LiDAR samples the road surface from an ego vehicle driving
a lane plan; each frame is written with its GNSS/IMU pose.  The same scene
also yields an OSM extract and the true reference line as OpenDRIVE.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .geo import GeoPoint, Pose, grid_convergence, unproject_tm_array
from .geometry import GeometryElement, spiral_local
from .ingest import Frame, write_recording
from .osm import write_extract
from .xodr import (CubicRecord, RoadLink, RoadModel, XodrDocument, geo_reference_string,
                   lane_section, link_lanes, write_xml)

MAX_CURVATURE = 1.0 / 200.0
MAX_FOV_DEG = 72.0
EDGE_PAVEMENT = 0.5      # asphalt beyond the outer boundary line
EMBANKMENT_SLOPE = 0.5
SOLID_WIDTH = 0.30
DASH_WIDTH = 0.15
VEHICLE_CLEARANCE = 0.3


class SpecError(ValueError):
    pass


@dataclass
class SensorModel:
    fov_deg: float = 72.0
    min_range: float = 5.0
    max_range: float = 40.0
    azimuth_res_deg: float = 0.25
    range_step: float = 0.35
    height: float = 2.0
    rate_hz: float = 10.0
    noise_sigma: float = 0.02
    dropout: float = 0.2
    marking_reflectivity: float = 0.6
    marking_spread: float = 0.05
    road_reflectivity: tuple[float, float] = (0.01, 0.045)
    aged_reflectivity: float = 0.12
    aged_spread: float = 0.015


@dataclass
class Occluder:
    """Lead vehicle in the ego lane between two stations."""

    start_s: float
    end_s: float
    distance: float = 14.0
    width: float = 1.8
    length: float = 4.5
    height: float = 1.5


@dataclass
class SceneSpec:
    name: str
    course: list = field(default_factory=lambda: [["line", 300.0]])
    lane_count: int = 3
    lane_width: float = 3.75
    shoulder: bool = False
    shoulder_width: float = 2.5
    lane_count_change: list | None = None          # [station, new lane count]
    taper_length: float = 60.0
    boundary_plan: dict | None = None              # slot -> solid | dashed | none
    dash_length: float = 6.0
    dash_gap: float = 12.0
    marking_gaps: list = field(default_factory=list)    # [[s0, s1], ...] without paint
    aged: list = field(default_factory=list)            # [[s0, s1], ...] with worn paint
    no_marking_edges: list = field(default_factory=list)  # indices of main-road edges
    grade: float = 0.0
    superelevation: float = 0.0
    ego_lane: int = 0
    lane_changes: list = field(default_factory=list)    # [[station, lane], ...]
    lane_change_length: float = 120.0
    speed: float = 30.0
    occluder: Occluder | None = None
    exit_ramp_station: float | None = None
    node_spacing: float = 125.0
    node_jitter: float = 10.0
    heading0: float = 0.3
    origin: tuple = (48.7, 9.0)
    sensor: SensorModel = field(default_factory=SensorModel)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.sensor, dict):
            self.sensor = SensorModel(**_known(SensorModel, self.sensor, "sensor"))
        if isinstance(self.occluder, dict):
            self.occluder = Occluder(**_known(Occluder, self.occluder, "occluder"))
        self.origin = tuple(self.origin)
        self.sensor.road_reflectivity = tuple(self.sensor.road_reflectivity)

    # -- validation ----------------------------------------------------------
    def validate(self) -> None:
        if not self.course:
            raise SpecError("course: needs at least one primitive")
        for i, prim in enumerate(self.course):
            kind = prim[0]
            if kind not in ("line", "arc", "clothoid"):
                raise SpecError(f"course[{i}]: unknown primitive {kind!r}")
            if not prim[1] > 0:
                raise SpecError(f"course[{i}]: length must be > 0")
            curv = [float(c) for c in prim[2:]]
            if kind != "line" and len(curv) != (1 if kind == "arc" else 2):
                raise SpecError(f"course[{i}]: wrong number of curvature values")
            if any(abs(c) > MAX_CURVATURE + 1e-12 for c in curv):
                raise SpecError(f"course[{i}]: curvature exceeds 1/200 1/m")
        if self.sensor.fov_deg > MAX_FOV_DEG:
            raise SpecError("sensor.fov_deg: must be <= 72")
        if self.lane_count < 1:
            raise SpecError("lane_count: must be >= 1")
        if not 0 <= self.ego_lane < self.lane_count:
            raise SpecError("ego_lane: outside the lane layout")
        length = self.length
        if self.speed <= 0:
            raise SpecError("speed: must be > 0")
        if length <= self.sensor.max_range + 10:
            raise SpecError("course: shorter than the sensor range")
        for s, lane in self.lane_changes:
            if not 0 <= s <= length - self.sensor.max_range - self.lane_change_length:
                raise SpecError("lane_changes: lane change exceeds the course")
            if not 0 <= lane < self.lane_count:
                raise SpecError("lane_changes: target lane outside the layout")
        if self.lane_count_change is not None:
            s, n = self.lane_count_change
            if not 0 < s < length - self.taper_length:
                raise SpecError("lane_count_change: station outside the course")
            if n <= self.lane_count:
                raise SpecError("lane_count_change: only lane additions are supported")
        if self.exit_ramp_station is not None and not 0 < self.exit_ramp_station < length:
            raise SpecError("exit_ramp_station: outside the course")
        if not 0 <= self.sensor.dropout < 1:
            raise SpecError("sensor.dropout: must lie in [0, 1)")

    @property
    def length(self) -> float:
        return float(sum(p[1] for p in self.course))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        spec = cls(**_known(cls, d, "scene"))
        spec.validate()
        return spec


def _known(cls, d: dict, where: str) -> dict:
    names = {f.name for f in fields(cls)}
    extra = sorted(set(d) - names)
    if extra:
        raise SpecError(f"{where}: unknown field {extra[0]!r}")
    return dict(d)


# -- course --------------------------------------------------------------------

class Course:
    """Reference line as a chain of analytic elements in the scene projection."""

    def __init__(self, primitives, heading0: float = 0.0):
        self.elements: list[GeometryElement] = []
        x, y, h, s = 0.0, 0.0, float(heading0), 0.0
        for prim in primitives:
            kind, L = prim[0], float(prim[1])
            if kind == "line":
                e = GeometryElement(s, x, y, h, L, "line")
            elif kind == "arc":
                e = GeometryElement(s, x, y, h, L, "arc", {"curvature": float(prim[2])})
            else:
                e = GeometryElement(s, x, y, h, L, "spiral",
                                    {"curvStart": float(prim[2]), "curvEnd": float(prim[3])})
            self.elements.append(e)
            x, y, h = e.end()
            s += L
        self.length = s
        self._starts = np.array([e.s for e in self.elements])
        grid = np.linspace(0.0, s, int(math.ceil(s)) + 1)
        gx, gy, _ = self.evaluate(grid)
        self._grid = grid
        self._tree = cKDTree(np.column_stack([gx, gy]))

    def curvature(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        out = np.zeros_like(s)
        idx = self._index(s)
        for k, e in enumerate(self.elements):
            m = idx == k
            if e.kind == "arc":
                out[m] = e.params["curvature"]
            elif e.kind == "spiral":
                k0, k1 = e.params["curvStart"], e.params["curvEnd"]
                out[m] = k0 + (k1 - k0) * (s[m] - e.s) / e.length
        return out

    def _index(self, s):
        return np.clip(np.searchsorted(self._starts, s, side="right") - 1, 0, len(self.elements) - 1)

    def evaluate(self, s):
        """``x, y, hdg`` at stations ``s`` (extrapolated linearly past the ends)."""
        s = np.asarray(s, dtype=float)
        flat = s.ravel()
        x = np.empty_like(flat)
        y = np.empty_like(flat)
        h = np.empty_like(flat)
        idx = self._index(flat)
        for k, e in enumerate(self.elements):
            m = idx == k
            if not m.any():
                continue
            ds = flat[m] - e.s
            inside = np.clip(ds, 0.0, e.length)
            ex, ey, eh = e.evaluate(inside)
            extra = ds - inside
            x[m] = ex + extra * np.cos(eh)
            y[m] = ey + extra * np.sin(eh)
            h[m] = eh
        return x.reshape(s.shape), y.reshape(s.shape), h.reshape(s.shape)

    def locate(self, xy, iterations: int = 3, s_guess=None):
        """Station and lateral offset (left positive) of points ``(n, 2)``.

        ``s_guess`` replaces the nearest-grid start when stations are
        already known roughly (within a few metres).
        """
        p = np.asarray(xy, dtype=float)[:, :2]
        if s_guess is None:
            _, k = self._tree.query(p)
            s = self._grid[k]
        else:
            s = np.asarray(s_guess, dtype=float)
        for _ in range(iterations):
            x, y, h = self.evaluate(s)
            dx, dy = p[:, 0] - x, p[:, 1] - y
            s = s + dx * np.cos(h) + dy * np.sin(h)
        x, y, h = self.evaluate(s)
        lat = -(p[:, 0] - x) * np.sin(h) + (p[:, 1] - y) * np.cos(h)
        return s, lat

    def point_at(self, s, lateral):
        x, y, h = self.evaluate(s)
        return x - np.sin(h) * lateral, y + np.cos(h) * lateral, h

    def slice(self, s0: float, s1: float, s_base: float = 0.0) -> list[GeometryElement]:
        """Elements covering ``[s0, s1]`` re-based to start at ``s_base``."""
        out = []
        for e in self.elements:
            a, b = max(s0, e.s), min(s1, e.s + e.length)
            if b - a <= 1e-9:
                continue
            x, y, h = e.evaluate(np.array([a - e.s]))
            params = dict(e.params)
            if e.kind == "spiral":
                k0, k1 = e.params["curvStart"], e.params["curvEnd"]
                rate = (k1 - k0) / e.length
                params = {"curvStart": k0 + rate * (a - e.s), "curvEnd": k0 + rate * (b - e.s)}
            out.append(GeometryElement(s_base + a - s0, float(x[0]), float(y[0]), float(h[0]),
                                       b - a, e.kind, params))
        return out


# -- scene layout --------------------------------------------------------------

def _smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


@dataclass
class Boundary:
    slot: int
    cls: str          # solid | dashed
    s0: float
    s1: float
    phase: float = 0.0


class Scene:
    """Analytic scene: course, layout, paint, surface and ego plan."""

    def __init__(self, spec: SceneSpec):
        spec.validate()
        self.spec = spec
        self.course = Course(spec.course, spec.heading0)
        self.origin = GeoPoint(*spec.origin)
        rng = np.random.default_rng([spec.seed, 1])
        self.nodes_s = self._node_stations(rng)
        self.boundaries = self._boundaries(rng)
        w = spec.lane_width
        self.width = w

    # stations -----------------------------------------------------------------
    def _node_stations(self, rng) -> np.ndarray:
        L, sp = self.spec.length, self.spec.node_spacing
        n = max(1, int(round(L / sp)))
        st = np.linspace(0.0, L, n + 1)
        if n > 1:
            st[1:-1] += rng.uniform(-self.spec.node_jitter, self.spec.node_jitter, n - 1)
        fixed = [self.spec.exit_ramp_station]
        if self.spec.lane_count_change is not None:
            fixed.append(self.spec.lane_count_change[0])
        for f in fixed:
            if f is None:
                continue
            k = int(np.argmin(np.abs(st[1:-1] - f))) + 1 if n > 1 else None
            if k is not None and abs(st[k] - f) < 0.5 * sp:
                st[k] = f
            else:
                st = np.sort(np.append(st, f))
        return np.unique(np.round(st, 6))

    def edge_ranges(self) -> list[tuple[float, float]]:
        return list(zip(self.nodes_s[:-1], self.nodes_s[1:]))

    # layout -------------------------------------------------------------------
    def lane_count_at(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        n = np.full(s.shape, self.spec.lane_count)
        if self.spec.lane_count_change is not None:
            sc, n2 = self.spec.lane_count_change
            n = np.where(s >= sc, n2, n)
        return n

    def boundary_lateral(self, slot: int, s) -> np.ndarray:
        """Lateral (left positive) of boundary ``slot`` at stations ``s``."""
        s = np.asarray(s, dtype=float)
        w = self.width
        base = w / 2.0 - slot * w
        spec = self.spec
        if spec.lane_count_change is not None:
            sc, n2 = spec.lane_count_change
            n1 = spec.lane_count
            if slot > n1 and slot <= n2:
                grow = _smoothstep((s - sc) / spec.taper_length)
                return (w / 2.0 - n1 * w) - (slot - n1) * w * grow
        if spec.shoulder and slot == self.shoulder_slot:
            return np.full(s.shape, w / 2.0 - self._n_max * w - spec.shoulder_width)
        return np.full(s.shape, base)

    @property
    def _n_max(self) -> int:
        if self.spec.lane_count_change is not None:
            return int(self.spec.lane_count_change[1])
        return self.spec.lane_count

    @property
    def shoulder_slot(self) -> int | None:
        return self._n_max + 1 if self.spec.shoulder else None

    def _boundaries(self, rng) -> list[Boundary]:
        spec = self.spec
        L = spec.length
        period = spec.dash_length + spec.dash_gap
        out = []
        n1 = spec.lane_count
        if spec.lane_count_change is None:
            for k in range(n1 + 1):
                cls = "solid" if k in (0, n1) else "dashed"
                out.append(Boundary(k, cls, 0.0, L, float(rng.uniform(0, period))))
        else:
            sc, n2 = spec.lane_count_change
            te = sc + spec.taper_length
            for k in range(n2 + 1):
                if k == 0:
                    out.append(Boundary(0, "solid", 0.0, L))
                elif k < n1:
                    out.append(Boundary(k, "dashed", 0.0, L, float(rng.uniform(0, period))))
                elif k == n1:
                    out.append(Boundary(k, "solid", 0.0, te))
                    out.append(Boundary(k, "dashed", te, L, float(rng.uniform(0, period))))
                elif k < n2:
                    out.append(Boundary(k, "dashed", te, L, float(rng.uniform(0, period))))
                else:
                    out.append(Boundary(k, "solid", sc, L))
        if spec.shoulder:
            out.append(Boundary(self.shoulder_slot, "solid", 0.0, L))
        if spec.boundary_plan:
            plan = {int(k): v for k, v in spec.boundary_plan.items()}
            kept = []
            for b in out:
                want = plan.get(b.slot, b.cls)
                if want == "none":
                    continue
                if want != b.cls:
                    b = Boundary(b.slot, want, b.s0, b.s1, float(rng.uniform(0, period)))
                kept.append(b)
            out = kept
        return out

    def unpainted_intervals(self) -> list[tuple[float, float]]:
        iv = [tuple(map(float, g)) for g in self.spec.marking_gaps]
        edges = self.edge_ranges()
        for k in self.spec.no_marking_edges:
            iv.append(tuple(map(float, edges[k])))
        return iv

    def road_edges(self, s):
        """Left and right lateral limits of the paved surface."""
        s = np.asarray(s, dtype=float)
        left = np.full(s.shape, self.width / 2.0 + EDGE_PAVEMENT)
        n = self.spec.lane_count
        right = self.boundary_lateral(n, s)
        if self.spec.lane_count_change is not None:
            right = np.minimum(right, self.boundary_lateral(self._n_max, s))
        if self.spec.shoulder:
            right = right - self.spec.shoulder_width
        return left, right - EDGE_PAVEMENT

    def surface_z(self, s, lat) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        lat = np.asarray(lat, dtype=float)
        z = self.spec.grade * s + self.spec.superelevation * lat
        left, right = self.road_edges(s)
        z = z + EMBANKMENT_SLOPE * np.maximum(lat - left, 0.0)
        z = z + EMBANKMENT_SLOPE * np.maximum(right - lat, 0.0)
        return z

    def paint(self, s, lat):
        """``(painted, aged)`` masks for surface points."""
        s = np.asarray(s, dtype=float)
        lat = np.asarray(lat, dtype=float)
        period = self.spec.dash_length + self.spec.dash_gap
        painted = np.zeros(s.shape, dtype=bool)
        for b in self.boundaries:
            half = (SOLID_WIDTH if b.cls == "solid" else DASH_WIDTH) / 2.0
            m = (s >= b.s0) & (s < b.s1) & (np.abs(lat - self.boundary_lateral(b.slot, s)) <= half)
            if b.cls == "dashed":
                m &= np.mod(s - b.phase, period) < self.spec.dash_length
            painted |= m
        for a, c in self.unpainted_intervals():
            painted &= ~((s >= a) & (s < c))
        aged = np.zeros(s.shape, dtype=bool)
        for a, c in self.spec.aged:
            aged |= (s >= a) & (s < c)
        return painted, aged & painted

    # ego ----------------------------------------------------------------------
    def ego_lateral(self, s) -> tuple[np.ndarray, np.ndarray]:
        """Ego lateral offset and its derivative along the station."""
        s = np.asarray(s, dtype=float)
        w = self.width
        lat = np.full(s.shape, -self.spec.ego_lane * w)
        dlat = np.zeros(s.shape)
        cur = self.spec.ego_lane
        T = self.spec.lane_change_length
        for st, lane in sorted(self.spec.lane_changes):
            u = (s - st) / T
            step = -(lane - cur) * w
            lat = lat + step * _smoothstep(u)
            inside = (u > 0) & (u < 1)
            dlat = dlat + np.where(inside, step * 6 * u * (1 - u) / T, 0.0)
            cur = lane
        return lat, dlat

    def ego_stations(self) -> np.ndarray:
        end = self.spec.length - self.spec.sensor.max_range
        dt = 1.0 / self.spec.sensor.rate_hz
        n = int(math.floor(end / (self.spec.speed * dt))) + 1
        return self.spec.speed * dt * np.arange(n)

    def ego_pose(self, s: float) -> Pose:
        lat, dlat = self.ego_lateral(np.array([s]))
        x, y, h = self.course.point_at(np.array([s]), lat)
        yaw = float(h[0] + math.atan(dlat[0]))
        z = float(self.surface_z(np.array([s]), lat)[0]) + self.spec.sensor.height
        pitch = -math.atan(self.spec.grade)
        roll = math.atan(self.spec.superelevation)
        return Pose(np.array([x[0], y[0], z]), yaw, pitch, roll)

    def lateral_boundaries(self, s: float) -> list[tuple[int, str, float]]:
        """Painted boundaries present at ``s``: ``(slot, class, lateral)``."""
        out = []
        for b in self.boundaries:
            if b.s0 <= s < b.s1:
                out.append((b.slot, b.cls, float(self.boundary_lateral(b.slot, np.array([s]))[0])))
        return out


# -- sensor --------------------------------------------------------------------

def _ray_grid(sensor: SensorModel, rng):
    half = math.radians(sensor.fov_deg) / 2.0
    da = math.radians(sensor.azimuth_res_deg)
    az = -half + da * (np.arange(int(round(2 * half / da)) + 1) + rng.uniform(0, 1)) - da / 2
    az = az[np.abs(az) <= half]
    r = sensor.min_range + sensor.range_step * (np.arange(
        int((sensor.max_range - sensor.min_range) / sensor.range_step) + 1) + rng.uniform(0, 1))
    r = r[r <= sensor.max_range]
    A, R = np.meshgrid(az, r)
    return A.ravel(), R.ravel()


def _occlusion(scene: Scene, pose: Pose, s_ego: float, az, rng_ground, t_ego):
    """Distance along each ray to the lead vehicle's footprint (inf if missed)."""
    occ = scene.spec.occluder
    if occ is None or not occ.start_s <= s_ego <= occ.end_s:
        return None
    sc = s_ego + occ.distance
    lat, _ = scene.ego_lateral(np.array([sc]))
    cx, cy, ch = scene.course.point_at(np.array([sc]), lat)
    z = scene.surface_z(np.array([sc]), lat)[0]
    c_sensor = pose.apply_inverse(np.array([cx[0], cy[0], z]))
    heading = ch[0] - pose.yaw
    ca, sa = math.cos(heading), math.sin(heading)
    # ray direction in the box frame
    dx, dy = np.cos(az), np.sin(az)
    bx = ca * dx + sa * dy
    by = -sa * dx + ca * dy
    ox = -(ca * c_sensor[0] + sa * c_sensor[1])
    oy = -(-sa * c_sensor[0] + ca * c_sensor[1])
    hx, hy = occ.length / 2.0, occ.width / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        t1x, t2x = (-hx - ox) / bx, (hx - ox) / bx
        t1y, t2y = (-hy - oy) / by, (hy - oy) / by
    tnear = np.maximum(np.minimum(t1x, t2x), np.minimum(t1y, t2y))
    tfar = np.minimum(np.maximum(t1x, t2x), np.maximum(t1y, t2y))
    hit = (tnear <= tfar) & (tfar > 0) & (tnear < rng_ground)
    tnear = np.where(hit, np.maximum(tnear, 0.0), np.inf)
    H = scene.spec.sensor.height
    zrel = H * (1.0 - tnear / rng_ground)          # height of the ray above the ground there
    hit &= (zrel >= VEHICLE_CLEARANCE) & (zrel <= occ.height)
    return np.where(hit, tnear, np.inf), c_sensor[2]


def simulate_frame(scene: Scene, s_ego: float, rng) -> tuple[Pose, np.ndarray]:
    sensor = scene.spec.sensor
    pose = scene.ego_pose(s_ego)
    az, r = _ray_grid(sensor, rng)
    keep = rng.random(az.size) >= sensor.dropout
    az, r = az[keep], r[keep]
    H = sensor.height
    local = np.column_stack([r * np.cos(az), r * np.sin(az), np.full(az.size, -H)])
    world = pose.apply(local)
    # the sensor looks ahead along the road: forward range is a close first station
    s, lat = scene.course.locate(world[:, :2], iterations=5, s_guess=s_ego + local[:, 0])
    world[:, 2] = scene.surface_z(s, lat)
    painted, aged = scene.paint(s, lat)

    refl = rng.uniform(*sensor.road_reflectivity, az.size)
    fresh = painted & ~aged
    refl[fresh] = sensor.marking_reflectivity + rng.uniform(-1, 1, fresh.sum()) * sensor.marking_spread
    refl[aged] = sensor.aged_reflectivity + rng.uniform(-1, 1, aged.sum()) * sensor.aged_spread

    pts = pose.apply_inverse(world)
    occl = _occlusion(scene, pose, s_ego, az, r, None)
    if occl is not None:
        t, _ = occl
        blocked = np.isfinite(t)
        if blocked.any():
            tb = t[blocked]
            pts[blocked, 0] = tb * np.cos(az[blocked])
            pts[blocked, 1] = tb * np.sin(az[blocked])
            pts[blocked, 2] = -H * tb / r[blocked]
            refl[blocked] = rng.uniform(0.05, 0.5, blocked.sum())
    pts = pts + rng.normal(0.0, sensor.noise_sigma, pts.shape) if sensor.noise_sigma > 0 else pts
    refl = np.clip(refl, 0.0, 1.0)
    return pose, np.column_stack([pts, refl])


# -- outputs -------------------------------------------------------------------

@dataclass
class GeneratedScene:
    scene: Scene
    frames: list[Frame]
    osm_nodes: dict
    osm_ways: list
    truth: XodrDocument
    paths: dict = field(default_factory=dict)


def generate_frames(scene: Scene) -> list[Frame]:
    spec = scene.spec
    rng = np.random.default_rng([spec.seed, 2])
    stations = scene.ego_stations()
    dt = 1.0 / spec.sensor.rate_hz
    frames = []
    for i, s in enumerate(stations):
        pose, pts = simulate_frame(scene, float(s), rng)
        lat, lon = unproject_tm_array([pose.position[0]], [pose.position[1]], scene.origin)
        conv = grid_convergence(lat, lon, scene.origin)[0]
        geo = GeoPoint(float(lat[0]), float(lon[0]), float(pose.position[2]))
        frames.append(Frame(i, i * dt, pts, geo, float(pose.yaw - conv), pose.pitch, pose.roll))
    return frames


def _geo_of(scene: Scene, x, y) -> list[GeoPoint]:
    lat, lon = unproject_tm_array(np.atleast_1d(x), np.atleast_1d(y), scene.origin)
    return [GeoPoint(float(a), float(b)) for a, b in zip(lat, lon)]


def osm_layout(scene: Scene):
    """Nodes along the carriageway centre; one way per lane-count regime plus the exit ramp."""
    spec = scene.spec
    st = scene.nodes_s
    lanes = scene.lane_count_at(st)
    center = scene.width / 2.0 - lanes * scene.width / 2.0
    x, y, _ = scene.course.point_at(st, center)
    nodes = {i + 1: g for i, g in enumerate(_geo_of(scene, x, y))}
    ids = list(nodes)
    tags = {"highway": "motorway"}
    if spec.shoulder:
        tags["shoulder"] = "right"
    ways = []
    if spec.lane_count_change is None:
        ways.append((100, ids, dict(tags, lanes=str(spec.lane_count))))
    else:
        sc, n2 = spec.lane_count_change
        k = int(np.argmin(np.abs(st - sc)))
        ways.append((100, ids[: k + 1], dict(tags, lanes=str(spec.lane_count))))
        ways.append((101, ids[k:], dict(tags, lanes=str(n2))))
    if spec.exit_ramp_station is not None:
        k = int(np.argmin(np.abs(st - spec.exit_ramp_station)))
        s0 = st[k]
        _, right = scene.road_edges(np.array([s0]))
        x0, y0, h0 = scene.course.point_at(np.array([s0]), right - 2.0)
        u, v, _ = spiral_local(np.array([40.0, 80.0, 120.0]), 0.0, -1.0 / 150.0 / 120.0)
        c, s_ = math.cos(h0[0]), math.sin(h0[0])
        rx, ry = x0[0] + c * u - s_ * v, y0[0] + s_ * u + c * v
        base = max(nodes) + 1
        for j, g in enumerate(_geo_of(scene, rx, ry)):
            nodes[base + j] = g
        ways.append((200, [ids[k]] + [base + j for j in range(3)],
                     {"highway": "motorway_link", "lanes": "1"}))
    return nodes, ways


def ground_truth_document(scene: Scene) -> XodrDocument:
    spec = scene.spec
    doc = XodrDocument(geo_reference_string(*spec.origin), name=f"{spec.name}_truth")
    st = scene.nodes_s
    if spec.lane_count_change is None:
        regimes = [(100, 0.0, spec.length, spec.lane_count)]
    else:
        sc, n2 = spec.lane_count_change
        k = int(np.argmin(np.abs(st - sc)))
        regimes = [(100, 0.0, float(st[k]), spec.lane_count), (101, float(st[k]), spec.length, n2)]
    prev = None
    for i, (way, a, b, n) in enumerate(regimes):
        road = RoadModel(str(i + 1), way, name=f"way_{way}")
        road.geometry = scene.course.slice(a, b)
        road.elevation = [CubicRecord(0.0, spec.grade * a, spec.grade)]
        if spec.superelevation:
            road.superelevation = [CubicRecord(0.0, spec.superelevation)]
        road.lane_offset = [CubicRecord(0.0, scene.width / 2.0)]
        sh = spec.shoulder_width if spec.shoulder else None
        if prev is not None and n > prev[1]:
            T = min(spec.taper_length, road.length / 2.0)
            road.lane_sections = [lane_section(0.0, n, scene.width, sh, (-n, "in", T)),
                                  lane_section(T, n, scene.width, sh)]
        else:
            road.lane_sections = [lane_section(0.0, n, scene.width, sh)]
        if prev is not None:
            prev[0].successor = RoadLink("road", road.road_id, "start")
            road.predecessor = RoadLink("road", prev[0].road_id, "end")
            link_lanes(prev[0], road)
        doc.roads.append(road)
        prev = (road, n)
    return doc


def marking_table(scene: Scene) -> list[dict]:
    """Every painted dash or solid run: slot, class, station extent, lateral."""
    spec = scene.spec
    period = spec.dash_length + spec.dash_gap
    gaps = scene.unpainted_intervals()
    rows = []

    def cut(a, b):
        parts = [(a, b)]
        for g0, g1 in gaps:
            nxt = []
            for p0, p1 in parts:
                if g1 <= p0 or g0 >= p1:
                    nxt.append((p0, p1))
                    continue
                if p0 < g0:
                    nxt.append((p0, g0))
                if g1 < p1:
                    nxt.append((g1, p1))
            parts = nxt
        return [(p0, p1) for p0, p1 in parts if p1 - p0 > 1e-9]

    for b in scene.boundaries:
        if b.cls == "solid":
            runs = [(b.s0, b.s1)]
        else:
            k0 = math.floor((b.s0 - b.phase) / period)
            runs = []
            k = k0
            while b.phase + k * period < b.s1:
                a = max(b.phase + k * period, b.s0)
                e = min(b.phase + k * period + spec.dash_length, b.s1)
                if e > a:
                    runs.append((a, e))
                k += 1
        for a, e in runs:
            for p0, p1 in cut(a, e):
                mid = 0.5 * (p0 + p1)
                rows.append({"slot": b.slot, "class": b.cls, "s_start": p0, "s_end": p1,
                             "lateral": float(scene.boundary_lateral(b.slot, np.array([mid]))[0])})
    rows.sort(key=lambda r: (r["slot"], r["s_start"]))
    return rows


def write_truth_tables(scene: Scene, refline_path, markings_path, spacing: float = 1.0) -> None:
    s = np.arange(0.0, scene.spec.length + 1e-9, spacing)
    x, y, _ = scene.course.evaluate(s)
    z = scene.surface_z(s, np.zeros_like(s))
    with open(refline_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["s", "x", "y", "z"])
        for row in zip(s, x, y, z):
            w.writerow([f"{v:.9f}" for v in row])
    with open(markings_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slot", "class", "s_start", "s_end", "lateral"])
        for r in marking_table(scene):
            w.writerow([r["slot"], r["class"], f"{r['s_start']:.6f}", f"{r['s_end']:.6f}",
                        f"{r['lateral']:.6f}"])


def generate_scene(spec: SceneSpec, out_dir=None, write_frames: bool = True) -> GeneratedScene:
    """Build the scene; with ``out_dir`` also write every artifact to disk.

    ``write_frames=False`` skips the (large) sweep and pose files when the
    caller keeps the frames in memory.
    """
    scene = Scene(spec)
    frames = generate_frames(scene)
    nodes, ways = osm_layout(scene)
    truth = ground_truth_document(scene)
    gen = GeneratedScene(scene, frames, nodes, ways, truth)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "frames": out / "frames.csv", "poses": out / "poses.csv", "osm": out / "map.osm",
            "truth_xodr": out / "ground_truth.xodr", "truth_refline": out / "ground_truth_refline.csv",
            "truth_markings": out / "ground_truth_markings.csv", "spec": out / "scene.json",
        }
        if write_frames:
            write_recording(frames, paths["frames"], paths["poses"])
        else:
            del paths["frames"], paths["poses"]
        write_extract(nodes, ways, paths["osm"])
        write_xml(truth, paths["truth_xodr"])
        write_truth_tables(scene, paths["truth_refline"], paths["truth_markings"])
        paths["spec"].write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
        gen.paths = paths
    return gen


def load_spec(path) -> SceneSpec | list[SceneSpec]:
    data = json.loads(Path(path).read_text())
    if isinstance(data, list):
        return [SceneSpec.from_dict(d) for d in data]
    return SceneSpec.from_dict(data)


# -- corner cases --------------------------------------------------------------

def corner_case_suite(length: float = 300.0, seed: int = 0) -> list[SceneSpec]:
    """Twenty short scenes covering the failure modes the pipeline must handle."""
    L = float(length)
    k = 1.0 / 800.0

    def spec(name, **kw):
        kw.setdefault("seed", seed + len(specs))
        specs.append(SceneSpec(name, **kw))

    specs: list[SceneSpec] = []
    spec("straight_left_lane", course=[["line", L]])
    spec("straight_center_lane", course=[["line", L]], ego_lane=1)
    spec("straight_right_lane", course=[["line", L]], ego_lane=2)
    spec("left_curve", course=[["line", 40.0], ["clothoid", 80.0, 0.0, k], ["arc", L - 120.0, k]])
    spec("right_curve", course=[["line", 40.0], ["clothoid", 80.0, 0.0, -k], ["arc", L - 120.0, -k]],
         ego_lane=1)
    spec("clothoid_entry", course=[["clothoid", L / 2, 0.0, 1.0 / 400.0], ["arc", L / 2, 1.0 / 400.0]])
    spec("s_curve", course=[["arc", L / 3, k], ["clothoid", L / 3, k, -k], ["arc", L / 3, -k]])
    spec("two_lanes", course=[["line", L]], lane_count=2)
    spec("four_lanes", course=[["line", L]], lane_count=4, ego_lane=1)
    spec("shoulder", course=[["line", L]], shoulder=True)
    spec("grade_and_bank", course=[["arc", L, k]], grade=0.02, superelevation=0.025)
    spec("marking_gap", course=[["line", L]], marking_gaps=[[0.45 * L, 0.45 * L + 30.0]])
    spec("aged_markings", course=[["line", L]], aged=[[0.0, L]])
    spec("lane_change", course=[["line", L]],
         lane_changes=[[30.0, 1], [140.0, 0]], lane_change_length=100.0)
    spec("double_lane_change", course=[["arc", L, -k]],
         lane_changes=[[30.0, 2], [150.0, 1]], lane_change_length=100.0)
    spec("occluded_curve", course=[["arc", L, k]], occluder={"start_s": 0.0, "end_s": L})
    spec("high_noise_dropout", course=[["line", L]],
         sensor={"noise_sigma": 0.02, "dropout": 0.35})
    spec("exit_ramp", course=[["line", L]], exit_ramp_station=0.5 * L)
    spec("lane_count_change", course=[["line", L + 100.0]], lane_count_change=[0.4 * (L + 100.0), 4])
    spec("zero_markings_edge", course=[["line", L + 150.0]], no_marking_edges=[1])
    for s in specs:
        if isinstance(s.sensor, dict):
            s.sensor = SensorModel(**s.sensor)
        s.validate()
    return specs


def highway_spec(length: float = 2000.0, seed: int = 0, ego_lane: int = 0) -> SceneSpec:
    """Long 3-lane highway with curves up to 1/800 1/m."""
    k = 1.0 / 800.0
    L = float(length)
    course = [["line", 0.1 * L], ["clothoid", 0.1 * L, 0.0, k], ["arc", 0.2 * L, k],
              ["clothoid", 0.1 * L, k, -k], ["arc", 0.2 * L, -k], ["clothoid", 0.1 * L, -k, 0.0],
              ["line", 0.2 * L]]
    return SceneSpec("highway", course=course, seed=seed, ego_lane=ego_lane)
