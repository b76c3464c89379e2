"""Geodetic projection and rigid-frame transforms.

Conventions used everywhere in the package:

* Projected coordinates are ``x`` east, ``y`` north, ``z`` ellipsoidal altitude,
  produced by a transverse Mercator projection with scale 1.0 whose central
  meridian and false northing put the chosen origin at ``(0, 0)``.
* Vehicle / sensor frames are ``x`` forward, ``y`` left, ``z`` up.
* Orientations are intrinsic yaw-pitch-roll (Z, then Y', then X''), so
  ``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)``.  Yaw is counter-clockwise from east.
  Positive pitch lowers the nose, positive roll raises the left side.

The transverse Mercator series are the 6th order Krueger expansions in the
third flattening (Karney 2011), good to a few nanometres inside the 6 degree
band used here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# WGS84
WGS84_A = 6378137.0
WGS84_F = 1.0 / 298.257223563
WGS84_E2 = WGS84_F * (2.0 - WGS84_F)
WGS84_E = math.sqrt(WGS84_E2)

TM_SCALE = 1.0
TM_MAX_DLON_DEG = 6.0

_N = WGS84_F / (2.0 - WGS84_F)
_RECT_A = WGS84_A / (1.0 + _N) * (1.0 + _N**2 / 4.0 + _N**4 / 64.0 + _N**6 / 256.0)

_ALPHA = np.array([
    _N / 2 - 2 * _N**2 / 3 + 5 * _N**3 / 16 + 41 * _N**4 / 180 - 127 * _N**5 / 288 + 7891 * _N**6 / 37800,
    13 * _N**2 / 48 - 3 * _N**3 / 5 + 557 * _N**4 / 1440 + 281 * _N**5 / 630 - 1983433 * _N**6 / 1935360,
    61 * _N**3 / 240 - 103 * _N**4 / 140 + 15061 * _N**5 / 26880 + 167603 * _N**6 / 181440,
    49561 * _N**4 / 161280 - 179 * _N**5 / 168 + 6601661 * _N**6 / 7257600,
    34729 * _N**5 / 80640 - 3418889 * _N**6 / 1995840,
    212378941 * _N**6 / 319334400,
])
_BETA = np.array([
    _N / 2 - 2 * _N**2 / 3 + 37 * _N**3 / 96 - _N**4 / 360 - 81 * _N**5 / 512 + 96199 * _N**6 / 604800,
    _N**2 / 48 + _N**3 / 15 - 437 * _N**4 / 1440 + 46 * _N**5 / 105 - 1118711 * _N**6 / 3870720,
    17 * _N**3 / 480 - 37 * _N**4 / 840 - 209 * _N**5 / 4480 + 5569 * _N**6 / 90720,
    4397 * _N**4 / 161280 - 11 * _N**5 / 504 - 830251 * _N**6 / 7257600,
    4583 * _N**5 / 161280 - 108847 * _N**6 / 3991680,
    20648693 * _N**6 / 638668800,
])
_J2 = 2.0 * np.arange(1, 7)


class ProjectionDomainError(ValueError):
    """Point lies outside the validity band of the projection."""


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float
    alt: float = 0.0

    def __post_init__(self):
        if not (-90.0 <= self.lat <= 90.0):
            raise ValueError(f"latitude out of range: {self.lat}")
        if not (-180.0 <= self.lon <= 180.0):
            raise ValueError(f"longitude out of range: {self.lon}")


def _conformal_tau(tau):
    sig = np.sinh(WGS84_E * np.arctanh(WGS84_E * tau / np.sqrt(1.0 + tau * tau)))
    return tau * np.sqrt(1.0 + sig * sig) - sig * np.sqrt(1.0 + tau * tau)


def _xi_eta(lat_deg, dlon_deg):
    phi = np.radians(lat_deg)
    lam = np.radians(dlon_deg)
    taup = _conformal_tau(np.tan(phi))
    xip = np.arctan2(taup, np.cos(lam))
    etap = np.arcsinh(np.sin(lam) / np.sqrt(taup * taup + np.cos(lam) ** 2))
    j = _J2[:, None]
    a = _ALPHA[:, None]
    xi = xip + np.sum(a * np.sin(j * xip) * np.cosh(j * etap), axis=0)
    eta = etap + np.sum(a * np.cos(j * xip) * np.sinh(j * etap), axis=0)
    return xi, eta


def _check_band(dlon):
    if np.any(np.abs(dlon) >= TM_MAX_DLON_DEG):
        raise ProjectionDomainError(
            f"longitude offset {np.max(np.abs(dlon)):.3f} deg exceeds the {TM_MAX_DLON_DEG} deg band"
        )


def project_tm(p: GeoPoint, origin: GeoPoint) -> np.ndarray:
    """Project one geodetic point; returns ``(x, y, alt)``."""
    xy = project_tm_array(np.array([p.lat]), np.array([p.lon]), origin)[0]
    return np.array([xy[0], xy[1], p.alt])


def project_tm_array(lat, lon, origin: GeoPoint) -> np.ndarray:
    """Vectorised forward projection; returns an ``(n, 2)`` array of (x, y)."""
    lat = np.atleast_1d(np.asarray(lat, dtype=float))
    lon = np.atleast_1d(np.asarray(lon, dtype=float))
    dlon = (lon - origin.lon + 540.0) % 360.0 - 180.0
    _check_band(dlon)
    xi, eta = _xi_eta(lat, dlon)
    xi0, _ = _xi_eta(np.array([origin.lat]), np.array([0.0]))
    x = TM_SCALE * _RECT_A * eta
    y = TM_SCALE * _RECT_A * (xi - xi0[0])
    return np.column_stack([x, y])


def unproject_tm_array(x, y, origin: GeoPoint) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`project_tm_array`; returns ``(lat, lon)`` in degrees."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    xi0, _ = _xi_eta(np.array([origin.lat]), np.array([0.0]))
    xi = y / (TM_SCALE * _RECT_A) + xi0[0]
    eta = x / (TM_SCALE * _RECT_A)
    j = _J2[:, None]
    b = _BETA[:, None]
    xip = xi - np.sum(b * np.sin(j * xi) * np.cosh(j * eta), axis=0)
    etap = eta - np.sum(b * np.cos(j * xi) * np.sinh(j * eta), axis=0)
    taup = np.sin(xip) / np.sqrt(np.sinh(etap) ** 2 + np.cos(xip) ** 2)
    lam = np.arctan2(np.sinh(etap), np.cos(xip))
    tau = taup.copy()
    for _ in range(5):
        tp = _conformal_tau(tau)
        dtau = (taup - tp) / np.sqrt(1.0 + tp * tp) * (1.0 + (1.0 - WGS84_E2) * tau * tau) / (
            (1.0 - WGS84_E2) * np.sqrt(1.0 + tau * tau)
        )
        tau = tau + dtau
        if np.all(np.abs(dtau) < 1e-15 * np.maximum(1.0, np.abs(tau))):
            break
    lat = np.degrees(np.arctan(tau))
    lon = origin.lon + np.degrees(lam)
    lon = (lon + 540.0) % 360.0 - 180.0
    _check_band(np.degrees(lam))
    return lat, lon


def unproject_tm(xyz, origin: GeoPoint) -> GeoPoint:
    lat, lon = unproject_tm_array([xyz[0]], [xyz[1]], origin)
    alt = float(xyz[2]) if len(xyz) > 2 else 0.0
    return GeoPoint(float(lat[0]), float(lon[0]), alt)


def grid_convergence(lat, lon, origin: GeoPoint) -> np.ndarray:
    """Angle (rad) to add to a true ENU yaw to obtain the grid yaw.

    Evaluated as the projected direction of a short meridian step; the
    projection is conformal so every direction rotates by this same angle.
    """
    lat = np.atleast_1d(np.asarray(lat, dtype=float))
    lon = np.atleast_1d(np.asarray(lon, dtype=float))
    step = 1e-5
    hi = project_tm_array(lat + step, lon, origin)
    lo = project_tm_array(lat - step, lon, origin)
    d = hi - lo
    return np.arctan2(d[:, 1], d[:, 0]) - math.pi / 2.0


def reproject(xy: np.ndarray, src: GeoPoint, dst: GeoPoint) -> np.ndarray:
    """Move projected (x, y[, z]) coordinates from one origin to another."""
    xy = np.asarray(xy, dtype=float)
    if src.lat == dst.lat and src.lon == dst.lon:
        return xy.copy()
    lat, lon = unproject_tm_array(xy[:, 0], xy[:, 1], src)
    out = xy.copy()
    out[:, :2] = project_tm_array(lat, lon, dst)
    return out


def rotation_matrix(yaw: float, pitch: float, roll: float) -> np.ndarray:
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cr, sr = math.cos(roll), math.sin(roll)
    return np.array([
        [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
        [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
        [-sp, cp * sr, cp * cr],
    ])


def euler_from_matrix(r: np.ndarray) -> tuple[float, float, float]:
    """Inverse of :func:`rotation_matrix` (pitch kept in [-pi/2, pi/2])."""
    pitch = math.asin(max(-1.0, min(1.0, -r[2, 0])))
    if abs(r[2, 0]) < 1.0 - 1e-12:
        yaw = math.atan2(r[1, 0], r[0, 0])
        roll = math.atan2(r[2, 1], r[2, 2])
    else:
        # gimbal lock: fold roll into yaw
        yaw = math.atan2(-r[0, 1], r[1, 1])
        roll = 0.0
    return yaw, pitch, roll


@dataclass(frozen=True)
class Pose:
    """Rigid transform from a body frame into its parent frame."""

    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    yaw: float = 0.0
    pitch: float = 0.0
    roll: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        if not all(math.isfinite(a) for a in (self.yaw, self.pitch, self.roll)):
            raise ValueError("pose angles must be finite")

    @property
    def rotation(self) -> np.ndarray:
        return rotation_matrix(self.yaw, self.pitch, self.roll)

    def apply(self, points) -> np.ndarray:
        """Map body-frame points (``(3,)`` or ``(n, 3)``) to the parent frame."""
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation.T + self.position

    def apply_inverse(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return (pts - self.position) @ self.rotation

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: first ``other``, then ``self``."""
        r = self.rotation @ other.rotation
        yaw, pitch, roll = euler_from_matrix(r)
        return Pose(self.apply(other.position), yaw, pitch, roll)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        yaw, pitch, roll = euler_from_matrix(rt)
        return Pose(-rt @ self.position, yaw, pitch, roll)


@dataclass(frozen=True)
class SegmentFrameDef:
    origin_pose: Pose
    projection_origin: GeoPoint


def pose_from_geo(geo: GeoPoint, yaw: float, pitch: float, roll: float,
                  projection_origin: GeoPoint) -> Pose:
    """Projected pose of a GNSS/IMU sample whose yaw is relative to true east."""
    xy = project_tm_array([geo.lat], [geo.lon], projection_origin)[0]
    conv = grid_convergence([geo.lat], [geo.lon], projection_origin)[0]
    return Pose(np.array([xy[0], xy[1], geo.alt]), yaw + conv, pitch, roll)


def segment_frame_for(geo: GeoPoint, yaw: float, pitch: float, roll: float) -> SegmentFrameDef:
    """Segment frame anchored at this sample; its projection origin is the sample itself."""
    origin = GeoPoint(geo.lat, geo.lon, 0.0)
    return SegmentFrameDef(pose_from_geo(geo, yaw, pitch, roll, origin), origin)


def to_segment_frame(points, frame_pose: Pose, segment_def: SegmentFrameDef) -> np.ndarray:
    """Sensor-frame points of one sweep expressed in the segment frame."""
    return segment_def.origin_pose.apply_inverse(frame_pose.apply(points))


def from_segment_frame(points, frame_pose: Pose, segment_def: SegmentFrameDef) -> np.ndarray:
    return frame_pose.apply_inverse(segment_def.origin_pose.apply(points))


def segment_to_projected(points, segment_def: SegmentFrameDef, target_origin: GeoPoint) -> np.ndarray:
    """Segment-frame points re-expressed in the projection anchored at ``target_origin``."""
    world = segment_def.origin_pose.apply(np.atleast_2d(points))
    return reproject(world, segment_def.projection_origin, target_origin)


def projected_to_segment(points, segment_def: SegmentFrameDef, source_origin: GeoPoint) -> np.ndarray:
    world = reproject(np.atleast_2d(np.asarray(points, dtype=float)), source_origin,
                      segment_def.projection_origin)
    return segment_def.origin_pose.apply_inverse(world)
