"""OpenDRIVE model, curve fitting and XML serialisation.

Roads are built one per OSM way from ordered per-segment reference
polylines.  Each segment becomes one normalised paramPoly3 element whose
start point and heading are inherited from the previous element's evaluated
end, so joins are exact by construction.
"""

from __future__ import annotations

import csv
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import PP3_KEYS, GeometryElement, pp3_deriv, pp3_length, pp3_poly, spiral_local

DEFAULT_DATE = "2026-01-01T00:00:00"
CONTINUITY_LOOKBACK = 30.0
PARAM_ITERATIONS = 4


class FitError(ValueError):
    pass


class AssemblyError(ValueError):
    pass


def fmt(v) -> str:
    return format(float(v), ".17g")


# -- model ---------------------------------------------------------------------

@dataclass
class CubicRecord:
    s: float
    a: float
    b: float = 0.0
    c: float = 0.0
    d: float = 0.0

    def __call__(self, ds):
        return self.a + ds * (self.b + ds * (self.c + ds * self.d))


@dataclass
class Lane:
    lane_id: int
    lane_type: str = "driving"
    widths: list[CubicRecord] = field(default_factory=list)  # s is sOffset in the section
    predecessor: int | None = None
    successor: int | None = None
    road_mark: str | None = None


@dataclass
class LaneSection:
    s: float
    right: list[Lane] = field(default_factory=list)  # ordered -1, -2, ...
    center_mark: str | None = "solid"

    def lane(self, lane_id: int) -> Lane | None:
        return next((ln for ln in self.right if ln.lane_id == lane_id), None)


@dataclass
class RoadLink:
    element_type: str   # road | junction
    element_id: str
    contact_point: str | None = "start"


@dataclass
class RoadModel:
    road_id: str
    way_id: int | None
    geometry: list[GeometryElement] = field(default_factory=list)
    elevation: list[CubicRecord] = field(default_factory=list)
    superelevation: list[CubicRecord] = field(default_factory=list)
    lane_offset: list[CubicRecord] = field(default_factory=list)
    lane_sections: list[LaneSection] = field(default_factory=list)
    predecessor: RoadLink | None = None
    successor: RoadLink | None = None
    junction: str = "-1"
    name: str = ""

    @property
    def length(self) -> float:
        return float(sum(g.length for g in self.geometry))

    def end_state(self) -> tuple[float, float, float]:
        return self.geometry[-1].end()


@dataclass
class JunctionConnection:
    connection_id: str
    incoming_road: str
    connecting_road: str
    contact_point: str
    lane_links: list[tuple[int, int]] = field(default_factory=list)


@dataclass
class JunctionModel:
    junction_id: str
    name: str = ""
    connections: list[JunctionConnection] = field(default_factory=list)


@dataclass
class XodrDocument:
    geo_reference: str = ""
    name: str = "hdseg"
    date: str = DEFAULT_DATE
    roads: list[RoadModel] = field(default_factory=list)
    junctions: list[JunctionModel] = field(default_factory=list)

    def road(self, road_id: str) -> RoadModel:
        for r in self.roads:
            if r.road_id == road_id:
                return r
        raise KeyError(road_id)


def geo_reference_string(lat0: float, lon0: float) -> str:
    return (f"+proj=tmerc +lat_0={lat0:.12f} +lon_0={lon0:.12f} +k=1 +x_0=0 +y_0=0 "
            "+ellps=WGS84 +units=m +no_defs")


# -- continuity ----------------------------------------------------------------

def lateral_offset(prev: np.ndarray, nxt_start, lookback: float = CONTINUITY_LOOKBACK) -> float:
    """Lateral distance of ``nxt_start`` from a parabola through the end of ``prev``."""
    p = np.asarray(prev, float)[:, :2]
    q = np.asarray(nxt_start, float)[:2]
    if len(p) < 2:
        return 0.0
    back = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(p[::-1], axis=0), axis=1))])
    win = p[::-1][back <= lookback][::-1]
    if len(win) < 2:
        win = p[-2:]
    d = win[-1] - win[0]
    d = d / np.linalg.norm(d)
    nrm = np.array([-d[1], d[0]])
    u = (win - win[-1]) @ d
    v = (win - win[-1]) @ nrm
    deg = 2 if len(win) >= 4 else 1
    coef = np.polyfit(u, v, deg)
    uq, vq = (q - win[-1]) @ d, (q - win[-1]) @ nrm
    return float(abs(vq - np.polyval(coef, uq)))


def enforce_continuity(polylines: list, flag_threshold: float = 0.5,
                       lookback: float = CONTINUITY_LOOKBACK):
    """Append each successor's first point to its predecessor.

    ``polylines`` is an ordered list where ``None`` marks a missing segment;
    no append happens across a missing one.  Returns the adjusted list and
    ``(index, lateral_offset)`` for every pair over the threshold.
    """
    out = [None if p is None else np.array(p, dtype=float) for p in polylines]
    flags = []
    for k in range(len(out) - 1):
        a, b = out[k], polylines[k + 1]
        if a is None or b is None or len(a) == 0 or len(b) == 0:
            continue
        b0 = np.asarray(b, dtype=float)[0]
        off = lateral_offset(np.asarray(polylines[k], float), b0, lookback)
        if off > flag_threshold:
            flags.append((k, off))
        if np.linalg.norm(a[-1, :2] - b0[:2]) > 1e-9:
            out[k] = np.vstack([a, b0[None, : a.shape[1]]])
    return out, flags


# -- paramPoly3 fitting --------------------------------------------------------

def _rot(h):
    c, s = math.cos(h), math.sin(h)
    return np.array([[c, -s], [s, c]])


def _solve(A, y, w):
    sw = np.sqrt(w)[:, None]
    M = A * sw
    if np.linalg.matrix_rank(M) < A.shape[1]:
        raise FitError("rank-deficient paramPoly3 system")
    return np.linalg.lstsq(M, y * sw[:, 0], rcond=None)[0]


def _fit_coeffs(q, p, w, free_bv: bool, end_dir=None):
    """Weighted LS for the cubic coefficients; ``end_dir`` pins the end tangent direction."""
    P = np.column_stack([p, p**2, p**3])
    if end_dir is None:
        bu, cu, du = _solve(P, q[:, 0], w)
        if free_bv:
            bv, cv, dv = _solve(P, q[:, 1], w)
        else:
            bv = 0.0
            cv, dv = _solve(P[:, 1:], q[:, 1], w)
        return {"aU": 0.0, "bU": bu, "cU": cu, "dU": du, "aV": 0.0, "bV": bv, "cV": cv, "dV": dv}
    # unknowns bU cU dU [bV] cV dV, tangent at p = 1 parallel to end_dir
    PV = P if free_bv else P[:, 1:]
    nu, nv = 3, PV.shape[1]
    A = np.zeros((2 * len(p), nu + nv))
    A[: len(p), :nu] = P
    A[len(p):, nu:] = PV
    y = np.concatenate([q[:, 0], q[:, 1]])
    ww = np.concatenate([w, w])
    sx, sy = end_dir
    c = np.concatenate([sy * np.array([1.0, 2.0, 3.0]),
                        -sx * (np.array([1.0, 2.0, 3.0]) if free_bv else np.array([2.0, 3.0]))])
    M = A.T @ (A * ww[:, None])
    K = np.zeros((nu + nv + 1, nu + nv + 1))
    K[:-1, :-1] = M
    K[:-1, -1] = c
    K[-1, :-1] = c
    rhs = np.concatenate([A.T @ (ww * y), [0.0]])
    if np.linalg.matrix_rank(K) < K.shape[0]:
        raise FitError("rank-deficient paramPoly3 system")
    x = np.linalg.solve(K, rhs)
    bu, cu, du = x[:3]
    bv, cv, dv = (x[3], x[4], x[5]) if free_bv else (0.0, x[3], x[4])
    return {"aU": 0.0, "bU": bu, "cU": cu, "dU": du, "aV": 0.0, "bV": bv, "cV": cv, "dV": dv}


def _reproject(params, q, p):
    """Newton steps toward the closest curve parameter for each interior point."""
    p = p.copy()
    for _ in range(3):
        u, v = pp3_poly(params, p)
        du, dv = pp3_deriv(params, p)
        ddu = 2 * params["cU"] + 6 * params["dU"] * p
        ddv = 2 * params["cV"] + 6 * params["dV"] * p
        ex, ey = u - q[:, 0], v - q[:, 1]
        g = ex * du + ey * dv
        h = du * du + dv * dv + ex * ddu + ey * ddv
        step = np.where(h > 1e-12, g / np.where(h > 1e-12, h, 1.0), 0.0)
        p = np.clip(p - step, 0.0, 1.0)
    p[0], p[-1] = 0.0, 1.0
    return np.maximum.accumulate(p)


def fit_parampoly3(points, endpoint_weight: float = 10.0, start=None,
                   iterations: int = PARAM_ITERATIONS, end_heading: float | None = None) -> GeometryElement:
    """Weighted least-squares paramPoly3 through a polyline (inertial xy).

    With ``start = (x, y, hdg)`` the element begins exactly there with that
    heading.  Without it the element begins at the first point and its
    heading is fitted, then folded into ``hdg`` so that ``bV = 0``.
    ``end_heading`` (inertial) fixes the tangent direction at the far end.
    """
    pts = np.asarray(points, dtype=float)[:, :2]
    if len(pts) < 4:
        raise FitError(f"paramPoly3 fit needs >= 4 points, got {len(pts)}")
    if start is None:
        origin = pts[0]
        lead = pts[min(len(pts) - 1, max(1, len(pts) // 4))] - origin
        hdg = math.atan2(lead[1], lead[0])
        data = pts
    else:
        origin = np.array(start[:2], dtype=float)
        hdg = float(start[2])
        data = pts if np.linalg.norm(pts[0] - origin) < 1e-9 else np.vstack([origin, pts])
        data = data.copy()
        data[0] = origin
    q = (data - origin) @ _rot(hdg)
    chord = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(q, axis=0), axis=1))])
    if chord[-1] <= 1e-9:
        raise FitError("degenerate polyline (zero length)")
    p = chord / chord[-1]
    w = np.ones(len(q))
    w[0] = w[-1] = endpoint_weight

    free = start is None
    end_dir = None if end_heading is None else (math.cos(end_heading - hdg), math.sin(end_heading - hdg))
    params = _fit_coeffs(q, p, w, free, end_dir)
    for _ in range(iterations):
        p = _reproject(params, q, p)
        if np.any(np.diff(p) <= 0):
            break
        params = _fit_coeffs(q, p, w, free, end_dir)

    if free and params["bV"] != 0.0:
        phi = math.atan2(params["bV"], params["bU"])
        R = _rot(-phi)
        for c in "bcd":
            u, v = R @ np.array([params[c + "U"], params[c + "V"]])
            params[c + "U"], params[c + "V"] = float(u), float(v)
        params["bV"] = 0.0
        hdg += phi
    params = {k: float(params[k]) for k in PP3_KEYS}
    if params["bU"] <= 0:
        raise FitError("fitted curve runs backwards")
    length = pp3_length(params)
    return GeometryElement(0.0, float(origin[0]), float(origin[1]), float(hdg), length,
                           "paramPoly3", params)


def hermite_element(start, end) -> GeometryElement:
    """paramPoly3 joining two poses; used to bridge segments without data."""
    x0, y0, h0 = start
    q = _rot(h0).T @ (np.array(end[:2], float) - np.array([x0, y0]))
    phi = end[2] - h0
    D = float(np.linalg.norm(q))
    if D <= 1e-9:
        raise FitError("bridge endpoints coincide")
    t0 = np.array([D, 0.0])
    t1 = D * np.array([math.cos(phi), math.sin(phi)])
    c = -2 * t0 + 3 * q - t1
    d = t0 - 2 * q + t1
    params = {"aU": 0.0, "bU": D, "cU": float(c[0]), "dU": float(d[0]),
              "aV": 0.0, "bV": 0.0, "cV": float(c[1]), "dV": float(d[1])}
    return GeometryElement(0.0, float(x0), float(y0), float(h0), pp3_length(params),
                           "paramPoly3", params)


def start_heading(poly, span: float = 10.0) -> float:
    """Heading of a polyline near its first point (line fit over ``span`` metres)."""
    p = np.asarray(poly, float)[:, :2]
    d = np.linalg.norm(p - p[0], axis=1)
    win = p[d <= span] if (d <= span).sum() >= 2 else p[:2]
    c = win - win.mean(axis=0)
    _, _, vt = np.linalg.svd(c, full_matrices=False)
    v = vt[0]
    if v @ (p[min(len(p) - 1, len(win))] - p[0]) < 0:
        v = -v
    return math.atan2(v[1], v[0])


def junction_heading(prev, nxt, span: float = 20.0) -> float:
    """Tangent heading where ``prev`` hands over to ``nxt`` (quadratic over both sides)."""
    a = np.asarray(prev, float)[:, :2]
    b = np.asarray(nxt, float)[:, :2]
    j = b[0]
    pts = np.vstack([a[np.linalg.norm(a - j, axis=1) <= span], b[np.linalg.norm(b - j, axis=1) <= span]])
    if len(pts) < 3:
        return start_heading(b)
    c = pts - pts.mean(axis=0)
    d = np.linalg.svd(c, full_matrices=False)[2][0]
    if d @ (b[-1] - a[0]) < 0:
        d = -d
    nrm = np.array([-d[1], d[0]])
    u, v = (pts - j) @ d, (pts - j) @ nrm
    slope = np.polyfit(u, v, 2)[1] if np.ptp(u) > 1e-6 else 0.0
    t = d + slope * nrm
    return math.atan2(t[1], t[0])


# -- elevation -----------------------------------------------------------------

def element_stations(elem: GeometryElement, xy, step: float = 0.25) -> np.ndarray:
    """Arc-length offset of the closest point on ``elem`` for each of ``xy``."""
    ds = np.linspace(0.0, elem.length, max(2, int(math.ceil(elem.length / step)) + 1))
    x, y, _ = elem.evaluate(ds)
    _, k = cKDTree(np.column_stack([x, y])).query(np.asarray(xy, float)[:, :2])
    return ds[k]


def fit_elevation(ds, z, t=None, s0: float = 0.0, min_lateral_spread: float = 0.5):
    """Cubic elevation and (optional) superelevation over one element.

    The model is ``z = e(ds) + t * sup(ds)`` with ``t`` the lateral position
    of each sample (left positive).  Superelevation is fitted only when the
    samples span at least ``min_lateral_spread`` across the road.
    """
    ds = np.asarray(ds, float)
    z = np.asarray(z, float)
    if len(ds) == 0:
        raise FitError("no elevation samples")
    B = np.column_stack([np.ones_like(ds), ds, ds**2, ds**3])
    with_sup = t is not None and np.ptp(np.asarray(t, float)) >= min_lateral_spread
    if with_sup:
        t = np.asarray(t, float)
        A = np.hstack([B, B * t[:, None]])
    else:
        A = B
    ncol = A.shape[1]
    # keep the cubic terms only when the data can support them
    span = np.ptp(ds)
    if len(ds) < ncol + 2 or span < 1e-6:
        keep = [0] if span < 1e-6 else [0, 1]
        cols = keep + ([4 + k for k in keep] if with_sup else [])
        sol = np.zeros(ncol)
        sol[cols] = np.linalg.lstsq(A[:, cols], z, rcond=None)[0]
    else:
        sol = np.linalg.lstsq(A, z, rcond=None)[0]
    elev = CubicRecord(s0, *map(float, sol[:4]))
    sup = CubicRecord(s0, *map(float, sol[4:])) if with_sup else None
    return elev, sup


# -- lanes ---------------------------------------------------------------------

def lane_section(s: float, lane_count: int, lane_width: float, shoulder_width: float | None,
                 taper: tuple[int, str, float] | None = None) -> LaneSection:
    """Right-hand lanes -1..-n (+ shoulder).  ``taper = (lane_id, 'in'|'out', length)``."""
    lanes = []
    for k in range(1, lane_count + 1):
        w = CubicRecord(0.0, lane_width)
        if taper is not None and taper[0] == -k:
            T = taper[2]
            if taper[1] == "in":
                w = CubicRecord(0.0, 0.0, 0.0, 3 * lane_width / T**2, -2 * lane_width / T**3)
            else:
                w = CubicRecord(0.0, lane_width, 0.0, -3 * lane_width / T**2, 2 * lane_width / T**3)
        mark = "solid" if k == lane_count else "broken"
        lanes.append(Lane(-k, "driving", [w], road_mark=mark))
    if shoulder_width:
        lanes.append(Lane(-(lane_count + 1), "shoulder", [CubicRecord(0.0, shoulder_width)],
                          road_mark="solid"))
    return LaneSection(s, lanes)


def link_lanes(pred: RoadModel, succ: RoadModel) -> None:
    """Lane-level links between the last section of ``pred`` and the first of ``succ``."""
    a, b = pred.lane_sections[-1], succ.lane_sections[0]
    a_drive = [ln for ln in a.right if ln.lane_type == "driving"]
    b_drive = [ln for ln in b.right if ln.lane_type == "driving"]
    for la, lb in zip(a_drive, b_drive):
        la.successor, lb.predecessor = lb.lane_id, la.lane_id
    a_sh = [ln for ln in a.right if ln.lane_type == "shoulder"]
    b_sh = [ln for ln in b.right if ln.lane_type == "shoulder"]
    if a_sh and b_sh:
        a_sh[0].successor, b_sh[0].predecessor = b_sh[0].lane_id, a_sh[0].lane_id


# -- ramps ---------------------------------------------------------------------

def ramp_spiral(main: RoadModel, station: float, lateral: float, length: float, curvature: float,
                exit_ramp: bool) -> GeometryElement:
    """Placeholder ramp geometry beside ``main`` at ``station``.

    ``lateral`` is the distance to the right of the reference line.  Exits
    start there with the road heading, entries end there with it.
    """
    elems = main.geometry
    st = min(max(station, 0.0), main.length)
    k = max(i for i, e in enumerate(elems) if e.s <= st + 1e-9)
    x, y, h = elems[k].evaluate(np.array([st - elems[k].s]))
    x, y, h = float(x[0]), float(y[0]), float(h[0])
    px, py = x + lateral * math.sin(h), y - lateral * math.cos(h)
    k_ramp = -abs(curvature)
    if exit_ramp:
        return GeometryElement(0.0, px, py, h, length, "spiral", {"curvStart": 0.0, "curvEnd": k_ramp})
    c = (0.0 - k_ramp) / length
    u, v, th = spiral_local(np.array([length]), k_ramp, c)
    h0 = h - float(th[0])
    dx, dy = _rot(h0) @ np.array([u[0], v[0]])
    return GeometryElement(0.0, px - dx, py - dy, h0, length, "spiral",
                           {"curvStart": k_ramp, "curvEnd": 0.0})


# -- validation ----------------------------------------------------------------

def join_errors(road: RoadModel) -> list[tuple[float, float]]:
    """Position and heading mismatch at every element boundary."""
    out = []
    for a, b in zip(road.geometry[:-1], road.geometry[1:]):
        x, y, h = a.end()
        dh = (b.hdg - h + math.pi) % (2 * math.pi) - math.pi
        out.append((math.hypot(b.x - x, b.y - y), abs(dh)))
    return out


def validate(doc: XodrDocument) -> None:
    ids = [r.road_id for r in doc.roads]
    if len(set(ids)) != len(ids):
        raise AssemblyError("duplicate road ids")
    by_id = {r.road_id: r for r in doc.roads}
    jids = {j.junction_id for j in doc.junctions}
    for r in doc.roads:
        if not r.geometry:
            raise AssemblyError(f"road {r.road_id} has no geometry")
        s = 0.0
        for g in r.geometry:
            if abs(g.s - s) > 1e-6:
                raise AssemblyError(f"road {r.road_id}: geometry s not contiguous at {g.s}")
            s += g.length
        secs = [sec.s for sec in r.lane_sections]
        if any(b <= a for a, b in zip(secs[:-1], secs[1:])):
            raise AssemblyError(f"road {r.road_id}: lane section s not increasing")
        if r.junction != "-1" and r.junction not in jids:
            raise AssemblyError(f"road {r.road_id} references missing junction {r.junction}")
        for link, sec_pick, attr in ((r.successor, 0, "successor"), (r.predecessor, -1, "predecessor")):
            if link is None or link.element_type != "road":
                continue
            other = by_id.get(link.element_id)
            if other is None:
                raise AssemblyError(f"road {r.road_id} {attr} {link.element_id} does not exist")
            own = r.lane_sections[-1 if attr == "successor" else 0]
            target = other.lane_sections[sec_pick]
            for ln in own.right:
                ref = getattr(ln, attr)
                if ref is not None and target.lane(ref) is None:
                    raise AssemblyError(f"road {r.road_id} lane {ln.lane_id}: {attr} lane {ref} "
                                        f"missing in road {other.road_id}")
    for j in doc.junctions:
        for c in j.connections:
            for rid in (c.incoming_road, c.connecting_road):
                if rid not in by_id:
                    raise AssemblyError(f"junction {j.junction_id} references missing road {rid}")
            inc, con = by_id[c.incoming_road], by_id[c.connecting_road]
            for a, b in c.lane_links:
                if not any(sec.lane(a) for sec in inc.lane_sections):
                    raise AssemblyError(f"junction {j.junction_id}: lane {a} missing in road {inc.road_id}")
                if con.lane_sections[0].lane(b) is None:
                    raise AssemblyError(f"junction {j.junction_id}: lane {b} missing in road {con.road_id}")


# -- XML -----------------------------------------------------------------------

def _cubic(parent, tag, rec: CubicRecord, s_key="s"):
    ET.SubElement(parent, tag, {s_key: fmt(rec.s), "a": fmt(rec.a), "b": fmt(rec.b),
                                "c": fmt(rec.c), "d": fmt(rec.d)})


def _bounds(doc: XodrDocument):
    xs, ys = [], []
    for r in doc.roads:
        for g in r.geometry:
            x, y, _ = g.end()
            xs += [g.x, x]
            ys += [g.y, y]
    if not xs:
        return 0.0, 0.0, 0.0, 0.0
    return max(ys), min(ys), max(xs), min(xs)


def to_element(doc: XodrDocument) -> ET.Element:
    validate(doc)
    root = ET.Element("OpenDRIVE")
    n, s, e, w = _bounds(doc)
    header = ET.SubElement(root, "header", {
        "revMajor": "1", "revMinor": "6", "name": doc.name, "version": "1.00", "date": doc.date,
        "north": fmt(n), "south": fmt(s), "east": fmt(e), "west": fmt(w)})
    if doc.geo_reference:
        ET.SubElement(header, "geoReference").text = doc.geo_reference

    for r in doc.roads:
        road = ET.SubElement(root, "road", {"name": r.name or f"road_{r.road_id}",
                                            "length": fmt(r.length), "id": r.road_id,
                                            "junction": r.junction})
        link = ET.SubElement(road, "link")
        for tag, lk in (("predecessor", r.predecessor), ("successor", r.successor)):
            if lk is not None:
                attrs = {"elementType": lk.element_type, "elementId": lk.element_id}
                if lk.contact_point and lk.element_type == "road":
                    attrs["contactPoint"] = lk.contact_point
                ET.SubElement(link, tag, attrs)
        ET.SubElement(road, "type", {"s": fmt(0.0), "type": "motorway"})
        pv = ET.SubElement(road, "planView")
        for g in r.geometry:
            ge = ET.SubElement(pv, "geometry", {"s": fmt(g.s), "x": fmt(g.x), "y": fmt(g.y),
                                                "hdg": fmt(g.hdg), "length": fmt(g.length)})
            if g.kind == "line":
                ET.SubElement(ge, "line")
            elif g.kind == "arc":
                ET.SubElement(ge, "arc", {"curvature": fmt(g.params["curvature"])})
            elif g.kind == "spiral":
                ET.SubElement(ge, "spiral", {"curvStart": fmt(g.params["curvStart"]),
                                             "curvEnd": fmt(g.params["curvEnd"])})
            else:
                attrs = {k: fmt(g.params[k]) for k in PP3_KEYS}
                attrs["pRange"] = "normalized"
                ET.SubElement(ge, "paramPoly3", attrs)
        ep = ET.SubElement(road, "elevationProfile")
        for rec in r.elevation:
            _cubic(ep, "elevation", rec)
        lp = ET.SubElement(road, "lateralProfile")
        for rec in r.superelevation:
            _cubic(lp, "superelevation", rec)
        lanes = ET.SubElement(road, "lanes")
        for rec in r.lane_offset:
            _cubic(lanes, "laneOffset", rec)
        for sec in r.lane_sections:
            ls = ET.SubElement(lanes, "laneSection", {"s": fmt(sec.s)})
            center = ET.SubElement(ET.SubElement(ls, "center"), "lane",
                                   {"id": "0", "type": "none", "level": "false"})
            if sec.center_mark:
                ET.SubElement(center, "roadMark", {"sOffset": fmt(0.0), "type": sec.center_mark,
                                                   "color": "white"})
            right = ET.SubElement(ls, "right")
            for ln in sec.right:
                le = ET.SubElement(right, "lane", {"id": str(ln.lane_id), "type": ln.lane_type,
                                                   "level": "false"})
                lk = ET.SubElement(le, "link")
                if ln.predecessor is not None:
                    ET.SubElement(lk, "predecessor", {"id": str(ln.predecessor)})
                if ln.successor is not None:
                    ET.SubElement(lk, "successor", {"id": str(ln.successor)})
                for wr in ln.widths:
                    _cubic(le, "width", wr, s_key="sOffset")
                if ln.road_mark:
                    ET.SubElement(le, "roadMark", {"sOffset": fmt(0.0), "type": ln.road_mark,
                                                   "color": "white"})

    for j in doc.junctions:
        je = ET.SubElement(root, "junction", {"name": j.name or f"junction_{j.junction_id}",
                                              "id": j.junction_id})
        for c in j.connections:
            ce = ET.SubElement(je, "connection", {"id": c.connection_id,
                                                  "incomingRoad": c.incoming_road,
                                                  "connectingRoad": c.connecting_road,
                                                  "contactPoint": c.contact_point})
            for a, b in c.lane_links:
                ET.SubElement(ce, "laneLink", {"from": str(a), "to": str(b)})
    return root


def write_xml(doc: XodrDocument, path) -> None:
    root = to_element(doc)
    ET.indent(root)
    ET.ElementTree(root).write(path, encoding="utf-8", xml_declaration=True)


def write_flag_report(rows, path) -> None:
    """``rows`` of ``(segment_key, reason, lateral_offset)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["segment_key", "reason", "lateral_offset"])
        for key, reason, off in rows:
            w.writerow([key, reason, "" if off is None else f"{off:.6f}"])


# -- assembly ------------------------------------------------------------------

@dataclass
class SegmentPiece:
    """One segment's contribution to a road, in the document projection."""

    key: str
    start_xy: np.ndarray
    end_xy: np.ndarray
    points: np.ndarray | None = None       # (n, 2+) reference polyline, None if failed
    samples: np.ndarray | None = None      # (m, 4) x, y, z of marking, lateral

    @property
    def ok(self) -> bool:
        return self.points is not None and len(self.points) >= 4


@dataclass
class RoadPlan:
    way_id: int
    lane_count: int
    lane_width: float
    shoulder_width: float | None
    pieces: list[SegmentPiece]


@dataclass
class RampPlan:
    way_id: int
    main_way: int
    node_xy: np.ndarray
    exit_ramp: bool


def road_station(road: RoadModel, xy) -> float:
    """Station of the point on ``road`` nearest to ``xy``."""
    best, s_best = np.inf, 0.0
    for e in road.geometry:
        ds = element_stations(e, np.atleast_2d(xy))[0]
        x, y, _ = e.evaluate(np.array([ds]))
        d = math.hypot(x[0] - xy[0], y[0] - xy[1])
        if d < best:
            best, s_best = d, e.s + ds
    return float(s_best)


def _elevation_records(elems, sources, prev_end):
    """Per-element elevation and superelevation from marking samples."""
    elev, sup = [], []
    for e, smp in zip(elems, sources):
        if smp is not None and len(smp):
            ds = element_stations(e, smp[:, :2])
            er, sr = fit_elevation(ds, smp[:, 2], smp[:, 3], s0=e.s)
        else:
            er, sr = None, None
        elev.append(er)
        sup.append(sr)
    # bridges: straight ramp between the neighbouring profiles
    for k, e in enumerate(elems):
        if elev[k] is not None:
            continue
        z0 = prev_end
        if k > 0 and elev[k - 1] is not None:
            z0 = elev[k - 1](elems[k - 1].length)
        nxt = next((elev[j] for j in range(k + 1, len(elems)) if elev[j] is not None), None)
        z1 = nxt.a if nxt is not None else z0
        if z0 is None:
            z0 = z1 if z1 is not None else 0.0
        if z1 is None:
            z1 = z0
        elev[k] = CubicRecord(e.s, z0, (z1 - z0) / e.length)
    if all(r is None for r in sup):
        sup = []
    else:
        sup = [r if r is not None else CubicRecord(e.s, 0.0) for r, e in zip(sup, elems)]
    return elev, sup


def build_road(plan: RoadPlan, road_id: str, start_state=None, endpoint_weight: float = 10.0,
               flag_threshold: float = 0.5):
    """Geometry, elevation and lanes for one way.

    Returns ``(road, flags, element_keys)`` where ``flags`` lists
    ``(segment_key, lateral_offset)`` continuity violations and
    ``element_keys`` names the segment behind every element (``None`` for
    bridges).  Returns ``road=None`` when no segment of the way succeeded.
    """
    polys = [p.points[:, :2] if p.ok else None for p in plan.pieces]
    polys, raw_flags = enforce_continuity(polys, flag_threshold)
    flags = [(plan.pieces[k].key, off) for k, off in raw_flags]

    elems: list[GeometryElement] = []
    keys: list[str | None] = []
    sources = []
    state = start_state
    n = len(plan.pieces)
    k = 0
    while k < n:
        piece, poly = plan.pieces[k], polys[k]
        elem = None
        if poly is not None:
            nxt = polys[k + 1] if k + 1 < n else None
            end_h = junction_heading(poly, nxt) if nxt is not None else None
            try:
                elem = fit_parampoly3(poly, endpoint_weight, start=state, end_heading=end_h)
            except FitError:
                elem = None
        if elem is None:
            # bridge to the next good segment if there is something to bridge from
            j = next((j for j in range(k + 1, n) if polys[j] is not None), None)
            if state is not None and j is not None:
                nxt = polys[j]
                try:
                    elems.append(hermite_element(state, (nxt[0, 0], nxt[0, 1], start_heading(nxt))))
                    keys.append(None)
                    sources.append(None)
                    state = elems[-1].end()
                except FitError:
                    pass
                k = j
                continue
            k += 1
            continue
        elems.append(elem)
        keys.append(piece.key)
        sources.append(piece.samples)
        state = elem.end()
        k += 1
    if not elems:
        return None, flags, []

    s = 0.0
    for e in elems:
        e.s = s
        s += e.length
    road = RoadModel(road_id, plan.way_id, name=f"way_{plan.way_id}")
    road.geometry = elems
    road.elevation, road.superelevation = _elevation_records(elems, sources, None)
    road.lane_offset = [CubicRecord(0.0, plan.lane_width / 2.0)]
    road.lane_sections = [lane_section(0.0, plan.lane_count, plan.lane_width, plan.shoulder_width)]
    return road, flags, keys


def _retaper(road: RoadModel, plan: RoadPlan, mode: str, taper_length: float) -> None:
    T = min(taper_length, road.length / 2.0)
    n, w, sh = plan.lane_count, plan.lane_width, plan.shoulder_width
    if mode == "in":
        road.lane_sections = [lane_section(0.0, n, w, sh, (-n, "in", T)), lane_section(T, n, w, sh)]
    else:
        road.lane_sections = [lane_section(0.0, n, w, sh),
                              lane_section(road.length - T, n, w, sh, (-n, "out", T))]


def assemble_document(plans: list[RoadPlan], successors: dict[int, list[int]], geo_reference: str,
                      ramps: list[RampPlan] = (), name: str = "hdseg", taper_length: float = 60.0,
                      ramp_length: float = 100.0, ramp_curvature: float = 1.0 / 150.0,
                      ramp_lane_width: float = 3.5, endpoint_weight: float = 10.0,
                      flag_threshold: float = 0.5):
    """Roads for every way plan, linked along ``successors`` (way id -> way ids).

    Plans are processed in the given order; a way whose predecessor was
    already built starts exactly at that road's end pose.
    """
    doc = XodrDocument(geo_reference, name=name)
    flags: list[tuple[str, float]] = []
    built: dict[int, RoadModel] = {}
    plan_of = {p.way_id: p for p in plans}
    element_keys: dict[str, list] = {}
    pred_of: dict[int, int] = {}
    for a, succ in successors.items():
        for b in succ:
            pred_of.setdefault(b, a)

    for plan in plans:
        pred = pred_of.get(plan.way_id)
        start = built[pred].end_state() if pred in built else None
        road, f, keys = build_road(plan, str(len(doc.roads) + 1), start, endpoint_weight,
                                   flag_threshold)
        flags += f
        if road is None:
            continue
        built[plan.way_id] = road
        element_keys[road.road_id] = keys
        doc.roads.append(road)
        if pred in built and start is not None:
            pr, pp = built[pred], plan_of[pred]
            if plan.lane_count > pp.lane_count:
                _retaper(road, plan, "in", taper_length)
            elif plan.lane_count < pp.lane_count:
                _retaper(pr, pp, "out", taper_length)
            pr.successor = RoadLink("road", road.road_id, "start")
            road.predecessor = RoadLink("road", pr.road_id, "end")
            link_lanes(pr, road)

    for ramp in ramps:
        main = built.get(ramp.main_way)
        if main is None:
            continue
        mp = plan_of[ramp.main_way]
        station = road_station(main, ramp.node_xy)
        lateral = (mp.lane_count - 0.5) * mp.lane_width + (mp.shoulder_width or 0.0) \
            + ramp_lane_width / 2.0
        geom = ramp_spiral(main, station, lateral, ramp_length, ramp_curvature, ramp.exit_ramp)
        jid = str(1000 + len(doc.junctions) + 1)
        rr = RoadModel(str(len(doc.roads) + 1), ramp.way_id, junction=jid,
                       name=f"ramp_{ramp.way_id}")
        rr.geometry = [geom]
        z = CubicRecord(0.0, 0.0)
        for rec in main.elevation:
            if rec.s <= station + 1e-9:
                z = rec
        rr.elevation = [CubicRecord(0.0, z(station - z.s))]
        rr.lane_offset = [CubicRecord(0.0, ramp_lane_width / 2.0)]
        rr.lane_sections = [lane_section(0.0, 1, ramp_lane_width, None)]
        doc.roads.append(rr)
        j = JunctionModel(jid, f"ramp_{ramp.way_id}")
        j.connections.append(JunctionConnection("0", main.road_id, rr.road_id,
                                                "start" if ramp.exit_ramp else "end",
                                                [(-mp.lane_count, -1)]))
        doc.junctions.append(j)
    validate(doc)
    return doc, flags, element_keys
