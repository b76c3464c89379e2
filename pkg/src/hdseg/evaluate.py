"""OpenDRIVE reading, reference-line sampling and line-to-line comparison."""

from __future__ import annotations

import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .geo import GeoPoint, reproject
from .geometry import PP3_KEYS, GeometryElement, sample_elements
from .xodr import (CubicRecord, JunctionConnection, JunctionModel, Lane, LaneSection, RoadLink,
                   RoadModel, XodrDocument)


class XodrParseError(ValueError):
    pass


@dataclass
class SampledLine:
    road_id: str
    points: np.ndarray  # (n, 2)
    spacing: float

    @property
    def length(self) -> float:
        if len(self.points) < 2:
            return 0.0
        return float(np.linalg.norm(np.diff(self.points, axis=0), axis=1).sum())


@dataclass(frozen=True)
class CompareStats:
    rmse: float
    avg_distance: float
    std_dev: float
    evaluated_length: float
    n_points: int

    def table(self, direction: str = "generated -> reference") -> str:
        rows = [("RMSE", self.rmse), ("avg. distance", self.avg_distance),
                ("std. deviation sigma", self.std_dev), ("eval. length", self.evaluated_length)]
        lines = [f"comparison: {direction}"]
        lines += [f"  {name:<22s} {val:12.6f} m" for name, val in rows]
        return "\n".join(lines)


# -- parsing -------------------------------------------------------------------

def _f(el, key, path, default=None) -> float:
    raw = el.get(key)
    if raw is None:
        if default is not None:
            return default
        raise XodrParseError(f"{path}: <{el.tag}> missing attribute {key!r}")
    try:
        return float(raw)
    except ValueError as exc:
        raise XodrParseError(f"{path}: <{el.tag}> attribute {key}={raw!r} is not a number") from exc


def _cubics(parent, tag, path, s_key="s") -> list[CubicRecord]:
    if parent is None:
        return []
    return [CubicRecord(_f(e, s_key, path), _f(e, "a", path), _f(e, "b", path, 0.0),
                        _f(e, "c", path, 0.0), _f(e, "d", path, 0.0)) for e in parent.findall(tag)]


def _geometry(ge, path) -> GeometryElement:
    s, x, y, hdg, length = (_f(ge, k, path) for k in ("s", "x", "y", "hdg", "length"))
    kids = list(ge)
    if len(kids) != 1:
        raise XodrParseError(f"{path}: <geometry s={s}> must hold exactly one shape")
    shape = kids[0]
    if shape.tag == "line":
        kind, params = "line", {}
    elif shape.tag == "arc":
        kind, params = "arc", {"curvature": _f(shape, "curvature", path)}
    elif shape.tag == "spiral":
        kind = "spiral"
        params = {"curvStart": _f(shape, "curvStart", path), "curvEnd": _f(shape, "curvEnd", path)}
    elif shape.tag == "paramPoly3":
        kind = "paramPoly3"
        params = {k: _f(shape, k, path) for k in PP3_KEYS}
        p_range = shape.get("pRange", "normalized")
        if p_range == "arcLength":
            # rescale to the normalised parameter used internally
            for axis in "UV":
                params["b" + axis] *= length
                params["c" + axis] *= length**2
                params["d" + axis] *= length**3
        elif p_range != "normalized":
            raise XodrParseError(f"{path}: paramPoly3 pRange {p_range!r} unsupported")
        if abs(params["aU"]) > 0 or abs(params["aV"]) > 0:
            raise XodrParseError(f"{path}: paramPoly3 with nonzero aU/aV unsupported")
    else:
        raise XodrParseError(f"{path}: unknown geometry type <{shape.tag}>")
    try:
        return GeometryElement(s, x, y, hdg, length, kind, params)
    except ValueError as exc:
        raise XodrParseError(f"{path}: <geometry s={s}>: {exc}") from exc


def _link(el) -> RoadLink | None:
    if el is None:
        return None
    return RoadLink(el.get("elementType", "road"), el.get("elementId", ""), el.get("contactPoint"))


def _lane(le, path) -> Lane:
    lk = le.find("link")
    pred = lk.find("predecessor") if lk is not None else None
    succ = lk.find("successor") if lk is not None else None
    mark = le.find("roadMark")
    return Lane(int(le.get("id")), le.get("type", "driving"), _cubics(le, "width", path, "sOffset"),
                None if pred is None else int(pred.get("id")),
                None if succ is None else int(succ.get("id")),
                None if mark is None else mark.get("type"))


def read_xodr(path) -> XodrDocument:
    path = Path(path)
    try:
        root = ET.parse(path).getroot()
    except (ET.ParseError, OSError) as exc:
        raise XodrParseError(f"{path}: {exc}") from exc
    if root.tag != "OpenDRIVE":
        raise XodrParseError(f"{path}: root element is <{root.tag}>, expected <OpenDRIVE>")
    header = root.find("header")
    geo = header.findtext("geoReference", "").strip() if header is not None else ""
    doc = XodrDocument(geo_reference=geo,
                       name=header.get("name", "") if header is not None else "",
                       date=header.get("date", "") if header is not None else "")
    for re_ in root.findall("road"):
        rid = re_.get("id")
        if rid is None:
            raise XodrParseError(f"{path}: <road> without id")
        pv = re_.find("planView")
        if pv is None:
            raise XodrParseError(f"{path}: road {rid} has no <planView>")
        road = RoadModel(rid, None, name=re_.get("name", ""), junction=re_.get("junction", "-1"))
        road.geometry = [_geometry(g, f"{path} road {rid}") for g in pv.findall("geometry")]
        road.geometry.sort(key=lambda g: g.s)
        road.elevation = _cubics(re_.find("elevationProfile"), "elevation", path)
        road.superelevation = _cubics(re_.find("lateralProfile"), "superelevation", path)
        lanes = re_.find("lanes")
        if lanes is not None:
            road.lane_offset = _cubics(lanes, "laneOffset", path)
            for ls in lanes.findall("laneSection"):
                right = ls.find("right")
                lane_list = [] if right is None else [_lane(le, path) for le in right.findall("lane")]
                lane_list.sort(key=lambda ln: -ln.lane_id)
                road.lane_sections.append(LaneSection(_f(ls, "s", path), lane_list))
        link = re_.find("link")
        if link is not None:
            road.predecessor = _link(link.find("predecessor"))
            road.successor = _link(link.find("successor"))
        doc.roads.append(road)
    for je in root.findall("junction"):
        j = JunctionModel(je.get("id"), je.get("name", ""))
        for ce in je.findall("connection"):
            j.connections.append(JunctionConnection(
                ce.get("id"), ce.get("incomingRoad"), ce.get("connectingRoad"),
                ce.get("contactPoint", "start"),
                [(int(ll.get("from")), int(ll.get("to"))) for ll in ce.findall("laneLink")]))
        doc.junctions.append(j)
    return doc


# -- sampling ------------------------------------------------------------------

def sample_road(road: RoadModel, spacing: float = 1.0) -> SampledLine:
    pts, _ = sample_elements(road.geometry, spacing)
    return SampledLine(road.road_id, pts, spacing)


def sample_refline(source, spacing: float = 1.0, include_junction_roads: bool = False) -> list[SampledLine]:
    """Uniform arc-length samples of every road reference line."""
    if spacing <= 0:
        raise ValueError("spacing must be > 0")
    doc = source if isinstance(source, XodrDocument) else read_xodr(source)
    return [sample_road(r, spacing) for r in doc.roads
            if r.geometry and (include_junction_roads or r.junction == "-1")]


# -- comparison ----------------------------------------------------------------

class _PolylineSet:
    """Nearest distance from points to a set of polylines."""

    def __init__(self, lines: list[SampledLine], k: int = 6):
        segs_a, segs_b, verts = [], [], []
        seg_of_vertex = []
        for ln in lines:
            p = ln.points
            if len(p) == 0:
                continue
            base = len(segs_a)
            if len(p) == 1:
                segs_a.append(p[0])
                segs_b.append(p[0])
                verts.append(p[0])
                seg_of_vertex.append((base, base))
                continue
            segs_a.extend(p[:-1])
            segs_b.extend(p[1:])
            for i in range(len(p)):
                verts.append(p[i])
                seg_of_vertex.append((base + max(i - 1, 0), base + min(i, len(p) - 2)))
        if not verts:
            raise ValueError("comparison target is empty")
        self.a = np.array(segs_a)
        self.b = np.array(segs_b)
        self.tree = cKDTree(np.array(verts))
        self.adj = np.array(seg_of_vertex)
        self.k = min(k, len(verts))

    def nearest(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        _, idx = self.tree.query(pts, k=self.k)
        idx = np.atleast_2d(idx.reshape(len(pts), -1))
        cand = self.adj[idx].reshape(len(pts), -1)
        a, b = self.a[cand], self.b[cand]
        ab = b - a
        denom = np.maximum((ab**2).sum(-1), 1e-300)
        t = np.clip(((pts[:, None, :] - a) * ab).sum(-1) / denom, 0.0, 1.0)
        foot = a + t[..., None] * ab
        d = np.linalg.norm(pts[:, None, :] - foot, axis=-1)
        j = np.argmin(d, axis=1)
        rows = np.arange(len(pts))
        return d[rows, j], foot[rows, j]


def _stack(lines: list[SampledLine]) -> np.ndarray:
    pts = [ln.points for ln in lines if len(ln.points)]
    return np.vstack(pts) if pts else np.empty((0, 2))


def rigid_align(a: list[SampledLine], b: list[SampledLine], iterations: int = 30):
    """Least-squares rotation + translation moving ``a`` onto ``b`` (ICP)."""
    target = _PolylineSet(b)
    src = _stack(a)
    R, t = np.eye(2), np.zeros(2)
    for _ in range(iterations):
        cur = src @ R.T + t
        _, foot = target.nearest(cur)
        mc, mf = cur.mean(axis=0), foot.mean(axis=0)
        H = (cur - mc).T @ (foot - mf)
        U, _, Vt = np.linalg.svd(H)
        D = np.diag([1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
        dR = Vt.T @ D @ U.T
        dt = mf - dR @ mc
        R, t = dR @ R, dR @ t + dt
        if np.linalg.norm(dt) < 1e-10 and abs(dR[1, 0]) < 1e-12:
            break
    return R, t


def compare(a: list[SampledLine], b: list[SampledLine], align: bool = False) -> CompareStats:
    """Distance from each point of ``a`` to the nearest point on ``b``'s lines."""
    if not a or not b or not len(_stack(a)) or not len(_stack(b)):
        raise ValueError("compare needs non-empty line sets")
    if align:
        R, t = rigid_align(a, b)
        a = [SampledLine(ln.road_id, ln.points @ R.T + t, ln.spacing) for ln in a]
    d, _ = _PolylineSet(b).nearest(_stack(a))
    avg = float(d.mean())
    sigma = float(d.std())
    rmse = float(math.sqrt(np.mean(d * d)))
    return CompareStats(rmse, avg, sigma, float(sum(ln.length for ln in a)), len(d))


def reproject_lines(lines: list[SampledLine], src_geo: str, dst_geo: str) -> list[SampledLine]:
    """Move sampled lines from one tmerc geo-reference into another."""
    def origin(s):
        parts = dict(p.split("=", 1) for p in s.split() if "=" in p)
        return GeoPoint(float(parts["+lat_0"]), float(parts["+lon_0"]))

    if not src_geo or not dst_geo or src_geo == dst_geo:
        return lines
    o_src, o_dst = origin(src_geo), origin(dst_geo)
    return [SampledLine(ln.road_id, reproject(ln.points, o_src, o_dst), ln.spacing) for ln in lines]


def compare_files(generated, reference, spacing: float = 1.0, align: bool = False) -> CompareStats:
    gen, ref = read_xodr(generated), read_xodr(reference)
    a = reproject_lines(sample_refline(gen, spacing), gen.geo_reference, ref.geo_reference)
    return compare(a, sample_refline(ref, spacing), align)
