"""Reference-line estimation from classified marking chains.

Lateral convention: slot offsets are measured to the right of the reference
line (the reference sits in the middle of the leftmost lane, so the left
road boundary has offset ``-w/2``).  Chain lateral positions are measured to
the left of the segment origin.  A chain at lateral ``L`` in a slot with
offset ``o`` therefore places the reference line at lateral ``L + o``, which
is how every assignment rule below is checked for consistency.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .ingest import RegulationProfile
from .markings import MarkingChain, MarkingClass
from .osm import WayInfo

log = logging.getLogger(__name__)

DEDUP_RADIUS = 0.25
BOUNDARY_PERCENTILE = 95.0
_EXTEND = 1.0e4
_MAX_EXTENT_POINTS = 20000


class RefLineError(RuntimeError):
    """A segment produced no usable reference line."""


@dataclass(frozen=True)
class LaneLayout:
    offsets: np.ndarray          # per slot, left -> right, metres right of the reference
    classes: tuple[MarkingClass, ...]
    lane_width: float
    lane_count: int
    rule: str = "middle_of_left_lane"

    @property
    def n_slots(self) -> int:
        return len(self.offsets)

    def slots_of(self, cls: MarkingClass) -> list[int]:
        return [k for k, c in enumerate(self.classes) if c is cls]


def build_layout(way: WayInfo, regs: RegulationProfile) -> LaneLayout:
    n, w = way.lane_count, regs.lane_width
    if n < 1:
        raise ValueError("lane_count must be >= 1")
    offsets = [-w / 2 + k * w for k in range(n + 1)]
    classes = [MarkingClass.SOLID] + [MarkingClass.DASHED] * (n - 1) + [MarkingClass.SOLID]
    if way.has_shoulder:
        offsets.append(offsets[-1] + regs.shoulder_width)
        classes.append(MarkingClass.SOLID)
    return LaneLayout(np.array(offsets), tuple(classes), w, n, regs.reference_line_rule)


# -- lateral geometry ----------------------------------------------------------

@dataclass
class _Guide:
    """Polyline (xy) the lateral position of every chain is measured against."""

    xy: np.ndarray

    def __post_init__(self):
        xy = self.xy
        if len(xy) == 1:
            raise ValueError("guide needs a direction")
        d0 = xy[1] - xy[0]
        d1 = xy[-1] - xy[-2]
        ext = np.vstack([xy[0] - _EXTEND * d0 / np.linalg.norm(d0), xy,
                         xy[-1] + _EXTEND * d1 / np.linalg.norm(d1)])
        self.ext = ext
        seg = np.diff(ext, axis=0)
        self.seg = seg
        self.seg_len = np.linalg.norm(seg, axis=1)
        self.cum = np.concatenate([[0.0], np.cumsum(self.seg_len)]) - _EXTEND

    def locate(self, pts) -> tuple[np.ndarray, np.ndarray]:
        """Station along the guide and signed offset (left positive)."""
        p = np.atleast_2d(np.asarray(pts, dtype=float))[:, :2]
        a = self.ext[:-1]
        rel = p[:, None, :] - a[None]
        t = np.clip(np.einsum("nij,ij->ni", rel, self.seg) / self.seg_len**2, 0.0, 1.0)
        foot = a[None] + t[..., None] * self.seg[None]
        d2 = ((p[:, None, :] - foot) ** 2).sum(-1)
        k = np.argmin(d2, axis=1)
        rows = np.arange(len(p))
        r = rel[rows, k]
        s = self.seg[k]
        cross = s[:, 0] * r[:, 1] - s[:, 1] * r[:, 0]
        dist = np.sqrt(d2[rows, k]) * np.where(cross >= 0, 1.0, -1.0)
        station = self.cum[k] + t[rows, k] * self.seg_len[k]
        return station, dist

    def direction_at(self, pt) -> np.ndarray:
        """Unit xy direction of the guide segment nearest to pt."""
        st, _ = self.locate(pt)
        k = int(np.clip(np.searchsorted(self.cum, st[0]) - 1, 0, len(self.seg) - 1))
        return self.seg[k] / self.seg_len[k]


def _guide_for(chains: list[MarkingChain], driving_direction) -> _Guide:
    best = max(chains, key=lambda ch: (len(ch), -ch.clusters[0].origin_distance))
    xy = best.centers[:, :2]
    if len(xy) == 1:
        v = best.clusters[0].direction[:2]
        xy = np.vstack([xy[0], xy[0] + v / np.linalg.norm(v)])
    if driving_direction is not None and (xy[-1] - xy[0]) @ np.asarray(driving_direction)[:2] < 0:
        xy = xy[::-1]
    return _Guide(xy)


def chain_laterals(chains: list[MarkingChain], driving_direction=None) -> tuple[np.ndarray, _Guide, float]:
    """Lateral position of each chain (left of origin positive) plus the guide used."""
    guide = _guide_for(chains, driving_direction)
    _, o = guide.locate(np.zeros((1, 2)))
    guide_lat = -float(o[0])
    lat = np.array([guide_lat + guide.locate(ch.centers)[1].mean() for ch in chains])
    return lat, guide, guide_lat


def boundary_extent(cloud: np.ndarray | None, guide: _Guide, guide_lat: float,
                    percentile: float = BOUNDARY_PERCENTILE) -> tuple[float, float] | None:
    """Left and right road-boundary proxies (lateral, left positive) from the cropped cloud."""
    if cloud is None or len(cloud) < 10:
        return None
    pts = cloud
    if len(pts) > _MAX_EXTENT_POINTS:
        pts = pts[np.linspace(0, len(pts) - 1, _MAX_EXTENT_POINTS).astype(int)]
    lat = guide_lat + guide.locate(pts)[1]
    return float(np.percentile(lat, percentile)), float(np.percentile(lat, 100.0 - percentile))


# -- slot assignment -----------------------------------------------------------

def _compatible(chain_cls: MarkingClass, slot_cls: MarkingClass) -> bool:
    return chain_cls is MarkingClass.UNKNOWN or chain_cls is slot_cls


def _boundary_slot(lat: float, cls: MarkingClass, layout: LaneLayout, bounds, tol: float):
    """Rightmost compatible slot whose room to both road edges is at least the observed extent."""
    left_edge, right_edge = bounds
    off = layout.offsets
    need_right = lat - right_edge - tol
    need_left = left_edge - lat - tol
    feasible = [k for k in range(layout.n_slots)
                if _compatible(cls, layout.classes[k])
                and off[-1] - off[k] >= need_right and off[k] - off[0] >= need_left]
    return feasible[-1] if feasible else None


def assign_slots(chains: list[MarkingChain], layout: LaneLayout, cropped_cloud=None,
                 driving_direction=None, laterals=None) -> dict[int, int]:
    """Map chain index -> slot index.  Raises RefLineError if nothing fits."""
    if not chains:
        raise RefLineError("no marking chains")
    if laterals is None:
        lat, guide, guide_lat = chain_laterals(chains, driving_direction)
    else:
        lat, guide, guide_lat = np.asarray(laterals, float), None, 0.0
    tol = layout.lane_width / 4.0
    weight = np.array([len(ch) for ch in chains], dtype=float)
    off = layout.offsets
    solid_slots = layout.slots_of(MarkingClass.SOLID)
    dashed_slots = layout.slots_of(MarkingClass.DASHED)

    ref = None  # lateral of the reference line
    # (1) solid chains by side of the origin
    solids = [i for i, ch in enumerate(chains) if ch.cls is MarkingClass.SOLID]
    if solids:
        left = [i for i in solids if lat[i] > 0]
        right = [i for i in solids if lat[i] <= 0]
        est = []
        if left:
            est += [(lat[i] + off[solid_slots[0]], weight[i]) for i in left]
        anchor = np.average([e for e, _ in est], weights=[w for _, w in est]) if est else None
        right_candidates = [k for k in solid_slots if k != solid_slots[0]] or solid_slots
        for i in right:
            if anchor is not None:
                k = min(right_candidates, key=lambda k: abs(lat[i] + off[k] - anchor))
                if abs(lat[i] + off[k] - anchor) > tol:
                    continue
            else:
                k = right_candidates[-1]
            est.append((lat[i] + off[k], weight[i]))
        ref = float(np.average([e for e, _ in est], weights=[w for _, w in est]))
    # (2) dashed chains in order when the counts agree
    if ref is None:
        dashed = sorted((i for i, ch in enumerate(chains) if ch.cls is MarkingClass.DASHED),
                        key=lambda i: -lat[i])
        if dashed and len(dashed) == len(dashed_slots):
            ref = float(np.average([lat[i] + off[k] for i, k in zip(dashed, dashed_slots)],
                                   weights=weight[dashed]))
    # (3) distance to the road boundary
    if ref is None and guide is not None:
        bounds = boundary_extent(cropped_cloud, guide, guide_lat)
        if bounds is not None:
            est = []
            for i, ch in enumerate(chains):
                k = _boundary_slot(lat[i], ch.cls, layout, bounds, tol)
                if k is not None:
                    est.append((lat[i] + off[k], weight[i]))
            if est:
                vals = np.array([e for e, _ in est])
                w = np.array([x for _, x in est])
                order = np.argsort(vals)
                cw = np.cumsum(w[order])
                ref = float(vals[order][np.searchsorted(cw, cw[-1] / 2.0)])
    if ref is None:
        raise RefLineError("no chain could be placed in the lane layout")

    # (4) every chain goes to the nearest compatible slot consistent with ref
    out: dict[int, int] = {}
    for i, ch in enumerate(chains):
        want = ref - lat[i]
        cand = [k for k in range(layout.n_slots) if _compatible(ch.cls, layout.classes[k])]
        if not cand:
            continue
        k = min(cand, key=lambda k: abs(off[k] - want))
        if abs(off[k] - want) <= tol:
            out[i] = k
        else:
            log.debug("chain %d (lateral %.2f, %s) fits no slot", i, lat[i], ch.cls.value)
    if not out:
        raise RefLineError("no chain fits the lane layout")
    return out


# -- projection ----------------------------------------------------------------

@dataclass
class RefPolyline:
    points: np.ndarray                  # (n, 3)
    chain_ids: np.ndarray               # (n,)
    # every projected sample before deduplication, for elevation fitting:
    # x, y of the reference point, z of the marking, lateral of the marking (left positive)
    samples: np.ndarray = field(default_factory=lambda: np.empty((0, 4)))

    @property
    def s(self) -> np.ndarray:
        if len(self.points) == 0:
            return np.empty(0)
        return np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(self.points[:, :2], axis=0), axis=1))])

    def __len__(self) -> int:
        return len(self.points)


def _left_normal(v) -> np.ndarray:
    n = np.array([-v[1], v[0], 0.0])
    return n / np.linalg.norm(n)


def _dedup(pts: np.ndarray, ids: np.ndarray, radius: float):
    out_p, out_i = [], []
    i = 0
    while i < len(pts):
        j = i + 1
        while j < len(pts) and np.linalg.norm(pts[j, :2] - pts[i, :2]) < radius:
            j += 1
        out_p.append(pts[i:j].mean(axis=0))
        out_i.append(ids[i:j].min())
        i = j
    return np.array(out_p).reshape(-1, 3), np.array(out_i, dtype=int)


def _outlier_guard(pts: np.ndarray, ids: np.ndarray, limit: float):
    keep = np.ones(len(pts), dtype=bool)
    changed = True
    while changed and keep.sum() >= 3:
        changed = False
        idx = np.flatnonzero(keep)
        p = pts[idx, :2]
        a, m, b = p[:-2], p[1:-1], p[2:]
        ab = b - a
        nrm = np.linalg.norm(ab, axis=1)
        dev = np.abs(ab[:, 0] * (m - a)[:, 1] - ab[:, 1] * (m - a)[:, 0]) / np.maximum(nrm, 1e-12)
        if dev.size and dev.max() > limit:
            keep[idx[1 + int(np.argmax(dev))]] = False
            changed = True
    return pts[keep], ids[keep]


def project_refline(chains: list[MarkingChain], slots: dict[int, int], layout: LaneLayout,
                    driving_direction=None, dedup_radius: float = DEDUP_RADIUS) -> RefPolyline:
    """Shift every assigned cluster center along its left normal onto the reference line."""
    if not slots:
        raise RefLineError("no assigned chains")
    assigned = [chains[i] for i in sorted(slots)]
    guide = _guide_for(assigned, driving_direction)
    pts, ids, samples = [], [], []
    for i in sorted(slots):
        ch = chains[i]
        o = layout.offsets[slots[i]]
        for cl, v in zip(ch.clusters, ch.directions):
            if len(ch.clusters) < 2 and len(guide.xy) > 1:
                # a lone fragment's own axis is too noisy to shift along
                g = guide.direction_at(cl.center)
                v = np.array([g[0], g[1], 0.0]) * (1.0 if g @ v[:2] >= 0 else -1.0)
            n = _left_normal(v)
            p = cl.center + n * o
            pts.append(p)
            ids.append(i)
            samples.append((p[0], p[1], cl.center[2], -o))
    pts = np.array(pts)
    ids = np.array(ids)
    samples = np.array(samples)

    station, _ = guide.locate(pts)
    order = np.lexsort((ids, pts[:, 1], pts[:, 0], station))
    pts, ids, samples = pts[order], ids[order], samples[order]
    pts, ids = _dedup(pts, ids, dedup_radius)
    pts, ids = _outlier_guard(pts, ids, layout.lane_width)
    return RefPolyline(pts, ids, samples)


def clip_to_edge(poly: RefPolyline, start_xy, start_normal, end_xy, end_normal) -> RefPolyline:
    """Keep points between the start cut plane (inclusive) and the end cut plane."""
    if len(poly) == 0:
        return poly

    def inside(p):
        p = np.atleast_2d(p)[:, :2]
        return ((p - start_xy) @ start_normal >= 0) & ((p - end_xy) @ end_normal < 0)

    k = inside(poly.points)
    ks = inside(poly.samples) if len(poly.samples) else np.zeros(0, dtype=bool)
    return RefPolyline(poly.points[k], poly.chain_ids[k], poly.samples[ks])


def station_coverage(poly: RefPolyline, start_xy, end_xy) -> float:
    """Fraction of the edge chord spanned by the polyline's projection onto it."""
    d = np.asarray(end_xy, float) - np.asarray(start_xy, float)
    L = np.linalg.norm(d)
    if len(poly) < 2 or L <= 0:
        return 0.0
    t = (poly.points[:, :2] - start_xy) @ (d / L)
    return float(np.clip((t.max() - t.min()) / L, 0.0, 1.0))
