"""Per-timestep map matching and segment building.

Each GNSS position is matched on its own to the closest OSM edge (no HMM,
no memory between timesteps).  Runs of the same edge become visits and
visits of one edge that lie close together in time are merged.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from itertools import groupby

import numpy as np

from .geo import GeoPoint, SegmentFrameDef, project_tm_array, segment_frame_for
from .ingest import Frame
from .osm import Edge, RoadGraph, WayInfo

TIE_EPS = 1e-9


@dataclass
class EdgeIndex:
    """Edges of a graph as 2-D line segments in one projection."""

    graph: RoadGraph
    origin: GeoPoint

    def __post_init__(self):
        self.edges = sorted(self.graph.edges, key=lambda e: e.edge_id)
        ids = sorted(self.graph.nodes)
        lat = [self.graph.nodes[n].lat for n in ids]
        lon = [self.graph.nodes[n].lon for n in ids]
        xy = project_tm_array(lat, lon, self.origin) if ids else np.empty((0, 2))
        self.node_xy = dict(zip(ids, xy))
        self.a = np.array([self.node_xy[e.node_a] for e in self.edges]).reshape(-1, 2)
        self.b = np.array([self.node_xy[e.node_b] for e in self.edges]).reshape(-1, 2)

    def distances(self, pos) -> np.ndarray:
        """Perpendicular distance from each of ``(n, 2)`` positions to every edge."""
        p = np.atleast_2d(np.asarray(pos, dtype=float))[:, None, :]
        ab = self.b - self.a
        denom = np.maximum(np.einsum("ij,ij->i", ab, ab), 1e-18)
        t = np.clip(np.einsum("nij,ij->ni", p - self.a, ab) / denom, 0.0, 1.0)
        foot = self.a + t[..., None] * ab
        return np.linalg.norm(p - foot, axis=-1)


@dataclass
class Segment:
    segment_key: tuple  # ((way_id, index), visit_index)
    edge: Edge
    way: WayInfo
    frames: list[Frame]
    frame_def: SegmentFrameDef

    @property
    def t_start(self) -> float:
        return self.frames[0].t

    @property
    def t_end(self) -> float:
        return self.frames[-1].t


def match_timestep(pos, index: EdgeIndex, max_dist: float):
    """Closest edge to one projected position; ``(edge_id, distance)``.

    ``edge_id`` is ``None`` when nothing lies within ``max_dist``.  Distances
    equal within 1e-9 resolve to the lower ``(way_id, index)``.
    """
    if not index.edges:
        return None, float("inf")
    d = index.distances(pos)[0]
    best = d.min()
    if best > max_dist:
        return None, float(best)
    k = int(np.flatnonzero(d <= best + TIE_EPS)[0])
    return index.edges[k].edge_id, float(d[k])


def match_frames(frames: list[Frame], index: EdgeIndex, max_dist: float,
                 flicker_margin: float = 1.0) -> list[tuple[Frame, tuple | None]]:
    """Match every frame, then undo isolated one-frame flickers."""
    if not frames:
        return []
    if not index.edges:
        return [(f, None) for f in frames]
    pos = project_tm_array([f.pose_geo.lat for f in frames], [f.pose_geo.lon for f in frames],
                           index.origin)
    d = index.distances(pos)
    best = d.min(axis=1)
    labels: list[int | None] = []
    for i in range(len(frames)):
        if best[i] > max_dist:
            labels.append(None)
        else:
            labels.append(int(np.flatnonzero(d[i] <= best[i] + TIE_EPS)[0]))
    for i in range(1, len(frames) - 1):
        a, b, c = labels[i - 1], labels[i], labels[i + 1]
        if a is not None and a == c and b is not None and b != a:
            if d[i, a] - d[i, b] < flicker_margin:
                labels[i] = a
    return [(f, None if k is None else index.edges[k].edge_id) for f, k in zip(frames, labels)]


def build_segments(matched, graph: RoadGraph, window_hours: float):
    """Group matched frames into segments; returns ``(segments, unmatched_frames)``."""
    window = window_hours * 3600.0
    unmatched: list[Frame] = []
    visits: dict[tuple, list[list[Frame]]] = {}
    for edge_id, run in groupby(matched, key=lambda m: m[1]):
        frames = [m[0] for m in run]
        if edge_id is None:
            unmatched.extend(frames)
        else:
            visits.setdefault(tuple(edge_id), []).append(frames)

    segments: list[Segment] = []
    for edge_id in sorted(visits):
        edge = graph.edge(edge_id)
        way = graph.ways[edge.way_id]
        groups: list[list[Frame]] = []
        for frames in sorted(visits[edge_id], key=lambda fs: fs[0].t):
            if groups and frames[0].t - groups[-1][-1].t < window:
                groups[-1].extend(frames)
            else:
                groups.append(list(frames))
        for visit_index, frames in enumerate(groups):
            frames.sort(key=lambda f: f.t)
            f0 = frames[0]
            segments.append(Segment((edge_id, visit_index), edge, way, frames,
                                    segment_frame_for(f0.pose_geo, f0.yaw, f0.pitch, f0.roll)))
    return segments, unmatched


def write_manifest(segments: list[Segment], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["segment_key", "way_id", "frames", "t_start", "t_end"])
        for s in segments:
            (way_id, idx), visit = s.segment_key
            w.writerow([f"{way_id}:{idx}:{visit}", way_id, len(s.frames),
                        f"{s.t_start:.6f}", f"{s.t_end:.6f}"])


def key_str(segment_key) -> str:
    (way_id, idx), visit = segment_key
    return f"{way_id}:{idx}:{visit}"
