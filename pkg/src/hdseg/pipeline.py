"""Per-segment processing and whole-recording orchestration."""

from __future__ import annotations

import csv
import hashlib
import logging
import multiprocessing as mp
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .geo import GeoPoint, pose_from_geo, project_tm_array, segment_to_projected, to_segment_frame
from .ingest import Frame, PipelineConfig, RoadType, load_regulations
from .markings import (ChainSearchParams, MarkingChain, chain_markings, classify_all,
                       cluster_markings, fuse_chains, split_long_clusters)
from .matching import EdgeIndex, Segment, build_segments, key_str, match_frames
from .osm import RoadGraph, max_road_width
from .pointcloud import (DegenerateGeometryError, crop_height, crop_width, filter_reflectivity,
                         fit_ground_plane, remove_radius_outliers)
from .refline import (RefLineError, assign_slots, build_layout, clip_to_edge, project_refline,
                      station_coverage)
from .xodr import (RampPlan, RoadPlan, SegmentPiece, XodrDocument, assemble_document,
                   geo_reference_string, write_flag_report, write_xml)

log = logging.getLogger(__name__)

OK, FLAGGED, FAILED = "ok", "flagged", "failed"


@dataclass
class ChainInfo:
    centers: np.ndarray   # (k, 3) document frame
    cls: str
    slot: int | None


@dataclass
class SegmentResult:
    key: str
    way_id: int
    edge_index: int
    status: str
    reason: str = ""
    threshold: float | None = None
    n_frames: int = 0
    edge_length: float = 0.0
    coverage: float = 0.0
    refline: np.ndarray | None = None    # (n, 3) document frame
    samples: np.ndarray | None = None    # (m, 4) x, y, z, lateral
    chains: list[ChainInfo] = field(default_factory=list)
    lateral_offset: float | None = None
    elapsed: float = 0.0
    timings: dict = field(default_factory=dict)    # stage -> seconds

    @property
    def succeeded(self) -> bool:
        return self.status in (OK, FLAGGED)


@dataclass
class RunResult:
    document: XodrDocument | None
    segments: list[SegmentResult]
    doc_origin: GeoPoint | None
    unmatched_frames: int = 0
    timings: dict = field(default_factory=dict)

    @property
    def success_rate(self) -> float:
        """Share of the processed edge length whose segments produced a reference line."""
        total = sum(s.edge_length for s in self.segments)
        if total <= 0:
            return 0.0
        return sum(s.edge_length for s in self.segments if s.succeeded) / total

    @property
    def exit_code(self) -> int:
        if self.document is None or not self.document.roads:
            return 2
        return 0 if all(s.succeeded for s in self.segments) else 1


def segment_seed(seed: int, key: str) -> int:
    digest = hashlib.sha256(f"{seed}:{key}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


# -- one segment ---------------------------------------------------------------

def _unit(v):
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def _edge_geometry(seg: Segment, graph: RoadGraph, origin: GeoPoint):
    """Edge end points and bisector cut normals in the projection at ``origin``."""
    nodes = graph.way_nodes[seg.way.way_id]
    i = seg.edge.edge_id[1]
    ids = nodes[max(i - 1, 0): i + 3]
    g = [graph.nodes[n] for n in ids]
    xy = dict(zip(ids, project_tm_array([p.lat for p in g], [p.lon for p in g], origin)))
    a, b = xy[seg.edge.node_a], xy[seg.edge.node_b]
    d = _unit(b - a)
    n_a = _unit(d + _unit(a - xy[nodes[i - 1]])) if i > 0 else d
    n_b = _unit(d + _unit(xy[nodes[i + 2]] - b)) if i + 2 < len(nodes) else d
    return a, b, n_a, n_b


def _to_segment_xy(xy, seg: Segment) -> np.ndarray:
    """Projected points (segment projection) into the segment frame, in the plane."""
    op = seg.frame_def.origin_pose
    p = np.column_stack([np.atleast_2d(xy), np.full(len(np.atleast_2d(xy)), op.position[2])])
    return op.apply_inverse(p)[:, :2]


def accumulate(seg: Segment, half_width: float, cfg: PipelineConfig, rng) -> tuple[np.ndarray, np.ndarray]:
    """Ground points of every sweep in the segment frame, plus the ego track."""
    clouds, track = [], []
    origin = seg.frame_def.projection_origin
    for f in seg.frames:
        pose = pose_from_geo(f.pose_geo, f.yaw, f.pitch, f.roll, origin)
        track.append(seg.frame_def.origin_pose.apply_inverse(pose.position[None])[0])
        c = crop_width(crop_height(f.points, 0.0, cfg.height_slack), half_width)
        if len(c) < 3:
            continue
        try:
            _, kept = fit_ground_plane(c, cfg.plane_threshold, cfg.plane_max_iters, seed=rng)
        except DegenerateGeometryError:
            continue
        xyz = to_segment_frame(kept[:, :3], pose, seg.frame_def)
        clouds.append(np.column_stack([xyz, kept[:, 3]]))
    cloud = np.vstack(clouds) if clouds else np.empty((0, 4))
    return cloud, np.array(track).reshape(-1, 3)


def local_heading(track: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Unit ego heading (xy) at the track sample nearest to each point."""
    if len(track) < 2:
        return np.tile([1.0, 0.0], (len(pts), 1))
    i = cKDTree(track[:, :2]).query(pts[:, :2])[1]
    d = track[np.minimum(i + 1, len(track) - 1), :2] - track[np.maximum(i - 1, 0), :2]
    return d / np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-12)


def plausible(clusters, track, cfg: PipelineConfig):
    """Longitudinal markings only: narrow, long enough and roughly along the ego heading."""
    if not clusters:
        return clusters
    heading = local_heading(track, np.array([cl.center for cl in clusters]))
    cos_min = np.cos(np.radians(cfg.max_direction_deviation))
    out = []
    for cl, h in zip(clusters, heading):
        v = cl.direction[:2]
        aligned = abs(v @ h) >= cos_min * np.linalg.norm(v)
        if cl.width <= cfg.max_marking_width and cl.length >= cfg.min_cluster_length and aligned:
            out.append(cl)
    return out


def extract_chains(cloud: np.ndarray, regs, cfg: PipelineConfig, direction, rng, track=None):
    """Adaptive reflectivity loop; returns ``(chains, threshold)`` or ``(None, None)``."""
    if track is None:
        track = np.array([[0.0, 0.0, 0.0], direction])
    chain_params = ChainSearchParams.for_chaining(regs, cfg.chain_step, cfg.chain_max_factor,
                                                  cfg.smoothing_gamma)
    fuse_params = ChainSearchParams.for_fusion(regs, cfg.chain_step, cfg.fuse_max_factor,
                                               cfg.smoothing_gamma)
    for thr in cfg.reflectivity_schedule():
        c = filter_reflectivity(cloud, thr)
        if len(c) < cfg.dbscan_min_pts:
            continue
        c = remove_radius_outliers(c, cfg.outlier_radius, cfg.outlier_min_neighbors)
        clusters = cluster_markings(c, cfg.dbscan_eps, cfg.dbscan_min_pts, direction,
                                    cfg.line_threshold, rng)
        clusters = split_long_clusters(clusters, cfg.split_threshold, cfg.split_part,
                                       cfg.split_min_part, direction, cfg.line_threshold, rng)
        clusters = plausible(clusters, track, cfg)
        if not clusters:
            continue
        chains = chain_markings(clusters, chain_params)
        if not any(len(ch) >= 2 for ch in chains):
            continue
        chains = classify_all(fuse_chains(chains, fuse_params), regs)
        return chains, thr
    return None, None


def _dump(debug_dir, key: str, stage: str, arr: np.ndarray, header: str) -> None:
    if debug_dir is None:
        return
    d = Path(debug_dir)
    d.mkdir(parents=True, exist_ok=True)
    name = key.replace(":", "_")
    np.savetxt(d / f"{name}_{stage}.csv", arr, delimiter=",", header=header, comments="",
               fmt="%.4f")


def process_segment(seg: Segment, graph: RoadGraph, cfg: PipelineConfig, doc_origin: GeoPoint,
                    regulations_path=None, seed: int = 0, debug_dir=None) -> SegmentResult:
    """Cloud accumulation, marking extraction and reference line for one segment.

    With ``debug_dir`` set, the accumulated cloud, the chain centers and the
    clipped reference line are written there as CSV (segment frame).
    """
    t0 = time.perf_counter()
    key = key_str(seg.segment_key)
    res = SegmentResult(key, seg.way.way_id, seg.edge.edge_id[1], FAILED,
                        n_frames=len(seg.frames), edge_length=seg.edge.length)
    rng = np.random.default_rng(segment_seed(seed, key))
    try:
        regs = load_regulations(regulations_path, seg.way.country, seg.way.road_type)
        layout = build_layout(seg.way, regs)
        cloud, track = accumulate(seg, max_road_width(seg.way, regs), cfg, rng)
        res.timings["accumulate"] = time.perf_counter() - t0
        _dump(debug_dir, key, "cloud", cloud, "x,y,z,reflectivity")
        if len(cloud) == 0:
            res.reason = "no ground points"
            return res
        direction = _unit(track[-1] - track[0]) if len(track) > 1 else np.array([1.0, 0.0, 0.0])
        t1 = time.perf_counter()
        chains, thr = extract_chains(cloud, regs, cfg, direction, rng, track)
        res.timings["markings"] = time.perf_counter() - t1
        res.threshold = thr
        if chains is None:
            res.reason = "no marking chains at any reflectivity threshold"
            return res
        try:
            slots = assign_slots(chains, layout, cloud, direction)
            poly = project_refline(chains, slots, layout, direction, cfg.dedup_radius)
        except RefLineError as exc:
            res.reason = str(exc)
            res.chains = _chain_info(chains, {}, seg, doc_origin)
            return res
        res.chains = _chain_info(chains, slots, seg, doc_origin)
        if debug_dir is not None:
            rows = [(i, *c) for i, ch in enumerate(chains) for c in ch.centers]
            _dump(debug_dir, key, "chains", np.array(rows).reshape(-1, 4), "chain,x,y,z")

        a, b, n_a, n_b = _edge_geometry(seg, graph, seg.frame_def.projection_origin)
        sa, sb = _to_segment_xy(a, seg)[0], _to_segment_xy(b, seg)[0]
        rot = seg.frame_def.origin_pose.rotation[:2, :2]
        na, nb = n_a @ rot, n_b @ rot       # plane normals into the segment frame
        poly = clip_to_edge(poly, sa, na, sb, nb)
        res.coverage = station_coverage(poly, sa, sb)
        _dump(debug_dir, key, "refline", poly.points, "x,y,z")
        if res.coverage < cfg.min_edge_coverage or len(poly) < 4:
            res.reason = f"edge coverage {res.coverage:.2f} below {cfg.min_edge_coverage:.2f}"
            return res
        res.refline = segment_to_projected(poly.points, seg.frame_def, doc_origin)
        if len(poly.samples):
            xyz = segment_to_projected(poly.samples[:, :3], seg.frame_def, doc_origin)
            res.samples = np.column_stack([xyz, poly.samples[:, 3]])
        res.status = OK
        return res
    except DegenerateGeometryError as exc:
        res.reason = f"degenerate geometry: {exc}"
        return res
    finally:
        res.elapsed = time.perf_counter() - t0
        if "markings" in res.timings:
            res.timings["refline"] = res.elapsed - sum(res.timings.values())


def _chain_info(chains: list[MarkingChain], slots: dict, seg: Segment, origin: GeoPoint):
    return [ChainInfo(segment_to_projected(ch.centers, seg.frame_def, origin), ch.cls.value,
                      slots.get(i)) for i, ch in enumerate(chains)]


# -- orchestration -------------------------------------------------------------

_JOB: dict = {}


def _run_one(i: int) -> SegmentResult:
    j = _JOB
    return process_segment(j["segments"][i], j["graph"], j["cfg"], j["origin"], j["regs"],
                           j["cfg"].seed, j["debug"])


def _first_visits(segments: list[Segment]) -> list[Segment]:
    """Earliest visit of every edge."""
    best: dict = {}
    for s in segments:
        edge_id, _ = s.segment_key
        if edge_id not in best or s.t_start < best[edge_id].t_start:
            best[edge_id] = s
    return [best[k] for k in sorted(best)]


def _plans(results: list[SegmentResult], graph: RoadGraph, origin: GeoPoint, regs_path):
    by_edge = {(r.way_id, r.edge_index): r for r in results}
    main_ways = sorted({r.way_id for r in results
                        if graph.ways[r.way_id].road_type is not RoadType.ENTRY_EXIT})
    ids = sorted(graph.nodes)
    xy = dict(zip(ids, project_tm_array([graph.nodes[n].lat for n in ids],
                                        [graph.nodes[n].lon for n in ids], origin)))
    plans = {}
    for w in main_ways:
        info = graph.ways[w]
        regs = load_regulations(regs_path, info.country, info.road_type)
        pieces = []
        for e in graph.way_edges(w):
            r = by_edge.get(e.edge_id)
            ok = r is not None and r.succeeded and r.refline is not None
            pieces.append(SegmentPiece(r.key if r else f"{w}:{e.edge_id[1]}:-",
                                       xy[e.node_a], xy[e.node_b],
                                       r.refline if ok else None, r.samples if ok else None))
        plans[w] = RoadPlan(w, info.lane_count, regs.lane_width,
                            regs.shoulder_width if info.has_shoulder else None, pieces)
    successors = {w: [s for s in graph.successors(w) if s in plans] for w in plans}
    # chains of ways from their heads, lowest way id first
    has_pred = {s for v in successors.values() for s in v}
    order, seen = [], set()
    for head in [w for w in sorted(plans) if w not in has_pred] + sorted(plans):
        w = head
        while w is not None and w not in seen:
            seen.add(w)
            order.append(plans[w])
            w = successors[w][0] if successors[w] else None
    ramps = []
    for w in plans:
        for r in graph.ramps_touching(w):
            rn = graph.way_nodes[r]
            nodes = graph.way_nodes[w]
            if rn[0] in nodes:
                ramps.append(RampPlan(r, w, xy[rn[0]], True))
            elif rn[-1] in nodes:
                ramps.append(RampPlan(r, w, xy[rn[-1]], False))
    return order, successors, ramps


def run_pipeline(frames: list[Frame], graph: RoadGraph, cfg: PipelineConfig,
                 regulations_path=None, name: str = "hdseg", debug_dir=None) -> RunResult:
    """Match, process every segment in a worker pool and assemble one document."""
    t0 = time.perf_counter()
    index = EdgeIndex(graph, frames[0].pose_geo if frames else GeoPoint(0.0, 0.0))
    matched = match_frames(frames, index, cfg.matching_max_dist, cfg.flicker_margin)
    segments, unmatched = build_segments(matched, graph, cfg.revisit_window)
    segments = _first_visits(segments)
    timings = {"matching": time.perf_counter() - t0}
    if not segments:
        return RunResult(None, [], None, len(unmatched), timings)
    first = min(segments, key=lambda s: s.t_start)
    origin = first.frame_def.projection_origin

    t1 = time.perf_counter()
    _JOB.update(segments=segments, graph=graph, cfg=cfg, origin=origin, regs=regulations_path,
                debug=debug_dir)
    try:
        if cfg.workers > 1 and len(segments) > 1:
            with ProcessPoolExecutor(cfg.workers, mp_context=mp.get_context("fork")) as ex:
                results = list(ex.map(_run_one, range(len(segments))))
        else:
            results = [_run_one(i) for i in range(len(segments))]
    finally:
        _JOB.clear()
    results.sort(key=lambda r: (r.way_id, r.edge_index))
    timings["segments"] = time.perf_counter() - t1
    t2 = time.perf_counter()

    order, successors, ramps = _plans(results, graph, origin, regulations_path)
    doc, flags, _ = assemble_document(
        order, successors, geo_reference_string(origin.lat, origin.lon), ramps, name=name,
        taper_length=cfg.taper_length, ramp_length=cfg.ramp_length,
        ramp_curvature=cfg.ramp_end_curvature, ramp_lane_width=cfg.ramp_lane_width,
        endpoint_weight=cfg.endpoint_weight, flag_threshold=cfg.continuity_flag_threshold)
    by_key = {r.key: r for r in results}
    for key, off in flags:
        r = by_key.get(key)
        if r is not None and r.status == OK:
            r.status = FLAGGED
            r.reason = "lateral offset to successor above threshold"
            r.lateral_offset = off
    if not doc.roads:
        doc = None
    timings["export"] = time.perf_counter() - t2
    return RunResult(doc, results, origin, len(unmatched), timings)


REPORT_COLUMNS = ["segment_key", "way_id", "status", "reason", "threshold", "frames",
                  "edge_length", "coverage", "lateral_offset", "accumulate_s", "markings_s",
                  "refline_s", "elapsed_s"]


def write_run_report(result: RunResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in result.segments:
            w.writerow([r.key, r.way_id, r.status, r.reason,
                        "" if r.threshold is None else f"{r.threshold:.2f}", r.n_frames,
                        f"{r.edge_length:.3f}", f"{r.coverage:.3f}",
                        "" if r.lateral_offset is None else f"{r.lateral_offset:.3f}",
                        *(f"{r.timings[k]:.3f}" if k in r.timings else ""
                          for k in ("accumulate", "markings", "refline")),
                        f"{r.elapsed:.3f}"])


def write_outputs(result: RunResult, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"report": out / "run_report.csv", "flags": out / "flag_report.csv"}
    write_run_report(result, paths["report"])
    write_flag_report([(r.key, r.reason, r.lateral_offset) for r in result.segments
                       if r.status != OK], paths["flags"])
    if result.document is not None:
        paths["xodr"] = out / "map.xodr"
        write_xml(result.document, paths["xodr"])
    return paths
