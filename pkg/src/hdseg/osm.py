"""OpenStreetMap extract -> road graph with the minimal attribute set.

Only drivable ways survive parsing and only five facts are kept per way:
country, road type, lane count, shoulder presence and ramp connection.
Every other tag is dropped here on purpose.
"""

from __future__ import annotations

import logging
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path

from geographiclib.geodesic import Geodesic

from .geo import GeoPoint
from .ingest import RegulationProfile, RoadType

log = logging.getLogger(__name__)

WIDTH_MARGIN = 1.0

_HIGHWAY_CLASSES = {"motorway": RoadType.HIGHWAY, "trunk": RoadType.HIGHWAY}
_LINK_CLASSES = {"motorway_link", "trunk_link", "primary_link", "secondary_link"}
_OTHER_CLASSES = {"primary", "secondary", "tertiary", "unclassified", "residential"}
_DEFAULT_LANES = {RoadType.HIGHWAY: 2, RoadType.ENTRY_EXIT: 1, RoadType.OTHER: 2}


class OSMParseError(ValueError):
    pass


class GraphConsistencyError(ValueError):
    pass


@dataclass(frozen=True)
class WayInfo:
    way_id: int
    road_type: RoadType
    lane_count: int
    has_shoulder: bool
    connects_ramp: bool
    country: str


@dataclass(frozen=True)
class Edge:
    edge_id: tuple[int, int]  # (way_id, index within way)
    way_id: int
    node_a: int
    node_b: int
    length: float


@dataclass
class RoadGraph:
    nodes: dict[int, GeoPoint] = field(default_factory=dict)
    ways: dict[int, WayInfo] = field(default_factory=dict)
    edges: list[Edge] = field(default_factory=list)
    way_nodes: dict[int, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        self._by_id = {e.edge_id: e for e in self.edges}

    def edge(self, edge_id) -> Edge:
        return self._by_id[tuple(edge_id)]

    def way_edges(self, way_id: int) -> list[Edge]:
        return [e for e in self.edges if e.way_id == way_id]

    def successors(self, way_id: int) -> list[int]:
        """Ways whose first node is this way's last node."""
        last = self.way_nodes[way_id][-1]
        return sorted(w for w, nodes in self.way_nodes.items() if w != way_id and nodes[0] == last)

    def predecessors(self, way_id: int) -> list[int]:
        first = self.way_nodes[way_id][0]
        return sorted(w for w, nodes in self.way_nodes.items() if w != way_id and nodes[-1] == first)

    def ramps_touching(self, way_id: int) -> list[int]:
        """Entry/exit ways that share any node with a main way."""
        mine = set(self.way_nodes[way_id])
        return sorted(
            w for w, info in self.ways.items()
            if w != way_id and info.road_type is RoadType.ENTRY_EXIT
            and (self.way_nodes[w][0] in mine or self.way_nodes[w][-1] in mine)
        )


def geodesic_length(a: GeoPoint, b: GeoPoint) -> float:
    return Geodesic.WGS84.Inverse(a.lat, a.lon, b.lat, b.lon)["s12"]


def _road_type(tags: dict) -> RoadType | None:
    hw = tags.get("highway")
    if hw in _HIGHWAY_CLASSES:
        return _HIGHWAY_CLASSES[hw]
    if hw in _LINK_CLASSES:
        return RoadType.ENTRY_EXIT
    if hw in _OTHER_CLASSES:
        return RoadType.OTHER
    return None


def _lanes(way_id: int, tags: dict, road_type: RoadType, strict: bool) -> int:
    raw = tags.get("lanes")
    if raw is None:
        if strict and road_type is RoadType.HIGHWAY:
            raise OSMParseError(f"way {way_id}: motorway without lanes tag (strict mode)")
        return _DEFAULT_LANES[road_type]
    try:
        n = int(str(raw).split(";")[0])
    except ValueError as exc:
        raise OSMParseError(f"way {way_id}: bad lanes tag {raw!r}") from exc
    if n < 1:
        raise OSMParseError(f"way {way_id}: lanes must be >= 1")
    return n


def parse_extract(xml_path, country_default: str = "DE", strict: bool = False) -> RoadGraph:
    try:
        root = ET.parse(Path(xml_path)).getroot()
    except ET.ParseError as exc:
        raise OSMParseError(f"{xml_path}: {exc}") from exc

    nodes: dict[int, GeoPoint] = {}
    for el in root.iter("node"):
        nodes[int(el.get("id"))] = GeoPoint(float(el.get("lat")), float(el.get("lon")))

    raw_ways = []
    for el in root.iter("way"):
        way_id = int(el.get("id"))
        tags = {t.get("k"): t.get("v") for t in el.findall("tag")}
        rt = _road_type(tags)
        if rt is None:
            continue
        refs = [int(nd.get("ref")) for nd in el.findall("nd")]
        for ref in refs:
            if ref not in nodes:
                raise GraphConsistencyError(f"way {way_id} references missing node {ref}")
        # collapse repeated consecutive refs
        seq = [r for i, r in enumerate(refs) if i == 0 or r != refs[i - 1]]
        if len(seq) < 2:
            log.warning("way %d has fewer than two distinct nodes; skipped", way_id)
            continue
        shoulder = tags.get("shoulder", "no").lower() not in ("no", "none", "false")
        raw_ways.append((way_id, rt, _lanes(way_id, tags, rt, strict), shoulder, seq))

    raw_ways.sort(key=lambda w: w[0])
    way_nodes = {w[0]: w[4] for w in raw_ways}
    ramp_ends = set()
    for way_id, rt, *_rest, seq in raw_ways:
        if rt is RoadType.ENTRY_EXIT:
            ramp_ends.update((seq[0], seq[-1]))

    ways: dict[int, WayInfo] = {}
    edges: list[Edge] = []
    for way_id, rt, lanes, shoulder, seq in raw_ways:
        connects = rt is not RoadType.ENTRY_EXIT and any(n in ramp_ends for n in seq)
        ways[way_id] = WayInfo(way_id, rt, lanes, shoulder, connects, country_default)
        idx = 0
        for a, b in zip(seq[:-1], seq[1:]):
            length = geodesic_length(nodes[a], nodes[b])
            if length <= 0:
                log.warning("way %d: zero-length edge %d-%d skipped", way_id, a, b)
                continue
            edges.append(Edge((way_id, idx), way_id, a, b, length))
            idx += 1

    used = {n for seq in way_nodes.values() for n in seq}
    return RoadGraph({k: v for k, v in nodes.items() if k in used}, ways, edges, way_nodes)


def max_road_width(w: WayInfo, regs: RegulationProfile) -> float:
    """Upper bound on the carriageway width, used symmetrically around the ego."""
    width = w.lane_count * regs.lane_width + WIDTH_MARGIN
    if w.has_shoulder:
        width += regs.shoulder_width
    return width


def write_extract(graph_nodes: dict[int, GeoPoint], ways: list[tuple[int, list[int], dict]], path) -> None:
    """Write a minimal OSM XML file (used by the synthetic scene generator)."""
    root = ET.Element("osm", version="0.6", generator="hdseg")
    for nid in sorted(graph_nodes):
        g = graph_nodes[nid]
        ET.SubElement(root, "node", id=str(nid), lat=f"{g.lat:.10f}", lon=f"{g.lon:.10f}")
    for way_id, refs, tags in ways:
        el = ET.SubElement(root, "way", id=str(way_id))
        for r in refs:
            ET.SubElement(el, "nd", ref=str(r))
        for k in sorted(tags):
            ET.SubElement(el, "tag", k=k, v=str(tags[k]))
    ET.indent(root)
    ET.ElementTree(root).write(path, encoding="utf-8", xml_declaration=True)
