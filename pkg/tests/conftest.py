from __future__ import annotations

import numpy as np
import pytest

from hdseg.geo import GeoPoint, unproject_tm_array
from hdseg.ingest import Frame, RoadType, load_regulations
from hdseg.osm import parse_extract, write_extract

ORIGIN = GeoPoint(48.7, 9.0)


def graph_from_xy(tmp_path, ways, node_xy, origin=ORIGIN, name="map.osm", **kw):
    """Build an OSM file from projected node positions and parse it back."""
    ids = sorted(node_xy)
    lat, lon = unproject_tm_array([node_xy[i][0] for i in ids], [node_xy[i][1] for i in ids], origin)
    nodes = {i: GeoPoint(float(a), float(b)) for i, a, b in zip(ids, lat, lon)}
    path = tmp_path / name
    write_extract(nodes, ways, path)
    return parse_extract(path, **kw)


def frame_at(fid, t, x, y, origin=ORIGIN, yaw=0.0, points=None):
    lat, lon = unproject_tm_array([x], [y], origin)
    pts = np.zeros((0, 4)) if points is None else points
    return Frame(fid, t, pts, GeoPoint(float(lat[0]), float(lon[0])), yaw, 0.0, 0.0)


@pytest.fixture(scope="session")
def highway_regs():
    return load_regulations(None, "DE", RoadType.HIGHWAY)


@pytest.fixture(scope="session")
def straight_scene(tmp_path_factory):
    """A 300 m three-lane straight written to disk, as the CLI reads it."""
    from hdseg.synth import SceneSpec, generate_scene

    out = tmp_path_factory.mktemp("straight")
    return generate_scene(SceneSpec("straight", course=[["line", 300.0]], ego_lane=1, seed=3), out)


@pytest.fixture(scope="session")
def straight_run(straight_scene):
    from hdseg.ingest import load_config
    from hdseg.pipeline import run_pipeline

    graph = parse_extract(straight_scene.paths["osm"])
    return run_pipeline(straight_scene.frames, graph, load_config())


# -- acceptance verdicts -------------------------------------------------------

ACCEPTANCE_CRITERIA = range(1, 10)
_verdicts: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Record and assert one acceptance criterion."""
    def record(n: int, ok: bool, detail: str) -> None:
        _verdicts[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(_verdicts[n])
        assert ok, _verdicts[n]
    return record


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for n in ACCEPTANCE_CRITERIA:
        terminalreporter.write_line(_verdicts.get(n, f"criterion {n}: FAIL  no verdict (not run or errored)"))
