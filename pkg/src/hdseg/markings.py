"""Lane-marking extraction from a reflectivity-filtered cloud.

Clusters are found with DBSCAN, long (solid) clusters are cut into
fixed-length parts, each cluster gets a RANSAC line direction, and clusters
are linked into chains by stepping along a smoothed direction.  Chains are
then fused across gaps and classified against the regulation profile.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .ingest import RegulationProfile

SIZE_TOLERANCE = 0.10
MIN_CLUSTERS_FOR_SPACING = 4
_LINE_ITERS = 64


class DegenerateClusterError(ValueError):
    pass


class MarkingClass(str, enum.Enum):
    SOLID = "solid"
    DASHED = "dashed"
    UNKNOWN = "unknown"


@dataclass
class MarkingCluster:
    points: np.ndarray
    center: np.ndarray
    direction: np.ndarray  # fitted v*, unit, forward along the driving direction
    length: float
    width: float = 0.0
    from_solid_split: bool = False
    split_group: int | None = None

    @property
    def origin_distance(self) -> float:
        return float(np.linalg.norm(self.center))


@dataclass
class MarkingChain:
    clusters: list[MarkingCluster]
    directions: list[np.ndarray] = field(default_factory=list)  # smoothed, one per cluster
    cls: MarkingClass = MarkingClass.UNKNOWN

    def __len__(self) -> int:
        return len(self.clusters)

    @property
    def centers(self) -> np.ndarray:
        return np.array([c.center for c in self.clusters]).reshape(-1, 3)

    @property
    def has_split_origin(self) -> bool:
        return any(c.from_solid_split for c in self.clusters)


@dataclass(frozen=True)
class ChainSearchParams:
    d: float          # first search distance
    d_max: float
    step: float
    ball_radius: float
    gamma: float = 0.5

    def __post_init__(self):
        if not 0 < self.d <= self.d_max:
            raise ValueError(f"need 0 < d <= d_max, got d={self.d}, d_max={self.d_max}")
        if self.step <= 0:
            raise ValueError("step must be > 0")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")

    def distances(self) -> np.ndarray:
        n = int(np.floor((self.d_max - self.d) / self.step + 1e-9))
        return self.d + self.step * np.arange(n + 1)

    @classmethod
    def for_chaining(cls, regs: RegulationProfile, step=3.0, factor=1.5, gamma=0.5):
        return cls(regs.dash_length, factor * regs.dash_center_spacing, step,
                   regs.lane_width / 2.0, gamma)

    @classmethod
    def for_fusion(cls, regs: RegulationProfile, step=3.0, factor=3.5, gamma=0.5):
        return cls(step, factor * regs.dash_center_spacing, step, regs.lane_width / 2.0, gamma)


# -- clustering ----------------------------------------------------------------

def dbscan(xyz: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """DBSCAN labels (``-1`` = noise).  ``min_pts`` counts the point itself.

    Core points are joined through a k-d tree neighbour graph; border points
    take the lowest label among their core neighbours, so the result does not
    depend on input order beyond label numbering.
    """
    if eps <= 0:
        raise ValueError("eps must be > 0")
    if min_pts < 1:
        raise ValueError("min_pts must be >= 1")
    n = len(xyz)
    labels = np.full(n, -1, dtype=int)
    if n == 0:
        return labels
    pairs = cKDTree(xyz).query_pairs(eps, output_type="ndarray")
    counts = np.bincount(pairs.ravel(), minlength=n) + 1
    core = counts >= min_pts
    if not core.any():
        return labels

    cc = pairs[core[pairs[:, 0]] & core[pairs[:, 1]]]
    core_idx = np.flatnonzero(core)
    remap = np.full(n, -1)
    remap[core_idx] = np.arange(len(core_idx))
    m = len(core_idx)
    graph = coo_matrix((np.ones(len(cc)), (remap[cc[:, 0]], remap[cc[:, 1]])), shape=(m, m))
    _, comp = connected_components(graph, directed=False)
    # number components by first core point so labels follow input order
    _, first = np.unique(comp, return_index=True)
    order = np.argsort(np.argsort(first))
    labels[core_idx] = order[comp]

    border = pairs[core[pairs[:, 0]] ^ core[pairs[:, 1]]]
    if len(border):
        c = np.where(core[border[:, 0]], border[:, 0], border[:, 1])
        b = np.where(core[border[:, 0]], border[:, 1], border[:, 0])
        cand = np.full(n, np.iinfo(int).max)
        np.minimum.at(cand, b, labels[c])
        hit = cand < np.iinfo(int).max
        labels[hit] = cand[hit]
    return labels


def fit_direction(points, driving_direction=None, threshold: float = 0.05, seed=0) -> np.ndarray:
    """RANSAC 3D line direction refined by PCA over the consensus set."""
    p = np.asarray(points, dtype=float)[:, :3]
    if len(p) < 2:
        raise DegenerateClusterError("direction fit needs >= 2 points")
    fwd = np.array([1.0, 0.0, 0.0]) if driving_direction is None else np.asarray(driving_direction, float)

    if len(p) == 2:
        v = p[1] - p[0]
    else:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        n = len(p)
        a = rng.integers(0, n, _LINE_ITERS)
        b = rng.integers(0, n - 1, _LINE_ITERS)
        b = b + (b >= a)
        u = p[b] - p[a]
        nu = np.linalg.norm(u, axis=1)
        ok = nu > 1e-12
        if not ok.any():
            raise DegenerateClusterError("all cluster points coincide")
        u, a = u[ok] / nu[ok, None], a[ok]
        best, best_count = None, -1
        for k0 in range(0, len(u), 16):
            uk, ak = u[k0:k0 + 16], p[a[k0:k0 + 16]]
            diff = p[None, :, :] - ak[:, None, :]
            along = np.einsum("knj,kj->kn", diff, uk)
            perp2 = np.einsum("knj,knj->kn", diff, diff) - along**2
            inl = perp2 <= threshold**2
            cnt = inl.sum(axis=1)
            k = int(np.argmax(cnt))
            if cnt[k] > best_count:
                best_count, best = int(cnt[k]), inl[k]
        q = p[best] if best_count >= 2 else p
        _, _, vt = np.linalg.svd(q - q.mean(axis=0), full_matrices=False)
        v = vt[0]
    norm = np.linalg.norm(v)
    if norm <= 1e-12:
        raise DegenerateClusterError("all cluster points coincide")
    v = v / norm
    if v @ fwd < 0:
        v = -v
    return v


def _make_cluster(points, driving_direction, line_threshold, seed, **kw) -> MarkingCluster:
    v = fit_direction(points, driving_direction, line_threshold, seed)
    xyz = points[:, :3]
    center = xyz.mean(axis=0)
    rel = xyz - center
    along = rel @ v
    side = np.array([-v[1], v[0], 0.0])
    ns = np.linalg.norm(side)
    width = float(np.ptp(rel @ (side / ns))) if ns > 1e-12 else 0.0
    return MarkingCluster(points, center, v, float(np.ptp(along)), width, **kw)


def cluster_markings(c: np.ndarray, eps: float = 0.3, min_pts: int = 5, driving_direction=None,
                     line_threshold: float = 0.05, seed=0) -> list[MarkingCluster]:
    c = np.asarray(c, dtype=float)
    if len(c) == 0:
        return []
    labels = dbscan(c[:, :3], eps, min_pts)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = []
    for lab in range(labels.max() + 1):
        pts = c[labels == lab]
        if len(pts) >= 2:
            out.append(_make_cluster(pts, driving_direction, line_threshold, rng))
    return out


def split_long_clusters(clusters: list[MarkingCluster], threshold: float = 12.0, part: float = 6.0,
                        min_part: float = 1.0, driving_direction=None, line_threshold: float = 0.05,
                        seed=0) -> list[MarkingCluster]:
    """Cut clusters longer than ``threshold`` into ``part``-long windows.

    A trailing window shorter than ``min_part`` is merged into the one before.
    All parts of one source cluster share a ``split_group`` id.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out: list[MarkingCluster] = []
    group = 0
    for cl in clusters:
        if cl.length <= threshold:
            out.append(cl)
            continue
        along = (cl.points[:, :3] - cl.center) @ cl.direction
        lo = along.min()
        n_full = int(np.floor(cl.length / part + 1e-9))
        edges = lo + part * np.arange(n_full + 1)
        if cl.length - n_full * part < min_part - 1e-9:
            edges[-1] = along.max() + 1.0
        else:
            edges = np.append(edges, along.max() + 1.0)
        idx = np.clip(np.searchsorted(edges, along, side="right") - 1, 0, len(edges) - 2)
        for k in range(len(edges) - 1):
            pts = cl.points[idx == k]
            if len(pts) >= 2:
                out.append(_make_cluster(pts, driving_direction, line_threshold, rng,
                                         from_solid_split=True, split_group=group))
        group += 1
    return out


# -- chaining ------------------------------------------------------------------

def smooth_direction(v_i, v_prev, gamma: float = 0.5) -> np.ndarray:
    """Blend the current and previous fitted directions and renormalise."""
    v_i = np.asarray(v_i, dtype=float)
    s = gamma * v_i + (1.0 - gamma) * np.asarray(v_prev, dtype=float)
    n = np.linalg.norm(s)
    if n < 1e-9:
        return v_i / np.linalg.norm(v_i)
    return s / n


def _smoothed(clusters: list[MarkingCluster], gamma: float) -> list[np.ndarray]:
    dirs = [clusters[0].direction]
    for prev, cur in zip(clusters[:-1], clusters[1:]):
        dirs.append(smooth_direction(cur.direction, prev.direction, gamma))
    return dirs


def _origin_order(clusters: list[MarkingCluster]) -> list[int]:
    keys = [(round(c.origin_distance, 9), *np.round(c.center, 9)) for c in clusters]
    return sorted(range(len(clusters)), key=lambda i: keys[i])


def _finalize(members: list[int], clusters, gamma) -> MarkingChain:
    members = sorted(members, key=lambda i: clusters[i].origin_distance)
    cl = [clusters[i] for i in members]
    return MarkingChain(cl, _smoothed(cl, gamma))


def chain_markings(clusters: list[MarkingCluster], params: ChainSearchParams) -> list[MarkingChain]:
    """Link clusters into chains; split parts arrive pre-linked.

    Seeds are taken in order of distance from the segment origin.  From the
    chain tail the next center is predicted at increasing distances along the
    smoothed direction and the nearest center strictly inside the ball is
    linked.  If that nearest center already belongs to a chain the search
    stops there rather than reaching past it.
    """
    if not clusters:
        return []
    centers = np.array([c.center for c in clusters])
    tree = cKDTree(centers)
    order = _origin_order(clusters)
    chained = np.zeros(len(clusters), dtype=bool)
    members: list[list[int]] = []

    groups: dict[int, list[int]] = {}
    for i in order:
        g = clusters[i].split_group
        if g is not None:
            groups.setdefault(g, []).append(i)
    for g in sorted(groups, key=lambda g: order.index(groups[g][0])):
        members.append(groups[g])
        chained[groups[g]] = True

    steps = params.distances()
    for seed_idx in order:
        if chained[seed_idx]:
            continue
        chain = [seed_idx]
        chained[seed_idx] = True
        cur, v = seed_idx, clusters[seed_idx].direction
        while True:
            hit = None
            for d in steps:
                p = centers[cur] + v * d
                cand = [j for j in tree.query_ball_point(p, params.ball_radius)
                        if j not in chain and np.linalg.norm(centers[j] - p) < params.ball_radius]
                if cand:
                    hit = min(cand, key=lambda j: (np.linalg.norm(centers[j] - p), j))
                    break
            # the marking continues in a cluster another chain already owns
            if hit is None or chained[hit]:
                break
            chain.append(hit)
            chained[hit] = True
            v = smooth_direction(clusters[hit].direction, clusters[cur].direction, params.gamma)
            cur = hit
        members.append(chain)

    chains = [_finalize(m, clusters, params.gamma) for m in members]
    for ch in chains:
        if ch.has_split_origin:
            ch.cls = MarkingClass.SOLID
    chains.sort(key=lambda ch: (ch.clusters[0].origin_distance, *np.round(ch.clusters[0].center, 9)))
    return chains


def _merge_class(head: MarkingChain, tail: MarkingChain) -> MarkingClass:
    if head.has_split_origin or tail.has_split_origin:
        return MarkingClass.SOLID
    return head.cls


def fuse_chains(chains: list[MarkingChain], params: ChainSearchParams) -> list[MarkingChain]:
    """Join chains across gaps, searching forward from the last two centers."""
    chains = list(chains)
    changed = True
    while changed:
        changed = False
        for i, head in enumerate(chains):
            if len(head) < 2:
                continue
            a, b = head.clusters[-2].center, head.clusters[-1].center
            v = b - a
            nv = np.linalg.norm(v)
            if nv < 1e-12:
                continue
            v = v / nv
            end_dist = head.clusters[-1].origin_distance
            starts = [(j, ch.clusters[0].center) for j, ch in enumerate(chains)
                      if j != i and ch.clusters[0].origin_distance > end_dist]
            hit = None
            for d in params.distances():
                p = b + v * d
                cand = [(np.linalg.norm(c - p), j) for j, c in starts
                        if np.linalg.norm(c - p) < params.ball_radius]
                if cand:
                    hit = min(cand)[1]
                    break
            if hit is None:
                continue
            tail = chains[hit]
            merged = head.clusters + tail.clusters
            fused = MarkingChain(merged, _smoothed(merged, params.gamma), _merge_class(head, tail))
            chains = [ch for k, ch in enumerate(chains) if k not in (i, hit)] + [fused]
            chains.sort(key=lambda ch: (ch.clusters[0].origin_distance,
                                        *np.round(ch.clusters[0].center, 9)))
            changed = True
            break
    return chains


# -- classification ------------------------------------------------------------

def classify_chain(chain: MarkingChain, regs: RegulationProfile) -> MarkingClass:
    if chain.has_split_origin:
        return MarkingClass.SOLID
    lengths = np.array([c.length for c in chain.clusters])
    within = np.abs(lengths - regs.dash_length) <= SIZE_TOLERANCE * regs.dash_length
    if len(lengths) and within.mean() > 0.5:
        return MarkingClass.DASHED
    if len(chain) > MIN_CLUSTERS_FOR_SPACING:
        spacing = np.linalg.norm(np.diff(chain.centers, axis=0), axis=1).mean()
        if abs(spacing - regs.dash_center_spacing) <= SIZE_TOLERANCE * regs.dash_center_spacing:
            return MarkingClass.DASHED
        if spacing < regs.dash_length:
            return MarkingClass.SOLID
    return MarkingClass.UNKNOWN


def classify_all(chains: list[MarkingChain], regs: RegulationProfile) -> list[MarkingChain]:
    for ch in chains:
        ch.cls = classify_chain(ch, regs)
    return chains
