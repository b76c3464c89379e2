"""Point-cloud conditioning filters.

A cloud is an ``(n, 4)`` float array of ``x, y, z, reflectivity``.  Every
filter returns a row subset of its input; coordinates are never touched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

RANSAC_CONFIDENCE = 0.999
_BATCH = 32


class DegenerateGeometryError(ValueError):
    pass


@dataclass(frozen=True)
class GroundPlane:
    normal: np.ndarray  # unit, z > 0
    offset: float       # plane: normal . p = offset
    inlier_threshold: float

    def signed_distance(self, pts) -> np.ndarray:
        return np.asarray(pts, dtype=float)[:, :3] @ self.normal - self.offset


def empty_cloud() -> np.ndarray:
    return np.empty((0, 4))


def crop_height(c: np.ndarray, sensor_mount_z: float = 0.0, slack: float = 0.5) -> np.ndarray:
    """Drop returns above the sensor (sensor frame), allowing ``slack`` for banked roads."""
    return c[c[:, 2] <= sensor_mount_z + slack]


def crop_width(c: np.ndarray, half_width: float) -> np.ndarray:
    if half_width <= 0:
        return c[:0]
    return c[np.abs(c[:, 1]) <= half_width]


def filter_reflectivity(c: np.ndarray, threshold: float) -> np.ndarray:
    return c[c[:, 3] >= threshold]


def remove_radius_outliers(c: np.ndarray, radius: float, min_neighbors: int) -> np.ndarray:
    """Keep points with at least ``min_neighbors`` other kept points within ``radius``.

    Repeated until stable, so the condition holds for the returned set and the
    filter is idempotent.
    """
    if radius <= 0:
        raise ValueError("radius must be > 0")
    keep = np.arange(len(c))
    while len(keep):
        pts = c[keep, :3]
        if min_neighbors <= 0:
            break
        # the (min_neighbors + 1)-th nearest, self included, decides; nextafter keeps d == radius
        d, _ = cKDTree(pts).query(pts, k=[min_neighbors + 1],
                                  distance_upper_bound=np.nextafter(radius, np.inf))
        ok = np.isfinite(d[:, 0])
        if ok.all():
            break
        keep = keep[ok]
    return c[keep]


def _plane_from_points(p: np.ndarray):
    centroid = p.mean(axis=0)
    _, sv, vt = np.linalg.svd(p - centroid, full_matrices=False)
    n = vt[-1]
    if n[2] < 0:
        n = -n
    return n / np.linalg.norm(n), float(n @ centroid) / float(np.linalg.norm(n)), sv


def _distinct_triples(rng, n: int, k: int) -> np.ndarray:
    a = rng.integers(0, n, k)
    b = rng.integers(0, n - 1, k)
    b = b + (b >= a)
    c = rng.integers(0, n - 2, k)
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    c = c + (c >= lo)
    c = c + (c >= hi)
    return np.column_stack([a, b, c])


def fit_ground_plane(c: np.ndarray, threshold: float = 0.10, max_iters: int = 1000,
                     seed=0) -> tuple[GroundPlane, np.ndarray]:
    """RANSAC ground plane; the kept set is the inliers plus everything below the plane.

    The iteration count adapts to the best inlier ratio seen so far (99.9 %
    confidence) and never exceeds ``max_iters``.  The winning consensus set is
    refined by a least-squares plane fit.
    """
    pts = np.asarray(c, dtype=float)[:, :3]
    n_pts = len(pts)
    if n_pts < 3:
        raise DegenerateGeometryError(f"ground plane needs >= 3 points, got {n_pts}")
    _, _, sv = _plane_from_points(pts)
    if sv[1] <= 1e-9 * max(sv[0], 1.0):
        raise DegenerateGeometryError("ground plane points are collinear")

    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    best_count, best_n, best_d = -1, None, 0.0
    needed = max_iters
    done = 0
    while done < min(needed, max_iters):
        batch = min(_BATCH, max_iters - done)
        idx = _distinct_triples(rng, n_pts, batch)
        p0, p1, p2 = pts[idx[:, 0]], pts[idx[:, 1]], pts[idx[:, 2]]
        nrm = np.cross(p1 - p0, p2 - p0)
        norm = np.linalg.norm(nrm, axis=1)
        valid = norm > 1e-12
        nrm[valid] /= norm[valid, None]
        d = np.einsum("ij,ij->i", nrm, p0)
        counts = (np.abs(pts @ nrm.T - d) <= threshold).sum(axis=0)
        counts[~valid] = -1
        k = int(np.argmax(counts))
        if counts[k] > best_count:
            best_count, best_n, best_d = int(counts[k]), nrm[k], float(d[k])
            w = best_count / n_pts
            if w >= 1.0:
                needed = 0
            elif w > 0:
                needed = math.ceil(math.log(1 - RANSAC_CONFIDENCE) / math.log(1 - w**3))
        done += batch

    if best_n is None or best_count < 3:
        raise DegenerateGeometryError("no plane hypothesis found")
    inliers = np.abs(pts @ best_n - best_d) <= threshold
    normal, offset, _ = _plane_from_points(pts[inliers])
    refined = np.abs(pts @ normal - offset) <= threshold
    if refined.sum() < inliers.sum():
        normal = best_n if best_n[2] > 0 else -best_n
        offset = best_d if best_n[2] > 0 else -best_d
    plane = GroundPlane(normal, float(offset), threshold)
    kept = c[plane.signed_distance(c) <= threshold]
    return plane, kept
