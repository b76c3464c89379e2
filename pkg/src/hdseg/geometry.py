"""Plan-view geometry primitives: line, arc, spiral and normalised paramPoly3.

Every element is evaluated at arc-length offsets ``ds`` in ``[0, length]``
and returns inertial ``x, y`` and heading.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.integrate import quad
from scipy.special import fresnel

_GL_X, _GL_W = leggauss(32)
# beyond this Fresnel phase the closed form loses precision, integrate instead
_MAX_FRESNEL_PHASE = 100.0


@dataclass
class GeometryElement:
    s: float
    x: float
    y: float
    hdg: float
    length: float
    kind: str                   # line | arc | spiral | paramPoly3
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.length > 0:
            raise ValueError(f"geometry length must be > 0, got {self.length}")
        if self.kind not in ("line", "arc", "spiral", "paramPoly3"):
            raise ValueError(f"unknown geometry kind {self.kind!r}")

    def local(self, ds) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Local ``u, v`` and heading change at arc-length offsets ``ds``."""
        ds = np.asarray(ds, dtype=float)
        if self.kind == "line":
            return ds, np.zeros_like(ds), np.zeros_like(ds)
        if self.kind == "arc":
            return _arc_local(ds, self.params["curvature"])
        if self.kind == "spiral":
            return spiral_local(ds, self.params["curvStart"],
                                (self.params["curvEnd"] - self.params["curvStart"]) / self.length)
        return pp3_local_at_s(self.params, ds, self.length)

    def evaluate(self, ds) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        u, v, dh = self.local(ds)
        c, s = np.cos(self.hdg), np.sin(self.hdg)
        return self.x + c * u - s * v, self.y + s * u + c * v, self.hdg + dh

    def end(self) -> tuple[float, float, float]:
        x, y, h = self.evaluate(np.array([self.length]))
        return float(x[0]), float(y[0]), float(h[0])


def _arc_local(ds, k):
    if abs(k) < 1e-15:
        return ds, np.zeros_like(ds), np.zeros_like(ds)
    th = k * ds
    return np.sin(th) / k, (1.0 - np.cos(th)) / k, th


def _quad_heading(ds, k0, c):
    """Gauss-Legendre integration of cos/sin of the clothoid heading."""
    ds = np.atleast_1d(ds)
    u = np.empty_like(ds)
    v = np.empty_like(ds)
    for i, L in enumerate(ds):
        n_sub = max(1, int(np.ceil(abs(L) / 10.0)))
        edges = np.linspace(0.0, L, n_sub + 1)
        mid = 0.5 * (edges[1:] + edges[:-1])
        half = 0.5 * (edges[1:] - edges[:-1])
        t = (mid[:, None] + half[:, None] * _GL_X[None]).ravel()
        w = (half[:, None] * _GL_W[None]).ravel()
        th = k0 * t + 0.5 * c * t * t
        u[i] = w @ np.cos(th)
        v[i] = w @ np.sin(th)
    return u, v


def spiral_local(ds, k0: float, c: float):
    """Clothoid with curvature ``k0 + c*s`` starting at the origin along +u."""
    ds = np.asarray(ds, dtype=float)
    th = k0 * ds + 0.5 * c * ds * ds
    if abs(c) < 1e-15:
        u, v, _ = _arc_local(ds, k0)
        return u, v, th
    t0 = k0 / c
    phi = -k0 * k0 / (2.0 * c)
    if abs(phi) > _MAX_FRESNEL_PHASE:
        u, v = _quad_heading(ds, k0, c)
        return u.reshape(ds.shape), v.reshape(ds.shape), th
    sg = np.sign(c)
    a = np.sqrt(abs(c) / np.pi)
    s0, c0 = fresnel(a * t0)
    s1, c1 = fresnel(a * (ds + t0))
    dc, dsn = c1 - c0, s1 - s0
    scale = 1.0 / a
    u = scale * (np.cos(phi) * dc - sg * np.sin(phi) * dsn)
    v = scale * (np.sin(phi) * dc + sg * np.cos(phi) * dsn)
    return u, v, th


# -- paramPoly3 ----------------------------------------------------------------

PP3_KEYS = ("aU", "bU", "cU", "dU", "aV", "bV", "cV", "dV")


def pp3_poly(params, p):
    p = np.asarray(p, dtype=float)
    u = params["aU"] + p * (params["bU"] + p * (params["cU"] + p * params["dU"]))
    v = params["aV"] + p * (params["bV"] + p * (params["cV"] + p * params["dV"]))
    return u, v


def pp3_deriv(params, p):
    p = np.asarray(p, dtype=float)
    du = params["bU"] + p * (2 * params["cU"] + 3 * p * params["dU"])
    dv = params["bV"] + p * (2 * params["cV"] + 3 * p * params["dV"])
    return du, dv


def pp3_speed(params, p):
    du, dv = pp3_deriv(params, p)
    return np.hypot(du, dv)


def pp3_length(params, p_end: float = 1.0) -> float:
    val, _ = quad(lambda q: float(pp3_speed(params, q)), 0.0, p_end,
                  epsabs=0.0, epsrel=1e-11, limit=200)
    return val


def _gl_arclength(params, p):
    """Arc length from 0 to each ``p`` (vectorised fixed-order quadrature)."""
    p = np.atleast_1d(p)
    q = 0.5 * p[:, None] * (_GL_X[None] + 1.0)
    return 0.5 * p * (pp3_speed(params, q) @ _GL_W)


def pp3_param_at_s(params, ds, length: float) -> np.ndarray:
    """Invert arc length: curve parameter for each offset ``ds``."""
    ds = np.atleast_1d(np.asarray(ds, dtype=float))
    total = _gl_arclength(params, np.array([1.0]))[0]
    # normalise so the element's recorded length maps to p = 1
    target = ds * (total / length)
    p = np.clip(target / total, 0.0, 1.0)
    for _ in range(12):
        err = _gl_arclength(params, p) - target
        p_new = np.clip(p - err / np.maximum(pp3_speed(params, p), 1e-12), 0.0, 1.0)
        if np.max(np.abs(p_new - p)) < 1e-15:
            p = p_new
            break
        p = p_new
    return p


def pp3_local_at_s(params, ds, length: float):
    ds = np.asarray(ds, dtype=float)
    p = pp3_param_at_s(params, ds.ravel(), length).reshape(ds.shape)
    u, v = pp3_poly(params, p)
    du, dv = pp3_deriv(params, p)
    return u, v, np.arctan2(dv, du)


# -- roads ---------------------------------------------------------------------

def sample_elements(elements: list[GeometryElement], spacing: float, include_end: bool = False):
    """Points at uniform arc-length spacing along a chain of elements."""
    if spacing <= 0:
        raise ValueError("spacing must be > 0")
    if not elements:
        return np.empty((0, 2)), np.empty(0)
    s0 = elements[0].s
    total = sum(e.length for e in elements)
    n = int(np.floor(total / spacing + 1e-9))
    s = s0 + spacing * np.arange(n + 1)
    if include_end and total - n * spacing > 1e-9:
        s = np.append(s, s0 + total)
    starts = np.array([e.s for e in elements])
    idx = np.clip(np.searchsorted(starts, s, side="right") - 1, 0, len(elements) - 1)
    out = np.empty((len(s), 2))
    for k, e in enumerate(elements):
        m = idx == k
        if m.any():
            ds = np.clip(s[m] - e.s, 0.0, e.length)
            x, y, _ = e.evaluate(ds)
            out[m, 0], out[m, 1] = x, y
    return out, s
