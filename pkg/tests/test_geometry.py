from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from hdseg.geometry import GeometryElement, pp3_length, sample_elements, spiral_local


def clothoid_oracle(k0, k1, L):
    c = (k1 - k0) / L
    th = lambda s: k0 * s + 0.5 * c * s * s
    u = quad(lambda s: math.cos(th(s)), 0, L, epsabs=1e-13, epsrel=1e-13, limit=500)[0]
    v = quad(lambda s: math.sin(th(s)), 0, L, epsabs=1e-13, epsrel=1e-13, limit=500)[0]
    return u, v


def test_line_samples():
    e = GeometryElement(0.0, 0.0, 0.0, 0.3, 100.0, "line")
    pts, s = sample_elements([e], 10.0)
    assert len(pts) == 11
    d = pts - pts[0]
    np.testing.assert_allclose(d[:, 1] * math.cos(0.3) - d[:, 0] * math.sin(0.3), 0.0, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(np.diff(pts, axis=0), axis=1), 10.0)


def test_quarter_circle():
    e = GeometryElement(0.0, 0.0, 0.0, 0.0, math.pi * 100 / 2, "arc", {"curvature": 0.01})
    x, y, h = e.end()
    assert (x, y) == pytest.approx((100.0, 100.0), abs=1e-9)
    assert h == pytest.approx(math.pi / 2)


@pytest.mark.parametrize("k0,k1,L", [(0.0, 0.01, 100.0), (0.002, -0.003, 250.0),
                                     (1 / 150, 0.0, 100.0), (-0.004, -0.0041, 400.0)])
def test_spiral_matches_integration(k0, k1, L):
    e = GeometryElement(0.0, 0.0, 0.0, 0.0, L, "spiral", {"curvStart": k0, "curvEnd": k1})
    x, y, h = e.end()
    u, v = clothoid_oracle(k0, k1, L)
    assert x == pytest.approx(u, abs=1e-9)
    assert y == pytest.approx(v, abs=1e-9)
    assert h == pytest.approx(k0 * L + 0.5 * (k1 - k0) * L)


def test_spiral_large_phase_uses_integration():
    # k0^2 / (2c) far beyond the closed-form precision window
    k0, k1, L = 0.005, 0.0050001, 300.0
    u, v, _ = spiral_local(np.array([L]), k0, (k1 - k0) / L)
    ou, ov = clothoid_oracle(k0, k1, L)
    assert u[0] == pytest.approx(ou, abs=1e-9) and v[0] == pytest.approx(ov, abs=1e-9)


def test_parampoly3_straight():
    p = {"aU": 0, "bU": 100, "cU": 0, "dU": 0, "aV": 0, "bV": 0, "cV": 0, "dV": 0}
    e = GeometryElement(0.0, 1.0, 2.0, 0.0, pp3_length(p), "paramPoly3", p)
    assert e.length == pytest.approx(100.0, abs=1e-9)
    pts, _ = sample_elements([e], 1.0)
    np.testing.assert_allclose(np.diff(pts[:, 0]), 1.0, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.floats(20, 200), st.floats(-0.3, 0.3), st.floats(-0.3, 0.3), st.floats(-0.1, 0.1),
       st.floats(-0.1, 0.1))
def test_parampoly3_arclength_uniform(bu, cu, cv, du, dv):
    p = {"aU": 0, "bU": bu, "cU": cu * bu, "dU": du * bu, "aV": 0, "bV": 0, "cV": cv * bu,
         "dV": dv * bu}
    e = GeometryElement(0.0, 0.0, 0.0, 0.0, pp3_length(p), "paramPoly3", p)
    ds = np.linspace(0, e.length, 41)
    x, y, _ = e.evaluate(ds)
    # chord between closely spaced samples approximates the arc increment
    fine = np.linspace(0, e.length, 4001)
    fx, fy, _ = e.evaluate(fine)
    arc = np.concatenate([[0.0], np.cumsum(np.hypot(np.diff(fx), np.diff(fy)))])
    np.testing.assert_allclose(np.interp(ds, fine, arc), ds, atol=1e-3)
    assert e.end()[:2] == pytest.approx((x[-1], y[-1]))


def test_rejects_bad_elements():
    with pytest.raises(ValueError):
        GeometryElement(0.0, 0.0, 0.0, 0.0, 0.0, "line")
    with pytest.raises(ValueError):
        GeometryElement(0.0, 0.0, 0.0, 0.0, 1.0, "poly3")
