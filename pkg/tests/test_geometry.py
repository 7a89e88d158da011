import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slitspectra.geometry import (
    CoordinateFrames,
    DomainSpec,
    GeometryError,
    SlitGeometry,
    integrate_profile,
    parabolic_map,
    smoothstep_cutoff,
    tip_polar,
)


def test_profiles_follow_square_root_near_tips(geom):
    t = np.array([1e-8, 1e-6, 1e-4])
    np.testing.assert_allclose(geom.g(t, "+"), geom.g_tip_left * np.sqrt(t), rtol=1e-12)
    np.testing.assert_allclose(geom.g(t, "-"), -geom.g_tip_left * np.sqrt(t), rtol=1e-12)
    np.testing.assert_allclose(geom.g(1 - t, "+"), geom.g_tip_right * np.sqrt(t), rtol=1e-8)  # 1 - t rounds


def test_profiles_are_c2_across_junctions(geom):
    for a in (geom.t0, 1 - geom.t0):
        h = 1e-7
        for fn in (lambda t: geom.g(t, "+"), lambda t: geom.dg(t, "+")):
            left, right = fn(np.array([a - h])), fn(np.array([a + h]))
            assert abs(left - right)[0] < 1e-5


def test_sign_condition_enforced():
    with pytest.raises(GeometryError):
        SlitGeometry(bump_plus=-2.0)
    with pytest.raises(GeometryError):
        SlitGeometry(t0=0.6)


def test_profile_integral_handles_sqrt_endpoints():
    # int_0^1 sqrt(t(1-t)) dt = pi/8
    val = integrate_profile(lambda t: np.sqrt(t * (1 - t)))
    assert abs(val - math.pi / 8) < 1e-12


def test_domain_contains_and_projects():
    d = DomainSpec(kind="circle", center=(0.0, 0.0), semi_axes=(1.0, 1.0))
    pts = np.array([[0.1, 0.2], [2.0, 0.0]])
    assert d.contains(pts).tolist() == [True, False]
    proj = d.project(np.array([[0.9, 0.0], [0.0, 1.1]]))
    np.testing.assert_allclose(np.linalg.norm(proj, axis=1), 1.0, atol=1e-12)
    assert abs(d.area() - math.pi) < 1e-10


def test_unknown_family_rejected():
    with pytest.raises(GeometryError):
        DomainSpec(kind="square")


def test_tip_polar_sides_of_cut():
    x = np.array([[0.5, 0.0], [0.5, 0.0]])
    r, t = tip_polar(x, "left", lower=np.array([False, True]))
    np.testing.assert_allclose(r, 0.5)
    assert t[0] == 0.0 and t[1] == pytest.approx(2 * math.pi)


def test_parabolic_map_sends_boundary_to_line():
    s = np.linspace(-3, 3, 41)
    xi = np.stack([s**2, s], axis=1)
    _, w, _ = parabolic_map(xi)
    np.testing.assert_allclose(w.imag, 0.5, atol=1e-12)


def test_parabolic_map_rejects_slit_interior():
    with pytest.raises(GeometryError):
        parabolic_map(np.array([[1.0, 0.1]]))


@settings(max_examples=50, deadline=None)
@given(st.floats(-50, 50), st.floats(-50, 50))
def test_parabolic_map_inverse(a, b):
    # w^2 + 1/4 reproduces xi1 + i xi2 everywhere outside the parabola
    if a > b * b:
        return
    z, w, _ = parabolic_map(np.array([[a, b]]))
    np.testing.assert_allclose(w**2, z, atol=1e-9 * (1 + abs(a) + abs(b)))
    assert w.imag[0] >= 0.5 - 1e-9


def test_frames_roundtrip(geom, rng):
    x = rng.uniform(-0.2, 0.2, size=(20, 2))
    for tip in ("left", "right"):
        f = CoordinateFrames(geom, 0.05, tip)
        xi, rho, _ = f.to_inner(x)
        np.testing.assert_allclose(rho, np.linalg.norm(xi, axis=1), rtol=1e-13)
        np.testing.assert_allclose(f.from_inner(xi), x, atol=1e-14)


def test_cutoff_values_and_derivatives():
    c = 0.1
    r = np.array([0.05, 0.1, 0.15, 0.2, 0.3])
    np.testing.assert_allclose(smoothstep_cutoff(r, c), [1, 1, 0.5, 0, 0], atol=1e-14)
    rr = np.linspace(0.101, 0.199, 20)
    h = 1e-6
    fd = (smoothstep_cutoff(rr + h, c) - smoothstep_cutoff(rr - h, c)) / (2 * h)
    np.testing.assert_allclose(smoothstep_cutoff(rr, c, 1), fd, rtol=1e-6, atol=1e-6)
    with pytest.raises(ValueError):
        smoothstep_cutoff(r, c, 3)
