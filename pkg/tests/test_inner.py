from fractions import Fraction as F

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slitspectra.geometry import SlitGeometry
from slitspectra.inner import (
    InnerField,
    UnsupportedOrderError,
    beta_table,
    build_Y,
    check_basis,
    growth_defect,
    harmonicity_defect,
    laurent_coefficients,
    neumann_defect,
    reexpand,
    solve_beta,
)

FROZEN_BETA = {
    0: (),
    1: (),
    2: (F(1),),
    3: (F(3, 2),),
    4: (F(2), F(1)),
    5: (F(5, 2), F(5, 2)),
    6: (F(3), F(5), F(3)),
    7: (F(7, 2), F(35, 4), F(21, 2)),
    8: (F(4), F(14), F(28), F(17)),
}


@pytest.mark.parametrize("n", sorted(FROZEN_BETA))
def test_beta_frozen(n):
    assert solve_beta(n) == FROZEN_BETA[n]


def test_leading_beta_is_n_over_2():
    for n in range(2, 15):
        assert solve_beta(n)[0] == F(n, 2)


def test_beta_table_rows():
    rows = beta_table(4)
    assert rows == [(2, 0, F(1)), (3, 0, F(3, 2)), (4, 0, F(2)), (4, 1, F(1))]


@pytest.mark.parametrize("n", range(0, 9))
def test_harmonic_and_neumann(n):
    Y = build_Y(n)
    assert harmonicity_defect(Y) < 1e-6
    assert neumann_defect(Y) < 1e-6


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 8), st.floats(-20, 20))
def test_neumann_on_line_exact(n, z1):
    # d/dzeta2 of Re H = -Im H'(w) on zeta2 = 1/2
    Y = build_Y(n)
    w = z1 + 0.5j
    dH = n * w ** (n - 1) - 1j * sum(b * m * w ** (m - 1) for b, m in zip(Y.beta, Y.powers) if m > 0)
    assert abs(dH.imag) <= 1e-9 * (1 + abs(w)) ** (n - 1)


@pytest.mark.parametrize("n", range(0, 9))
def test_growth_matches_outer_harmonic(n):
    g = growth_defect(build_Y(n))
    assert g[-1] < 0.1
    assert np.all(np.diff(g) <= 1e-14)


def test_check_basis_suite():
    rep = check_basis(8)
    assert all(r["ok"] for r in rep.values())


def test_x1_on_boundary_parabola():
    # X_1 = Re w vanishes nowhere special; on xi1 = xi2^2 it equals xi2
    Y = build_Y(1)
    s = np.linspace(-4, 4, 17)
    np.testing.assert_allclose(Y(np.stack([s**2, s], axis=1)), s, atol=1e-12)


def test_laurent_coefficients_frozen():
    h1 = laurent_coefficients(build_Y(1), (1, 0, -1), 3.0)
    assert abs(h1[1] - 1) < 1e-13 and abs(h1[0]) < 1e-13 and abs(h1[-1] + 1 / 8) < 1e-13
    h2 = laurent_coefficients(build_Y(2), (2, 1, 0, -1), 3.0)
    assert abs(h2[2] - 1) < 1e-13
    assert abs(h2[1] + 1j) < 1e-13
    assert abs(h2[0] + 0.25) < 1e-13
    assert abs(h2[-1] - 1j / 8) < 1e-13
    with pytest.raises(ValueError):
        laurent_coefficients(build_Y(1), (1,), 0.4)


def _tip_field(G, phi0, d, phi1=0.0):
    return InnerField("left", G, ({0: phi0}, {0: phi1, 1: d * G}))


def test_reexpand_recovers_outer_data():
    f = _tip_field(0.9, 0.7, 1.3, phi1=-0.2)
    rep = reexpand(f, 0.05, order=2)
    assert rep.constant(0) == pytest.approx(0.7, abs=1e-12)
    assert rep.half(0) == pytest.approx(1.3, abs=1e-12)
    assert rep.constant(1) == pytest.approx(-0.2, abs=1e-12)
    # the r^(-1/2) coefficient of phi_2 is -d g^2 / 8
    assert rep.inverse_half(2) == pytest.approx(-1.3 * 0.81 / 8, rel=1e-12)


def test_reexpand_order_bound():
    with pytest.raises(UnsupportedOrderError):
        reexpand(_tip_field(1.0, 1.0, 1.0), 0.05, order=3)


def test_inner_field_order_bound():
    f = _tip_field(1.0, 1.0, 1.0)
    with pytest.raises(UnsupportedOrderError):
        f.evaluate(np.array([[-1.0, 0.0]]), 0.1, order=2)


def test_inner_field_matches_outer_far_from_tip():
    # v0 + eps v1 at rho = 1e4 approaches phi0 + d r^(1/2) cos(theta/2): eps cancels the scaling
    geom = SlitGeometry()
    G, eps = geom.g_tip_left, 1e-3
    f = _tip_field(G, 0.5, 1.1)
    r = 1e4 * (G * eps) ** 2
    x = np.array([[-r, 0.0], [0.0, r]])
    outer = 0.5 + 1.1 * np.sqrt(r) * np.cos(np.array([np.pi, np.pi / 2]) / 2)
    np.testing.assert_allclose(f.at(geom, eps, x), outer, atol=1e-5)
