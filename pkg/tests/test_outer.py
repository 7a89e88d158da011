import math

import numpy as np
import pytest

from slitspectra.fem import FESpace
from slitspectra.geometry import tip_polar
from slitspectra.outer import (
    ExpansionError,
    cut_traces,
    extract_tip,
    fit_tip,
    lambda1_from_traces,
    outer_expansion,
    solve_limiting,
)
from slitspectra.study import predicted_excess

RADII = tuple(np.geomspace(1e-3, 0.05, 6))


def _analytic(fn, tip="left"):
    def sample(pts):
        r, t = tip_polar(pts, tip)
        return fn(r, t)
    return sample


def test_fit_constant():
    te = extract_tip(_analytic(lambda r, t: 5.0 + 0 * r), "left", RADII)
    assert te.phi0_at_tip == pytest.approx(5.0, abs=1e-10) and abs(te.d) < 1e-10


def test_fit_exact_basis_member():
    te = extract_tip(_analytic(lambda r, t: 3 + 2 * np.sqrt(r) * np.cos(t / 2), "right"), "right", RADII)
    assert te.phi0_at_tip == pytest.approx(3.0, abs=1e-8)
    assert te.d == pytest.approx(2.0, abs=1e-8)


def test_fit_smooth_field_has_no_singular_part():
    te = extract_tip(_analytic(lambda r, t: r * np.cos(t)), "left", RADII)
    assert abs(te.d) < 1e-8 and abs(te.phi0_at_tip) < 1e-8


def test_fit_rejects_degenerate_radii():
    with pytest.raises(ExpansionError):
        # one circle of 32 points cannot separate 39 angular columns
        fit_tip(_analytic(lambda r, t: 1 + 0 * r), "left", (0.01,) * 3, n_terms=20, general=True)


def test_disjoint_radii_agree():
    f = _analytic(lambda r, t: 1 - 0.5 * np.sqrt(r) * np.cos(t / 2) + r**1.5 * np.cos(1.5 * t))
    a = extract_tip(f, "left", np.geomspace(1e-3, 1e-2, 5))
    b = extract_tip(f, "left", np.geomspace(2e-2, 6e-2, 5))
    assert abs(a.d - b.d) < 1e-6 and abs(a.phi0_at_tip - b.phi0_at_tip) < 1e-6


def test_traces_of_linear_fields(coarse_limiting, geom):
    V = FESpace.build(coarse_limiting, 2)
    x1 = V.dof_coords[:, 0]
    tr = cut_traces(V, x1, geom=geom)
    np.testing.assert_allclose(tr.upper, tr.t, atol=1e-13)
    np.testing.assert_allclose(tr.lower, tr.t, atol=1e-13)
    np.testing.assert_allclose(tr.d_upper, 1.0, atol=1e-11)
    tr2 = cut_traces(V, V.dof_coords[:, 1], geom=geom)
    np.testing.assert_allclose(tr2.d_upper, 0.0, atol=1e-12)
    np.testing.assert_allclose(tr2.d_lower, 0.0, atol=1e-12)
    # the weights integrate sqrt weights exactly on (0, 1)
    assert abs(np.sum(tr.weights * np.sqrt(tr.t)) - 2 / 3) < 1e-12


@pytest.fixture(scope="module")
def expansion(coarse_limiting, geom):
    return outer_expansion(coarse_limiting, geom, 1)


@pytest.fixture(scope="module")
def expansion0(coarse_limiting, geom):
    return outer_expansion(coarse_limiting, geom, 0)


def test_limiting_mode_nontrivial(expansion):
    assert expansion.lam0 > 0
    assert expansion.limiting.gap > 1e-3
    assert expansion.tips["left"].d > 0  # sign convention when phi0(O-) ~ 0
    assert expansion.tips["left"].fit_residual < 1e-3


def test_traces_double_sided(expansion):
    tr = expansion.quadrature.traces(expansion.limiting.phi0)
    mid = (tr.t > 0.2) & (tr.t < 0.8)
    assert np.max(np.abs(tr.upper[mid] - tr.lower[mid])) > 1e-3


def test_lambda1_matches_trace_integral(expansion, geom):
    tr = expansion.quadrature.traces(expansion.limiting.phi0)
    # raw traces differ from the tip-recovered ones only near the tips
    assert expansion.lam1 == pytest.approx(lambda1_from_traces(tr, geom, expansion.lam0), rel=1e-3)
    assert expansion.lam1 == pytest.approx(expansion.lam1_solvability, rel=1e-3)


def test_corrector_orthogonality(expansion):
    assert abs(expansion.phi1.orthogonality) < 1e-8
    assert abs(expansion.phi2.orthogonality) < 1e-8


def test_lambda2_identity(expansion, geom):
    c = expansion.coefficients()
    assert c["lambda2"] - c["lambda_tilde"] == pytest.approx(predicted_excess(c, geom), abs=1e-10)
    assert c["lambda2"] >= c["lambda_tilde"]


def test_singular_solvability_constant(expansion):
    # lambda_pm = -pi d_pm, loosely on this coarse mesh
    for tip in ("left", "right"):
        d = expansion.tips[tip].d
        assert abs(expansion.lam_pm[tip] + math.pi * d) < 0.03 * math.pi * abs(d)


def test_constant_mode(expansion0, coarse_limiting):
    c = expansion0.coefficients()
    for k in ("lambda0", "lambda1", "lambda_tilde", "lambda2", "d_plus", "d_minus"):
        assert abs(c[k]) < 1e-8, k
    area = coarse_limiting.area()
    assert c["phi0_at_tip_minus"] == pytest.approx(area**-0.5, rel=1e-10)


def test_refined_mesh_oracle(coarse_limiting):
    from slitspectra.meshgen import refine_uniform

    a = solve_limiting(coarse_limiting, 1)
    b = solve_limiting(refine_uniform(coarse_limiting), 1, guess=a.lam0)
    assert abs(a.lam0 - b.lam0) / b.lam0 < 5e-4


def test_sign_reproducible(coarse_limiting):
    a = solve_limiting(coarse_limiting, 1)
    b = solve_limiting(coarse_limiting, 1)
    np.testing.assert_array_equal(a.phi0, b.phi0)
