import numpy as np
import pytest

from slitspectra.composite import (
    DualNorm,
    build_composite,
    composite_eval,
    composite_residual,
    flux_defect,
    inner_fields_for,
    inside_slit,
    outer_sum,
)
from slitspectra.fem import FESpace, assemble, eig_near
from slitspectra.geometry import GeometryError
from slitspectra.outer import outer_expansion

EPS = 0.08


@pytest.fixture(scope="module")
def expansion(coarse_limiting, geom):
    return outer_expansion(coarse_limiting, geom, 1)


@pytest.fixture(scope="module")
def perturbed_ops(coarse_perturbed):
    V = FESpace.build(coarse_perturbed, 2)
    K, M = assemble(coarse_perturbed, 2, V)
    return V, K, M, DualNorm(K.matrix, M.matrix)


def test_inside_slit(geom):
    pts = np.array([[0.5, 0.0], [0.5, 1.0], [-0.1, 0.0], [0.5, EPS * geom.g(0.5, "+") + 1e-6]])
    assert inside_slit(geom, EPS, pts).tolist() == [True, False, False, False]


def test_rejects_points_in_slit(expansion, geom):
    c = build_composite(expansion, geom, EPS, 1)
    with pytest.raises(GeometryError):
        composite_eval(c, np.array([[0.5, 0.0]]))


def test_argument_checks(expansion, geom):
    with pytest.raises(ValueError):
        build_composite(expansion, geom, EPS, 3)
    with pytest.raises(ValueError):
        build_composite(expansion, geom, 0.3, 0)


def test_blend_regions(expansion, geom):
    c = build_composite(expansion, geom, EPS, 2)
    inner = inner_fields_for(expansion, geom)
    near = np.array([[-0.5 * EPS, 0.01 * EPS]])
    np.testing.assert_allclose(composite_eval(c, near), inner["left"].at(geom, EPS, near, order=2), rtol=1e-12)
    far = np.array([[0.5, 0.6], [-0.4, -0.3]])
    np.testing.assert_allclose(composite_eval(c, far), outer_sum(c, far), rtol=1e-12)


def test_partial_eigenvalue(expansion, geom):
    c = build_composite(expansion, geom, EPS, 1)
    assert c.lam_partial == pytest.approx(expansion.lam0 + EPS * expansion.lam1)


def test_dual_norm_of_exact_eigenvector_vanishes(perturbed_ops):
    V, K, M, dual = perturbed_ops
    p = eig_near(K, M, 2.0, 1, coords=V.dof_coords)[0]
    r = K.matrix @ p.coeffs - p.lam * (M.matrix @ p.coeffs)
    assert dual(r) < 1e-8
    assert dual(M.matrix @ V.ones()) > 0


def test_flux_defect_of_linear_fields(perturbed_ops):
    V = perturbed_ops[0]
    assert flux_defect(V, V.ones()) < 1e-9  # rounding amplified by 1e-7 tip elements
    assert flux_defect(V, V.dof_coords[:, 0]) > 0


def test_residual_decreases_with_order(expansion, geom, coarse_perturbed, perturbed_ops):
    V, K, M, dual = perturbed_ops
    res = [composite_residual(build_composite(expansion, geom, EPS, N), coarse_perturbed, V, (K, M), dual)
           for N in (0, 1, 2)]
    assert res[0].dual_norm > res[1].dual_norm > res[2].dual_norm
    assert all(r.n_dofs == V.n_dofs for r in res)


def test_residual_needs_perturbed_mesh(expansion, geom, coarse_limiting):
    c = build_composite(expansion, geom, EPS, 0)
    with pytest.raises(ValueError):
        composite_residual(c, coarse_limiting)
