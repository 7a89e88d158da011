import numpy as np
import pytest

from slitspectra.geometry import DomainSpec
from slitspectra.meshgen import (
    MeshError,
    SizeField,
    Tag,
    check_mesh,
    check_slit_fits,
    mesh_disk,
    mesh_ladder,
    mesh_limiting,
    read_mesh,
    refine_uniform,
    triangle_areas,
    write_mesh,
)


def test_limiting_mesh_invariants(coarse_limiting):
    rep = check_mesh(coarse_limiting, 20.0)
    assert rep["n_twins"] > 0
    m = coarse_limiting
    assert np.all(triangle_areas(m.vertices, m.triangles) > 0)
    # twins share positions and sit on x2 = 0 strictly between the tips
    tw = m.cut_twins
    xs = m.vertices[tw[:, 0]]
    assert np.all(xs[:, 1] == 0) and np.all((xs[:, 0] > 0) & (xs[:, 0] < 1))


def test_limiting_tags_cover_both_sides(coarse_limiting):
    up = coarse_limiting.edges_with_tag(Tag.CUT_UPPER)
    lo = coarse_limiting.edges_with_tag(Tag.CUT_LOWER)
    assert len(up) == len(lo) > 0
    assert len(coarse_limiting.edges_with_tag(Tag.OUTER)) > 0


def test_perturbed_mesh_keeps_slit_out(coarse_perturbed, geom):
    check_mesh(coarse_perturbed, 20.0, geom=geom)
    slit = coarse_perturbed.edges_with_tag(Tag.SLIT, Tag.TIP_LEFT, Tag.TIP_RIGHT)
    assert len(slit) > 0


def test_tip_grading(coarse_limiting):
    g = coarse_limiting.grading_report
    assert g["tip_size_left"] < 1e-5 and g["tip_size_right"] < 1e-5
    # sizes are area-equivalent diameters, so the longest edge may exceed h_max a little
    assert g["max_size"] <= 0.3 * 1.5


def test_same_outer_polygon_for_both_kinds(coarse_limiting, coarse_perturbed):
    a = coarse_limiting.vertices[np.unique(coarse_limiting.edges_with_tag(Tag.OUTER))]
    b = coarse_perturbed.vertices[np.unique(coarse_perturbed.edges_with_tag(Tag.OUTER))]
    key = lambda v: v[np.lexsort(v.T)]
    np.testing.assert_array_equal(key(a), key(b))


def test_deterministic(domain, geom, coarse_size):
    a = mesh_limiting(domain, geom, coarse_size)
    b = mesh_limiting(domain, geom, coarse_size)
    assert a.same_as(b)


def test_uniform_refinement_nests(coarse_limiting):
    fine = refine_uniform(coarse_limiting)
    assert fine.n_triangles == 4 * coarse_limiting.n_triangles
    # coarse vertices are kept in order
    np.testing.assert_array_equal(fine.vertices[: coarse_limiting.n_vertices], coarse_limiting.vertices)
    check_mesh(fine, 20.0)
    np.testing.assert_allclose(fine.area(), coarse_limiting.area(), rtol=1e-12)


def test_ladder_projects_onto_curved_boundary():
    d = DomainSpec(kind="circle", center=(0.0, 0.0), semi_axes=(1.0, 1.0))
    m = mesh_disk(1.0, 0.4)
    ladder = mesh_ladder(m, 3, project=d.project)
    outer = ladder[-1].vertices[np.unique(ladder[-1].edges_with_tag(Tag.OUTER))]
    np.testing.assert_allclose(np.linalg.norm(outer, axis=1), 1.0, atol=1e-12)
    areas = [x.area() for x in ladder]
    assert areas[0] < areas[1] < areas[2] < np.pi


def test_io_roundtrip(tmp_path, coarse_perturbed):
    p = tmp_path / "m.mesh"
    write_mesh(coarse_perturbed, p)
    back = read_mesh(p)
    assert back.same_as(coarse_perturbed)
    assert back.kind == "perturbed" and back.eps == coarse_perturbed.eps


def test_slit_must_fit(domain, geom):
    with pytest.raises((MeshError, Exception)):
        check_slit_fits(domain, geom, 5.0)


def test_size_field_validation():
    with pytest.raises(MeshError):
        SizeField(grading=0.9)
    with pytest.raises(MeshError):
        SizeField(h_tip=1.0, h_max=0.1)
