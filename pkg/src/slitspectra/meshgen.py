"""Graded triangular meshes for the cut domain and the thin-slit domain.

Triangulation uses constrained Delaunay refinement from the ``triangle``
package.  Element sizes come from a radial size field around the two tips,
``h(x) = min(h_max, h_tip + grading * dist(x, tip))``, imposed by repeated
area-constrained refinement.  For the limiting domain the cut is inserted as
a constrained segment and its interior vertices are then duplicated, with the
lower-side triangles rewired to the copies.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path

import numpy as np
import triangle as tr

from .geometry import DomainSpec, GeometryError, SlitGeometry


class Tag(IntEnum):
    OUTER = 1
    CUT_UPPER = 2
    CUT_LOWER = 3
    SLIT = 4
    TIP_LEFT = 5
    TIP_RIGHT = 6


class MeshError(RuntimeError):
    """Mesher failure or a violated mesh invariant, with diagnostics."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


_CUT_MARKER = 7  # segment marker of the constrained cut before duplication


@dataclass(frozen=True)
class SizeField:
    """Element size controls.

    ``grading`` is the growth of the target size per unit distance from a
    tip, so neighbouring elements differ by a factor of about ``1 + grading``.
    ``curvature_fraction`` caps boundary spacing on the slit relative to the
    local curvature radius; ``boundary_segments`` fixes the number of chords
    on the outer curve (default: derived from ``h_max``).
    """

    h_max: float = 0.2
    h_tip: float = 1e-7
    grading: float = 0.4
    min_angle: float = 20.0
    tip_factor: float = 0.5
    curvature_fraction: float = 0.05
    channel_layers: int = 3
    boundary_segments: int | None = None

    def __post_init__(self):
        if not (0 < self.h_tip <= self.h_max):
            raise MeshError("need 0 < h_tip <= h_max")
        if not (0 < self.grading <= 0.5):
            raise MeshError("grading must lie in (0, 0.5] to keep size ratios <= 1.5")
        if not (0 < self.min_angle <= 33):
            raise MeshError("min_angle must lie in (0, 33] degrees")

    def outer_segments(self, domain: DomainSpec) -> int:
        if self.boundary_segments:
            return int(self.boundary_segments)
        pts = domain.boundary_polygon(256)
        perim = np.sum(np.linalg.norm(np.roll(pts, -1, axis=0) - pts, axis=1))
        return max(64, int(math.ceil(perim / self.h_max)))


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    boundary_tags: np.ndarray
    cut_twins: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    kind: str = "plain"
    eps: float = 0.0
    grading_report: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("vertices", "triangles", "boundary_edges", "boundary_tags", "cut_twins"):
            arr = np.ascontiguousarray(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def edges_with_tag(self, *tags: Tag) -> np.ndarray:
        mask = np.isin(self.boundary_tags, [int(t) for t in tags])
        return self.boundary_edges[mask]

    def lower_vertex_mask(self) -> np.ndarray:
        """True for the lower copies of duplicated cut vertices."""
        mask = np.zeros(self.n_vertices, dtype=bool)
        if len(self.cut_twins):
            mask[self.cut_twins[:, 1]] = True
        return mask

    def area(self) -> float:
        return float(np.sum(triangle_areas(self.vertices, self.triangles)))

    def same_as(self, other: "Mesh") -> bool:
        return (
            np.array_equal(self.vertices, other.vertices)
            and np.array_equal(self.triangles, other.triangles)
            and np.array_equal(self.boundary_edges, other.boundary_edges)
            and np.array_equal(self.boundary_tags, other.boundary_tags)
            and np.array_equal(self.cut_twins, other.cut_twins)
        )


def triangle_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    p = vertices[triangles]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])


def _min_angles(vertices, triangles) -> np.ndarray:
    p = vertices[triangles]
    angles = []
    for k in range(3):
        a = p[:, (k + 1) % 3] - p[:, k]
        b = p[:, (k + 2) % 3] - p[:, k]
        cos = np.sum(a * b, axis=1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
        angles.append(np.degrees(np.arccos(np.clip(cos, -1, 1))))
    return np.min(np.stack(angles, axis=1), axis=1)


def _edge_lengths(vertices, triangles) -> np.ndarray:
    p = vertices[triangles]
    return np.stack(
        [np.linalg.norm(p[:, (k + 1) % 3] - p[:, k], axis=1) for k in range(3)], axis=1
    )


# --------------------------------------------------------------------------
# Size field
# --------------------------------------------------------------------------


def _target_size(pts, h: SizeField, h_tips, extra=None):
    """Pointwise target element diameter."""
    size = np.full(len(pts), h.h_max)
    for tip_pt, ht in zip(((0.0, 0.0), (1.0, 0.0)), h_tips):
        d = np.hypot(pts[:, 0] - tip_pt[0], pts[:, 1] - tip_pt[1])
        size = np.minimum(size, ht + h.grading * d)
    if extra is not None:
        size = np.minimum(size, extra(pts))
    return size


def _refine_to_size(data: dict, h: SizeField, h_tips, extra=None, max_rounds: int = 40, flags=""):
    """Area-constrained refinement until every triangle meets its target."""
    q = f"q{h.min_angle:g}" + flags
    n_prev = -1
    for rounds in range(max_rounds):
        verts = data["vertices"]
        tris = data["triangles"]
        p = verts[tris]
        # size sampled at vertices and centroid, most restrictive wins
        samples = np.concatenate([p, p.mean(axis=1, keepdims=True)], axis=1).reshape(-1, 2)
        size = _target_size(samples, h, h_tips, extra).reshape(len(tris), 4).min(axis=1)
        target = (math.sqrt(3) / 4) * size**2
        areas = triangle_areas(verts, tris)
        ratio = float(np.max(areas / target))
        if ratio <= 1.05:
            return data, rounds
        if rounds and len(tris) == n_prev:
            # stalled: triangles held back by frozen boundary chords
            if ratio < 4.0:
                return data, rounds
            raise MeshError("size-field refinement stalled", {"area_ratio": ratio})
        n_prev = len(tris)
        inp = {k: data[k] for k in ("vertices", "triangles", "segments", "segment_markers")}
        if "holes" in data:
            inp["holes"] = data["holes"]
        inp["triangle_max_area"] = target
        data = {**tr.triangulate(inp, "rp" + q + "a"), **({"holes": data["holes"]} if "holes" in data else {})}
    raise MeshError("size-field refinement did not converge", {"rounds": max_rounds})


# --------------------------------------------------------------------------
# Boundary discretisation
# --------------------------------------------------------------------------


def _slit_side_points(geom: SlitGeometry, eps: float, side: str, spacing) -> np.ndarray:
    """Points on one slit side from the left tip to the right tip.

    The curve is parametrised by ``t = sin(pi u / 2)**2``, which makes the
    square-root tips smooth in ``u``; points are then placed so that the
    arc-length gap follows the ``spacing`` callback (a function of position
    and curvature radius).
    """
    n_dense = 200001
    u = np.linspace(0.0, 1.0, n_dense)
    t = np.sin(0.5 * np.pi * u) ** 2
    t[0], t[-1] = 0.0, 1.0
    inner = (t > 0) & (t < 1)
    y = np.zeros_like(t)
    y[inner] = eps * geom.g(t[inner], side)
    curve = np.stack([t, y], axis=1)
    du = u[1] - u[0]
    d1 = np.gradient(curve, du, axis=0)
    d2 = np.gradient(d1, du, axis=0)
    speed = np.linalg.norm(d1, axis=1)
    curvature = np.abs(d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]) / np.maximum(speed, 1e-300) ** 3
    radius = 1.0 / np.maximum(curvature, 1e-12)
    gap = spacing(curve, radius)
    density = speed / gap
    counts = np.concatenate([[0.0], np.cumsum(0.5 * (density[1:] + density[:-1]) * du)])
    n_seg = max(4, int(math.ceil(counts[-1])))
    levels = np.linspace(0.0, counts[-1], n_seg + 1)
    u_pts = np.interp(levels, counts, u)
    t_pts = np.sin(0.5 * np.pi * u_pts) ** 2
    t_pts[0], t_pts[-1] = 0.0, 1.0
    y_pts = np.zeros_like(t_pts)
    mid = slice(1, -1)
    y_pts[mid] = eps * geom.g(t_pts[mid], side)
    return np.stack([t_pts, y_pts], axis=1)


def _cut_points(h: SizeField, h_tips) -> np.ndarray:
    """Graded points on [0, 1] x {0} following the tip size field."""
    x = [0.0]
    while True:
        s = float(_target_size(np.array([[x[-1], 0.0]]), h, h_tips)[0])
        nxt = x[-1] + s
        if nxt >= 1.0 - 0.5 * float(_target_size(np.array([[1.0, 0.0]]), h, h_tips)[0]):
            break
        x.append(nxt)
    x = np.array(x + [1.0])
    # symmetric smoothing of the last gap
    return np.stack([x, np.zeros_like(x)], axis=1)


def _outer_pslg(domain: DomainSpec, h: SizeField):
    n = h.outer_segments(domain)
    pts = domain.boundary_polygon(n)
    segs = np.stack([np.arange(n), (np.arange(n) + 1) % n], axis=1)
    return pts, segs


# --------------------------------------------------------------------------
# Public mesh builders
# --------------------------------------------------------------------------


def _finish(data, kind, eps, h_tips):
    verts = np.asarray(data["vertices"], dtype=float)
    tris = np.asarray(data["triangles"], dtype=np.int64)
    segs = np.asarray(data["segments"], dtype=np.int64)
    marks = np.asarray(data["segment_markers"], dtype=np.int64).ravel()
    areas = triangle_areas(verts, tris)
    flip = areas < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]
    return verts, tris, segs, marks


def _grading_report(verts, tris) -> dict:
    lengths = _edge_lengths(verts, tris)
    hmax_el = lengths.max(axis=1)
    rep = {"min_size": float(hmax_el.min()), "max_size": float(hmax_el.max())}
    for name, pt in (("left", (0.0, 0.0)), ("right", (1.0, 0.0))):
        hits = np.where(np.all(verts == np.array(pt), axis=1))[0]
        if len(hits):
            touch = np.any(tris == hits[0], axis=1)
            rep[f"tip_size_{name}"] = float(hmax_el[touch].max())
    rep["min_angle"] = float(_min_angles(verts, tris).min())
    return rep


def mesh_limiting(domain: DomainSpec, geom: SlitGeometry, h: SizeField = SizeField()) -> Mesh:
    """Mesh of the domain with the double-sided cut along [0,1] x {0}."""
    domain.validate()
    h_tips = (h.h_tip, h.h_tip)
    opts, osegs = _outer_pslg(domain, h)
    cut = _cut_points(h, h_tips)
    n0 = len(opts)
    cidx = n0 + np.arange(len(cut))
    csegs = np.stack([cidx[:-1], cidx[1:]], axis=1)
    data = {
        "vertices": np.vstack([opts, cut]),
        "segments": np.vstack([osegs, csegs]),
        "segment_markers": np.concatenate(
            [np.full(len(osegs), int(Tag.OUTER)), np.full(len(csegs), _CUT_MARKER)]
        ),
    }
    data = tr.triangulate(data, f"pq{h.min_angle:g}")
    data, _ = _refine_to_size(data, h, h_tips)
    verts, tris, segs, marks = _finish(data, "limiting", 0.0, h_tips)
    mesh = _duplicate_cut(verts, tris, segs, marks)
    mesh = replace(mesh, grading_report=_grading_report(mesh.vertices, mesh.triangles))
    check_mesh(mesh, h.min_angle)
    return mesh


def _duplicate_cut(verts, tris, segs, marks) -> Mesh:
    cut_segs = segs[marks == _CUT_MARKER]
    cut_vertices = np.unique(cut_segs)
    xs = verts[cut_vertices]
    if np.any(xs[:, 1] != 0.0):
        raise MeshError("cut vertices left the line x2 = 0")
    interior = cut_vertices[(xs[:, 0] > 0.0) & (xs[:, 0] < 1.0)]
    n = len(verts)
    twin = {int(v): n + k for k, v in enumerate(interior)}
    new_verts = np.vstack([verts, verts[interior]])
    centroid_y = verts[tris].mean(axis=1)[:, 1]
    tris = tris.copy()
    lower = centroid_y < 0
    is_dup = np.zeros(n, dtype=bool)
    is_dup[interior] = True
    lut = np.arange(n)
    lut[interior] = [twin[int(v)] for v in interior]
    sub = tris[lower]
    sub = np.where(is_dup[sub], lut[sub], sub)
    tris[lower] = sub

    edges, tags = [], []
    for (i, j), m in zip(segs, marks):
        if m == _CUT_MARKER:
            edges.append((i, j))
            tags.append(Tag.CUT_UPPER)
            edges.append((twin.get(int(i), i), twin.get(int(j), j)))
            tags.append(Tag.CUT_LOWER)
        else:
            edges.append((i, j))
            tags.append(Tag(int(m)))
    twins = np.array([[v, twin[int(v)]] for v in interior], dtype=np.int64).reshape(-1, 2)
    order = np.argsort(new_verts[twins[:, 0], 0], kind="stable") if len(twins) else []
    return Mesh(
        vertices=new_verts,
        triangles=tris,
        boundary_edges=np.array(edges, dtype=np.int64),
        boundary_tags=np.array([int(t) for t in tags], dtype=np.int64),
        cut_twins=twins[order],
        kind="limiting",
    )


def check_slit_fits(domain: DomainSpec, geom: SlitGeometry, eps: float) -> None:
    t = np.linspace(1e-6, 1 - 1e-6, 2001)
    pts = np.concatenate(
        [np.stack([t, eps * geom.g(t, s)], axis=1) for s in ("+", "-")], axis=0
    )
    if eps <= 0:
        raise GeometryError("eps must be positive")
    # slit must keep a margin from the outer boundary
    n = 4096
    bnd = domain.boundary_polygon(n)
    d = np.min(
        np.hypot(pts[::50, None, 0] - bnd[None, :, 0], pts[::50, None, 1] - bnd[None, :, 1])
    )
    if not np.all(domain.contains(pts)) or d < 0.25 * domain.clearance:
        raise GeometryError(f"eps = {eps} too large: slit closure leaves the domain")


def mesh_perturbed(
    domain: DomainSpec, geom: SlitGeometry, eps: float, h: SizeField = SizeField()
) -> Mesh:
    """Mesh of the domain with the thin slit removed."""
    domain.validate()
    check_slit_fits(domain, geom, eps)
    h_tips = tuple(
        min(h.h_tip, h.tip_factor * (eps * geom.tip_amplitude(t)) ** 2) for t in ("left", "right")
    )

    def channel(pts):
        # element layers across the slit width near the slit
        x = np.clip(pts[:, 0], 1e-12, 1 - 1e-12)
        width = eps * (geom.g(x, "+") - geom.g(x, "-"))
        near = (pts[:, 0] > 0) & (pts[:, 0] < 1) & (np.abs(pts[:, 1]) < 2 * width + 1e-300)
        out = np.full(len(pts), np.inf)
        out[near] = np.maximum(width[near] / h.channel_layers, 1e-300)
        return out

    def spacing(curve, radius):
        # boundary chords are frozen, so sample finer than the interior target
        size = 0.6 * _target_size(curve, h, h_tips, channel)
        return np.minimum(size, h.curvature_fraction * radius)

    upper = _slit_side_points(geom, eps, "+", spacing)
    lower = _slit_side_points(geom, eps, "-", spacing)
    slit = np.vstack([upper, lower[-2:0:-1]])
    m = len(slit)
    opts, osegs = _outer_pslg(domain, h)
    n0 = len(opts)
    sidx = n0 + np.arange(m)
    ssegs = np.stack([sidx, np.roll(sidx, -1)], axis=1)
    mids = 0.5 * (slit + np.roll(slit, -1, axis=0))
    smarks = np.full(m, int(Tag.SLIT))
    smarks[mids[:, 0] < geom.t0] = int(Tag.TIP_LEFT)
    smarks[mids[:, 0] > 1 - geom.t0] = int(Tag.TIP_RIGHT)
    hole = np.array([[0.5, 0.5 * eps * (geom.g(np.array([0.5]), "+")[0] + geom.g(np.array([0.5]), "-")[0])]])
    data = {
        "vertices": np.vstack([opts, slit]),
        "segments": np.vstack([osegs, ssegs]),
        "segment_markers": np.concatenate([np.full(len(osegs), int(Tag.OUTER)), smarks]),
        "holes": hole,
    }
    # no Steiner points on the slit chords: every slit vertex lies on the curve
    out = tr.triangulate(data, f"pq{h.min_angle:g}Y")
    out["holes"] = hole
    out, _ = _refine_to_size(out, h, h_tips, channel, flags="Y")
    verts, tris, segs, marks = _finish(out, "perturbed", eps, h_tips)
    mesh = Mesh(
        vertices=verts,
        triangles=tris,
        boundary_edges=segs,
        boundary_tags=marks,
        kind="perturbed",
        eps=float(eps),
    )
    mesh = replace(mesh, grading_report=_grading_report(verts, tris))
    check_mesh(mesh, h.min_angle, geom=geom)
    return mesh


def mesh_disk(radius: float = 1.0, h_max: float = 0.2, min_angle: float = 25.0) -> Mesh:
    """Quasi-uniform mesh of a disk (no slit), used for calibration."""
    n = max(16, int(math.ceil(2 * math.pi * radius / h_max)))
    s = 2 * np.pi * np.arange(n) / n
    pts = radius * np.stack([np.cos(s), np.sin(s)], axis=1)
    segs = np.stack([np.arange(n), (np.arange(n) + 1) % n], axis=1)
    area = (math.sqrt(3) / 4) * h_max**2
    out = tr.triangulate(
        {"vertices": pts, "segments": segs, "segment_markers": np.full(n, int(Tag.OUTER))},
        f"pq{min_angle:g}a{area:.12g}",
    )
    verts, tris, segs, marks = _finish(out, "plain", 0.0, None)
    mesh = Mesh(verts, tris, segs, marks, kind="plain")
    return replace(mesh, grading_report=_grading_report(verts, tris))


# --------------------------------------------------------------------------
# Uniform refinement
# --------------------------------------------------------------------------


def slit_midpoints(geom: SlitGeometry, eps: float, p0: np.ndarray, p1: np.ndarray) -> np.ndarray:
    """Points on the slit curve halfway (in the tip-regular parameter) between chord ends."""

    def param(p):
        return (2 / np.pi) * np.arcsin(np.sqrt(np.clip(p[:, 0], 0.0, 1.0)))

    def resid(p, side):
        x = np.clip(p[:, 0], 0.0, 1.0)
        return np.abs(p[:, 1] - eps * geom.g(x, side))

    plus = np.maximum(resid(p0, "+"), resid(p1, "+")) <= np.maximum(resid(p0, "-"), resid(p1, "-"))
    u = 0.5 * (param(p0) + param(p1))
    t = np.sin(0.5 * np.pi * u) ** 2
    y = eps * np.where(plus, geom.g(t, "+"), geom.g(t, "-"))
    return np.stack([t, y], axis=1)


def refine_uniform(mesh: Mesh, project=None, slit: SlitGeometry | None = None) -> Mesh:
    """Split every triangle into four through its edge midpoints.

    ``project`` optionally maps midpoints of OUTER edges onto a curved
    boundary; without it the refined meshes are nested and cover the same
    polygon.  For perturbed meshes, passing ``slit`` puts the new slit
    vertices on the slit curve.
    """
    verts = mesh.vertices
    tris = mesh.triangles
    n = len(verts)
    e = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    key = np.sort(e, axis=1)
    uniq, inv = np.unique(key, axis=0, return_inverse=True)
    inv = inv.ravel()
    mids = 0.5 * (verts[uniq[:, 0]] + verts[uniq[:, 1]])
    m01, m12, m20 = (n + inv[k * len(tris) : (k + 1) * len(tris)] for k in range(3))
    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
    new_tris = np.concatenate(
        [
            np.stack([a, m01, m20], axis=1),
            np.stack([m01, b, m12], axis=1),
            np.stack([m20, m12, c], axis=1),
            np.stack([m01, m12, m20], axis=1),
        ]
    )
    lookup = {(int(i), int(j)): n + k for k, (i, j) in enumerate(uniq)}

    def mid(i, j):
        return lookup[(min(i, j), max(i, j))]

    bnd, tags = [], []
    for (i, j), t in zip(mesh.boundary_edges, mesh.boundary_tags):
        mij = mid(int(i), int(j))
        bnd += [(i, mij), (mij, j)]
        tags += [t, t]
    new_verts = np.vstack([verts, mids])
    if project is not None:
        outer = np.array(
            [mid(int(i), int(j)) for (i, j) in mesh.edges_with_tag(Tag.OUTER)], dtype=np.int64
        )
        if len(outer):
            new_verts[outer] = project(new_verts[outer])
    if slit is not None and mesh.kind == "perturbed":
        sedges = mesh.edges_with_tag(Tag.SLIT, Tag.TIP_LEFT, Tag.TIP_RIGHT)
        idx = np.array([mid(int(i), int(j)) for i, j in sedges], dtype=np.int64)
        new_verts[idx] = slit_midpoints(slit, mesh.eps, verts[sedges[:, 0]], verts[sedges[:, 1]])
        if np.any(triangle_areas(new_verts, new_tris) <= 0):
            raise MeshError("slit projection inverted a triangle")
    twins = [tuple(p) for p in mesh.cut_twins]
    if len(twins):
        up = mesh.edges_with_tag(Tag.CUT_UPPER)
        lo = mesh.edges_with_tag(Tag.CUT_LOWER)
        tmap = dict(twins)
        lower_edges = {(min(i, j), max(i, j)) for i, j in lo}
        for i, j in up:
            ii, jj = tmap.get(int(i), int(i)), tmap.get(int(j), int(j))
            if (min(ii, jj), max(ii, jj)) not in lower_edges:
                raise MeshError("cut edge without lower twin")
            twins.append((mid(int(i), int(j)), mid(ii, jj)))
        twins = np.array(twins, dtype=np.int64)
        twins = twins[np.argsort(new_verts[twins[:, 0], 0], kind="stable")]
    else:
        twins = np.zeros((0, 2), dtype=np.int64)
    out = Mesh(
        vertices=new_verts,
        triangles=new_tris,
        boundary_edges=np.array(bnd, dtype=np.int64),
        boundary_tags=np.array(tags, dtype=np.int64),
        cut_twins=twins,
        kind=mesh.kind,
        eps=mesh.eps,
    )
    return replace(out, grading_report=_grading_report(new_verts, new_tris))


def mesh_ladder(mesh: Mesh, levels: int, project=None, slit: SlitGeometry | None = None) -> list[Mesh]:
    out = [mesh]
    for _ in range(levels - 1):
        out.append(refine_uniform(out[-1], project, slit))
    return out


# --------------------------------------------------------------------------
# Invariants
# --------------------------------------------------------------------------


def check_mesh(mesh: Mesh, min_angle: float = 20.0, geom: SlitGeometry | None = None) -> dict:
    """Run the invariant suite; raise :class:`MeshError` on the first failure."""
    verts, tris = mesh.vertices, mesh.triangles
    areas = triangle_areas(verts, tris)
    if np.any(areas <= 0):
        bad = int(np.argmin(areas))
        raise MeshError("non-positive triangle orientation", {"triangle": bad, "area": float(areas[bad])})
    e = np.sort(np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]]), axis=1)
    uniq, counts = np.unique(e, axis=0, return_counts=True)
    if np.any(counts > 2):
        raise MeshError("edge shared by more than two triangles")
    boundary = {tuple(x) for x in uniq[counts == 1]}
    tagged = {tuple(sorted(map(int, x))) for x in mesh.boundary_edges}
    if boundary != tagged:
        raise MeshError(
            "boundary edges mismatch tagged edges",
            {"untagged": len(boundary - tagged), "spurious": len(tagged - boundary)},
        )
    angle = float(_min_angles(verts, tris).min())
    if angle < min_angle - 1e-9:
        raise MeshError("minimum angle below quality bound", {"min_angle": angle})
    report = {"min_angle": angle, "n_vertices": len(verts), "n_triangles": len(tris)}
    if mesh.kind == "limiting":
        tw = mesh.cut_twins
        if len(tw) == 0:
            raise MeshError("limiting mesh has empty twin map")
        if not np.array_equal(verts[tw[:, 0]], verts[tw[:, 1]]):
            raise MeshError("twin vertices differ in position")
        on_cut = (verts[:, 1] == 0) & (verts[:, 0] > 0) & (verts[:, 0] < 1)
        if np.count_nonzero(on_cut) != 2 * len(tw):
            raise MeshError("interior cut vertices not exactly duplicated")
        for pt in ((0.0, 0.0), (1.0, 0.0)):
            if np.count_nonzero(np.all(verts == np.array(pt), axis=1)) != 1:
                raise MeshError("tip vertex missing or duplicated", {"tip": pt})
        upper, lower = set(tw[:, 0].tolist()), set(tw[:, 1].tolist())
        cy = verts[tris].mean(axis=1)[:, 1]
        uses_lower = np.isin(tris, list(lower)).any(axis=1)
        uses_upper = np.isin(tris, list(upper)).any(axis=1)
        if np.any(uses_lower & (cy > 0)) or np.any(uses_upper & (cy < 0)):
            raise MeshError("connectivity crosses the cut")
        report["n_twins"] = len(tw)
    if mesh.kind == "perturbed" and geom is not None:
        x = verts[:, 0]
        inner = (x > 0) & (x < 1)
        xc = np.clip(x[inner], 1e-15, 1 - 1e-15)
        y = verts[inner, 1]
        gp = mesh.eps * geom.g(xc, "+")
        gm = mesh.eps * geom.g(xc, "-")
        tol = 1e-12
        inside = (y < gp - tol * (1 + np.abs(gp))) & (y > gm + tol * (1 + np.abs(gm)))
        if np.any(inside):
            raise MeshError("vertex strictly inside the slit", {"count": int(inside.sum())})
    return report


# --------------------------------------------------------------------------
# Plain-text I/O
# --------------------------------------------------------------------------

_HEADER = "slitspectra-mesh v1"


def write_mesh(mesh: Mesh, path) -> None:
    """Write the ``slitspectra-mesh v1`` text format.

    Layout: header, ``kind <kind> <eps>``, ``<nv>`` then ``x y`` lines, ``<nt>`` then ``i j k``
    lines, ``<nb>`` then ``i j TAG`` lines, ``<ntw>`` then ``i i'`` lines.
    Coordinates are written with ``repr`` so that reading back is bit-exact.
    """
    buf = io.StringIO()
    buf.write(_HEADER + "\n")
    buf.write(f"kind {mesh.kind} {float(mesh.eps)!r}\n")
    buf.write(f"{mesh.n_vertices}\n")
    for x, y in mesh.vertices:
        buf.write(f"{float(x)!r} {float(y)!r}\n")
    buf.write(f"{mesh.n_triangles}\n")
    for i, j, k in mesh.triangles:
        buf.write(f"{i} {j} {k}\n")
    buf.write(f"{len(mesh.boundary_edges)}\n")
    for (i, j), t in zip(mesh.boundary_edges, mesh.boundary_tags):
        buf.write(f"{i} {j} {Tag(int(t)).name}\n")
    buf.write(f"{len(mesh.cut_twins)}\n")
    for i, j in mesh.cut_twins:
        buf.write(f"{i} {j}\n")
    Path(path).write_text(buf.getvalue())


def read_mesh(path) -> Mesh:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != _HEADER:
        raise MeshError("not a slitspectra-mesh v1 file")
    pos, kind, eps = 1, None, 0.0
    if lines[1].startswith("kind"):
        _, kind, eps = lines[1].split()
        eps, pos = float(eps), 2

    def block(parse):
        nonlocal pos
        count = int(lines[pos])
        rows = [parse(lines[pos + 1 + k].split()) for k in range(count)]
        pos += 1 + count
        return rows

    verts = np.array(block(lambda p: [float(p[0]), float(p[1])]), dtype=float).reshape(-1, 2)
    tris = np.array(block(lambda p: [int(v) for v in p]), dtype=np.int64).reshape(-1, 3)
    bnd = block(lambda p: (int(p[0]), int(p[1]), int(Tag[p[2]])))
    twins = np.array(block(lambda p: [int(p[0]), int(p[1])]), dtype=np.int64).reshape(-1, 2)
    edges = np.array([b[:2] for b in bnd], dtype=np.int64).reshape(-1, 2)
    tags = np.array([b[2] for b in bnd], dtype=np.int64)
    if kind is not None:
        pass
    elif len(twins):
        kind = "limiting"
    elif np.any(np.isin(tags, [Tag.SLIT, Tag.TIP_LEFT, Tag.TIP_RIGHT])):
        kind = "perturbed"
    else:
        kind = "plain"
    return Mesh(verts, tris, edges, tags, twins, kind=kind, eps=eps,
                grading_report=_grading_report(verts, tris))
