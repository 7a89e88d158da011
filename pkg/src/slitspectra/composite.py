"""Uniform composite approximant and its residual on the perturbed domain.

``Phi = (1 - chi_+)(1 - chi_-) U_N + chi_+ V_N^+ + chi_- V_N^-`` where
``U_N = sum_{j<=N} eps^j phi_j`` is the outer partial sum, ``V_N`` the inner
partial sums and ``chi = chi(r / eps)`` a quintic cutoff that switches off
across ``eps < r < 2 eps``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from .fem import FESpace, PointLocator, assemble
from .geometry import TIPS, GeometryError, SlitGeometry, smoothstep_cutoff, tip_polar
from .inner import build_inner_fields
from .kernels import p2_basis
from .meshgen import Mesh, Tag
from .outer import OuterExpansion

MAX_N = 2


@dataclass(eq=False)
class CompositeApproximant:
    eps: float
    N: int
    outer: OuterExpansion
    inner: dict
    geom: SlitGeometry
    lam_partial: float
    _locator: PointLocator | None = field(default=None, repr=False)

    @property
    def locator(self) -> PointLocator:
        if self._locator is None:
            self._locator = PointLocator(self.outer.limiting.space.mesh)
        return self._locator


def inner_fields_for(outer: OuterExpansion, geom: SlitGeometry) -> dict:
    """Inner fields through order 2 from the outer tip fits."""
    data = {}
    for tip in TIPS:
        c = outer.tips[tip].coefficients
        data[tip] = (c.get("phi2_cos0", 0.0), c.get("phi1_cos1", 0.0), c.get("phi0_cos2", 0.0))
    return build_inner_fields(outer.tips, geom, data)


def build_composite(outer: OuterExpansion, geom: SlitGeometry, eps: float, N: int,
                    inner: dict | None = None) -> CompositeApproximant:
    if not 0 <= N <= MAX_N:
        raise ValueError(f"composite order N must lie in 0..{MAX_N}")
    if 4 * eps >= 1.0:
        # the blending discs r < 2 eps of the two tips must stay apart
        raise ValueError("cutoff discs of the two tips overlap")
    lams = [outer.lam0, outer.lam1, outer.lam2]
    lam = sum(eps**j * lams[j] for j in range(N + 1))
    inner = inner or inner_fields_for(outer, geom)
    return CompositeApproximant(eps, N, outer, inner, geom, lam)


def inside_slit(geom: SlitGeometry, eps: float, x, tol: float = 1e-12) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    out = np.zeros(len(x), dtype=bool)
    mid = (x[:, 0] > 0) & (x[:, 0] < 1)
    t = x[mid, 0]
    up, lo = eps * geom.g(t, "+"), eps * geom.g(t, "-")
    slack = tol * (1.0 + up - lo)
    out[mid] = (x[mid, 1] < up - slack) & (x[mid, 1] > lo + slack)
    return out


def outer_sum(c: CompositeApproximant, x) -> np.ndarray:
    """``sum_{j<=N} eps^j phi_j`` with the side picked by the sign of ``x2``."""
    ex = c.outer
    space = ex.limiting.space
    side = np.where(x[:, 1] >= 0, 1.0, -1.0)
    lower = x[:, 1] < 0
    fields = [ex.limiting.phi0, ex.phi1, ex.phi2]
    elem, lam = c.locator.locate(x, side)
    out = np.zeros(len(x))
    for j in range(c.N + 1):
        f = fields[j]
        coeffs = f if j == 0 else f.coeffs
        vals = _eval_located(space, coeffs, elem, lam)
        if j > 0:
            vals = vals + f.singular_values(x, lower)
        out += c.eps**j * vals
    return out


def _eval_located(space: FESpace, u, elem, lam):
    basis = p2_basis(lam) if space.order == 2 else lam
    return np.sum(basis * u[space.elem_dofs[elem]], axis=1)


def composite_eval(c: CompositeApproximant, x, check: bool = True) -> np.ndarray:
    """Blended value at points of the perturbed domain.

    ``check = False`` admits points a chord's sagitta inside the slit, such
    as the midpoint nodes of the polygonal slit boundary.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if check and np.any(inside_slit(c.geom, c.eps, x)):
        raise GeometryError("evaluation point inside the open slit")
    chi = {}
    for tip in TIPS:
        r, _ = tip_polar(x, tip)
        chi[tip] = smoothstep_cutoff(r, c.eps)
    w_out = (1.0 - chi["left"]) * (1.0 - chi["right"])
    out = np.zeros(len(x))
    need = w_out > 0
    if need.any():
        out[need] = w_out[need] * outer_sum(c, x[need])
    for tip in TIPS:
        act = chi[tip] > 0
        if act.any():
            v = c.inner[tip].at(c.geom, c.eps, x[act], order=c.N, check=False)
            out[act] += chi[tip][act] * v
    return out


# --------------------------------------------------------------------------
# Residual
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ResidualReport:
    eps: float
    N: int
    dual_norm: float
    flux_defect: float
    n_dofs: int


def _p2_gradients(coords, lam):
    """Gradients of the six P2 basis functions at barycentric points, ``(e, q, 6, 2)``."""
    p0, p1, p2 = coords[:, 0], coords[:, 1], coords[:, 2]
    det = (p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1]) - (p1[:, 1] - p0[:, 1]) * (p2[:, 0] - p0[:, 0])
    G = np.stack(
        [
            np.stack([p1[:, 1] - p2[:, 1], p2[:, 0] - p1[:, 0]], axis=1),
            np.stack([p2[:, 1] - p0[:, 1], p0[:, 0] - p2[:, 0]], axis=1),
            np.stack([p0[:, 1] - p1[:, 1], p1[:, 0] - p0[:, 0]], axis=1),
        ],
        axis=1,
    ) / det[:, None, None]
    out = np.empty(lam.shape[:2] + (6, 2))
    for i in range(3):
        out[:, :, i] = (4 * lam[:, :, i, None] - 1) * G[:, None, i]
    for a, (i, j) in enumerate(((0, 1), (1, 2), (2, 0))):
        out[:, :, 3 + a] = 4 * (lam[:, :, i, None] * G[:, None, j] + lam[:, :, j, None] * G[:, None, i])
    return out


def flux_defect(space: FESpace, u: np.ndarray, nq: int = 4) -> float:
    """``L2`` norm of the normal derivative of ``u`` over the slit boundary."""
    mesh = space.mesh
    edges = mesh.edges_with_tag(Tag.SLIT, Tag.TIP_LEFT, Tag.TIP_RIGHT)
    if len(edges) == 0:
        return 0.0
    tris = mesh.triangles
    key = {}
    for e, t in enumerate(tris):
        for a, b in ((0, 1), (1, 2), (2, 0)):
            key[(min(t[a], t[b]), max(t[a], t[b]))] = e
    owner = np.array([key[(min(a, b), max(a, b))] for a, b in edges])
    coords = mesh.vertices[tris[owner]]
    p0, p1 = mesh.vertices[edges[:, 0]], mesh.vertices[edges[:, 1]]
    s, w = np.polynomial.legendre.leggauss(nq)
    s, w = 0.5 * (s + 1), 0.5 * w
    pts = p0[:, None] + s[None, :, None] * (p1 - p0)[:, None]
    # barycentric coordinates of the edge points in the owning triangle
    v0 = coords[:, 0][:, None]
    T = np.stack([coords[:, 1] - coords[:, 0], coords[:, 2] - coords[:, 0]], axis=2)
    l12 = np.linalg.solve(T[:, None], (pts - v0)[..., None])[..., 0]
    lam = np.concatenate([1 - l12.sum(axis=2, keepdims=True), l12], axis=2)
    grads = _p2_gradients(coords, lam)
    grad_u = np.einsum("eqad,ea->eqd", grads, u[space.elem_dofs[owner]])
    t = p1 - p0
    L = np.linalg.norm(t, axis=1)
    n = np.stack([t[:, 1], -t[:, 0]], axis=1) / L[:, None]
    # orient away from the owning triangle
    cent = coords.mean(axis=1)
    flip = np.einsum("ed,ed->e", n, cent - 0.5 * (p0 + p1)) > 0
    n[flip] *= -1
    dn = np.einsum("eqd,ed->eq", grad_u, n)
    return float(np.sqrt(np.sum(w[None] * L[:, None] * dn**2)))


class DualNorm:
    """``||r||_* = sqrt(r^T (K + M)^-1 r)``, the discrete ``H^1`` dual norm."""

    def __init__(self, K, M):
        self.lu = spla.splu((K + M).tocsc(), permc_spec="MMD_AT_PLUS_A",
                            diag_pivot_thresh=0.0, options={"SymmetricMode": True})

    def __call__(self, r: np.ndarray) -> float:
        return float(np.sqrt(max(r @ self.lu.solve(r), 0.0)))


def composite_residual(c: CompositeApproximant, mesh_eps: Mesh, space: FESpace | None = None,
                       operators=None, dual: DualNorm | None = None) -> ResidualReport:
    """Weak residual ``a(Phi, v) - lam m(Phi, v)`` over the perturbed P2 space.

    ``Phi`` enters through its nodal interpolant.  Precomputed ``space``,
    ``operators = (K, M)`` and ``dual`` may be shared between calls on the
    same mesh.
    """
    if mesh_eps.kind != "perturbed":
        raise ValueError("residual needs a perturbed-domain mesh")
    space = space or FESpace.build(mesh_eps, 2)
    K, M = operators or assemble(mesh_eps, 2, space)
    Km = K.matrix if hasattr(K, "matrix") else K
    Mm = M.matrix if hasattr(M, "matrix") else M
    phi = composite_eval(c, space.dof_coords, check=False)
    r = Km @ phi - c.lam_partial * (Mm @ phi)
    dual = dual or DualNorm(Km, Mm)
    return ResidualReport(c.eps, c.N, dual(r), flux_defect(space, phi), space.n_dofs)
