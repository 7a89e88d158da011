"""P1/P2 Lagrange finite elements: spaces, assembly, solves and eigenpairs."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial import cKDTree

from . import kernels
from .meshgen import Mesh, Tag, triangle_areas


class AssemblyError(ValueError):
    pass


class CompatibilityError(ArithmeticError):
    """Load not orthogonal to the kernel of ``K - lambda M``."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (compatibility residual {residual:.3e})")
        self.residual = residual


class ConvergenceError(ArithmeticError):
    def __init__(self, message: str, history: list[float]):
        super().__init__(message)
        self.history = history


# --------------------------------------------------------------------------
# Spaces
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FESpace:
    """Continuous Lagrange space of order 1 or 2 on a mesh.

    P2 degrees of freedom are the mesh vertices followed by one per edge, the
    edges being the sorted unique vertex pairs.
    """

    mesh: Mesh
    order: int
    elem_dofs: np.ndarray
    dof_coords: np.ndarray
    edges: np.ndarray
    _edge_index: dict = field(repr=False)

    @classmethod
    def build(cls, mesh: Mesh, order: int = 2) -> "FESpace":
        if order not in (1, 2):
            raise ValueError("order must be 1 or 2")
        tris = mesh.triangles
        nv = mesh.n_vertices
        if order == 1:
            return cls(mesh, 1, tris.copy(), mesh.vertices.copy(), np.zeros((0, 2), np.int64), {})
        loc = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
        key = np.sort(loc, axis=1)
        edges, inv = np.unique(key, axis=0, return_inverse=True)
        inv = inv.ravel().reshape(3, len(tris)).T
        elem = np.concatenate([tris, nv + inv], axis=1)
        verts = mesh.vertices
        coords = np.vstack([verts, 0.5 * (verts[edges[:, 0]] + verts[edges[:, 1]])])
        index = {(int(a), int(b)): k for k, (a, b) in enumerate(edges)}
        return cls(mesh, 2, elem, coords, edges, index)

    @property
    def n_dofs(self) -> int:
        return len(self.dof_coords)

    def edge_dof(self, i: int, j: int) -> int:
        return self.mesh.n_vertices + self._edge_index[(min(i, j), max(i, j))]

    def boundary_dofs(self, *tags: Tag) -> np.ndarray:
        """Per tagged edge: ``[v0, v1]`` (P1) or ``[v0, v1, mid]`` (P2)."""
        edges = self.mesh.edges_with_tag(*tags)
        if self.order == 1:
            return edges.copy()
        mids = np.array([self.edge_dof(int(a), int(b)) for a, b in edges], dtype=np.int64)
        return np.concatenate([edges, mids[:, None]], axis=1) if len(edges) else np.zeros((0, 3), np.int64)

    def lower_dofs(self) -> np.ndarray:
        """Mask of dofs sitting on the lower side of the cut."""
        mask = np.zeros(self.n_dofs, dtype=bool)
        low = self.mesh.lower_vertex_mask()
        mask[: self.mesh.n_vertices] = low
        if self.order == 2 and low.any():
            for row in self.boundary_dofs(Tag.CUT_LOWER):
                mask[row[2]] = True
        return mask

    def interpolate(self, fn) -> np.ndarray:
        """Nodal interpolant of ``fn(points, lower_mask)``."""
        return np.asarray(fn(self.dof_coords, self.lower_dofs()), dtype=float)

    def ones(self) -> np.ndarray:
        return np.ones(self.n_dofs)


# --------------------------------------------------------------------------
# Operators
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SparseSymOperator:
    matrix: sp.csr_matrix
    kind: str

    @property
    def dimension(self) -> int:
        return self.matrix.shape[0]

    def __matmul__(self, other):
        return self.matrix @ other

    def quad(self, u, v=None) -> float:
        return float((v if v is not None else u) @ (self.matrix @ u))


def _assemble_sym(elem_dofs, local, n) -> sp.csr_matrix:
    """Assemble the upper triangle and mirror it, giving exact symmetry."""
    nloc = elem_dofs.shape[1]
    rows = np.repeat(elem_dofs, nloc, axis=1).ravel()
    cols = np.tile(elem_dofs, (1, nloc)).ravel()
    vals = local.reshape(len(elem_dofs), -1).ravel()
    r = np.minimum(rows, cols)
    c = np.maximum(rows, cols)
    keep = (rows <= cols)
    # local matrices are exactly symmetric, so the lower-triangle entries are
    # duplicates of kept ones; drop them
    diag_or_upper = keep
    U = sp.coo_matrix((vals[diag_or_upper], (r[diag_or_upper], c[diag_or_upper])), shape=(n, n)).tocsr()
    U.sum_duplicates()
    strict = sp.triu(U, k=1, format="csr")
    return (U + strict.T).tocsr()


def assemble(mesh: Mesh, order: int = 2, space: FESpace | None = None):
    """Stiffness and mass operators ``(K, M)`` for the Neumann Laplacian."""
    space = space or FESpace.build(mesh, order)
    areas = triangle_areas(mesh.vertices, mesh.triangles)
    if np.any(areas <= 0):
        bad = int(np.argmin(areas))
        raise AssemblyError(f"degenerate or inverted triangle {bad} (area {areas[bad]:.3e})")
    coords = mesh.vertices[mesh.triangles]
    Ke, Me = kernels.element_matrices(coords, space.order)
    n = space.n_dofs
    K = SparseSymOperator(_assemble_sym(space.elem_dofs, Ke, n), "STIFFNESS")
    M = SparseSymOperator(_assemble_sym(space.elem_dofs, Me, n), "MASS")
    return K, M


# --------------------------------------------------------------------------
# Edge forms
# --------------------------------------------------------------------------


def _edge_basis(s):
    return np.stack([(1 - s) * (1 - 2 * s), s * (2 * s - 1), 4 * s * (1 - s)], axis=-1)


def _edge_basis_ds(s):
    return np.stack([4 * s - 3, 4 * s - 1, 4 - 8 * s], axis=-1)


def _edge_quadrature(p0, p1, singular_points, nq):
    """Quadrature nodes ``s`` and weights per edge (in units of the parameter).

    Edges that start or end at a singular point use ``s = sigma**2`` (or
    ``1 - sigma**2``) so that square-root weights integrate exactly.
    """
    x, w = np.polynomial.legendre.leggauss(nq)
    sig = 0.5 * (x + 1.0)
    wq = 0.5 * w
    ne = len(p0)
    S = np.tile(sig, (ne, 1))
    W = np.tile(wq, (ne, 1))
    for sp_pt in singular_points:
        sp_pt = np.asarray(sp_pt, dtype=float)
        at0 = np.all(p0 == sp_pt, axis=1)
        at1 = np.all(p1 == sp_pt, axis=1)
        S[at0] = sig**2
        W[at0] = wq * 2 * sig
        S[at1] = 1 - sig**2
        W[at1] = wq * 2 * sig
    return S, W


def edge_matrix(space: FESpace, tags, weight, derivative: bool = False,
                singular_points=(), nq: int = 8) -> sp.csr_matrix:
    """``int w u v ds`` (or with tangential derivatives) over tagged edges.

    ``weight(points)`` is evaluated at the quadrature points.
    """
    if space.order != 2:
        raise NotImplementedError("edge forms are implemented for P2")
    dofs = space.boundary_dofs(*tags)
    n = space.n_dofs
    if len(dofs) == 0:
        return sp.csr_matrix((n, n))
    verts = space.mesh.vertices
    p0, p1 = verts[dofs[:, 0]], verts[dofs[:, 1]]
    L = np.linalg.norm(p1 - p0, axis=1)
    S, W = _edge_quadrature(p0, p1, singular_points, nq)
    pts = p0[:, None, :] + S[..., None] * (p1 - p0)[:, None, :]
    wv = np.asarray(weight(pts.reshape(-1, 2)), dtype=float).reshape(S.shape)
    if derivative:
        B = _edge_basis_ds(S) / L[:, None, None]
    else:
        B = _edge_basis(S)
    local = np.einsum("eq,eq,eqa,eqb->eab", W * L[:, None], wv, B, B)
    local = 0.5 * (local + np.transpose(local, (0, 2, 1)))
    return _assemble_sym(dofs, local, n)


def edge_load(space: FESpace, tags, fn, singular_points=(), nq: int = 8) -> np.ndarray:
    """``int f v ds`` over tagged edges."""
    dofs = space.boundary_dofs(*tags)
    out = np.zeros(space.n_dofs)
    if len(dofs) == 0:
        return out
    verts = space.mesh.vertices
    p0, p1 = verts[dofs[:, 0]], verts[dofs[:, 1]]
    L = np.linalg.norm(p1 - p0, axis=1)
    S, W = _edge_quadrature(p0, p1, singular_points, nq)
    pts = p0[:, None, :] + S[..., None] * (p1 - p0)[:, None, :]
    fv = np.asarray(fn(pts.reshape(-1, 2)), dtype=float).reshape(S.shape)
    B = _edge_basis(S) if space.order == 2 else np.stack([1 - S, S], axis=-1)
    local = np.einsum("eq,eq,eqa->ea", W * L[:, None], fv, B)
    np.add.at(out, dofs.ravel(), local.ravel())
    return out


# degree-5 seven-point rule on the reference triangle (barycentric, weights sum to 1)
_a1, _b1 = 0.059715871789770, 0.470142064105115
_a2, _b2 = 0.797426985353087, 0.101286507323456
_TRI7 = np.array(
    [
        [1 / 3, 1 / 3, 1 / 3],
        [_a1, _b1, _b1],
        [_b1, _a1, _b1],
        [_b1, _b1, _a1],
        [_a2, _b2, _b2],
        [_b2, _a2, _b2],
        [_b2, _b2, _a2],
    ]
)
_W7 = np.array([0.225] + [0.132394152788506] * 3 + [0.125939180544827] * 3)


def domain_load(space: FESpace, fn) -> np.ndarray:
    """``int f v dx`` with a degree-5 rule; ``fn(points)`` gives ``f``."""
    mesh = space.mesh
    p = mesh.vertices[mesh.triangles]
    area = triangle_areas(mesh.vertices, mesh.triangles)
    pts = np.einsum("qk,ekd->eqd", _TRI7, p)
    fv = np.asarray(fn(pts.reshape(-1, 2)), dtype=float).reshape(len(p), len(_W7))
    if space.order == 2:
        basis = kernels.p2_basis(_TRI7, backend="numpy")
    else:
        basis = _TRI7
    local = np.einsum("e,q,eq,qa->ea", area, _W7, fv, basis)
    out = np.zeros(space.n_dofs)
    np.add.at(out, space.elem_dofs.ravel(), local.ravel())
    return out


# --------------------------------------------------------------------------
# Solves
# --------------------------------------------------------------------------


def _factor(A: sp.spmatrix):
    # symmetric-mode pivoting keeps the minimum-degree ordering intact;
    # threshold pivoting on an indefinite shifted pencil destroys it
    return spla.splu(
        A.tocsc(),
        permc_spec="MMD_AT_PLUS_A",
        diag_pivot_thresh=0.01,
        options={"SymmetricMode": True},
    )


def solve_neumann(K, M, lam: float, f=None, g_flux=None, orthogonalize_against=None,
                  load=None, compat_tol: float = 1e-8):
    """Solve ``(K - lam M) u = M f + g_flux + load``.

    ``g_flux`` is an already-integrated boundary load vector.  With
    ``orthogonalize_against = phi`` the solve is bordered by the constraint
    ``<u, phi>_M = 0`` and the load must satisfy ``phi . b = 0`` within
    ``compat_tol``.
    """
    Km = K.matrix if isinstance(K, SparseSymOperator) else K
    Mm = M.matrix if isinstance(M, SparseSymOperator) else M
    n = Km.shape[0]
    b = np.zeros(n)
    if f is not None:
        b += Mm @ np.asarray(f, dtype=float)
    if g_flux is not None:
        b += np.asarray(g_flux, dtype=float)
    if load is not None:
        b += np.asarray(load, dtype=float)
    A = (Km - lam * Mm).tocsr()
    if orthogonalize_against is None:
        try:
            u = _factor(A).solve(b)
        except RuntimeError as exc:
            raise CompatibilityError("singular operator without deflation", float("nan")) from exc
        res = np.linalg.norm(A @ u - b)
        if not np.isfinite(res) or res > 1e-8 * max(np.linalg.norm(b), 1e-300):
            raise CompatibilityError("near-singular solve without deflation", float(res))
        return u
    phi = np.asarray(orthogonalize_against, dtype=float)
    c = Mm @ phi
    scale = np.linalg.norm(b) * np.sqrt(phi @ c) + 1e-300
    resid = abs(float(phi @ b)) / scale
    if resid > compat_tol:
        raise CompatibilityError("load violates the solvability condition", resid)
    u = bordered_solve(A, c, b)
    return u


def bordered_solve(A, c, b, factor=None):
    """Solve ``[[A, c], [c^T, 0]] [u, mu] = [b, 0]`` and return ``u``."""
    n = A.shape[0]
    colvec = sp.csr_matrix(c.reshape(-1, 1))
    big = sp.bmat([[A, colvec], [colvec.T, None]], format="csc")
    lu = factor or _factor(big)
    sol = lu.solve(np.concatenate([b, [0.0]]))
    return sol[:n]


class BorderedSolver:
    """Factor once, solve many right-hand sides for ``(K - lam M) u = b``."""

    def __init__(self, K, M, lam, phi):
        Km = K.matrix if isinstance(K, SparseSymOperator) else K
        Mm = M.matrix if isinstance(M, SparseSymOperator) else M
        self.A = (Km - lam * Mm).tocsr()
        self.phi = phi
        self.c = Mm @ phi
        col = sp.csr_matrix(self.c.reshape(-1, 1))
        self.lu = _factor(sp.bmat([[self.A, col], [col.T, None]], format="csc"))
        self.n = self.A.shape[0]

    def compatibility(self, b) -> float:
        scale = np.linalg.norm(b) * np.sqrt(self.phi @ self.c) + 1e-300
        return abs(float(self.phi @ b)) / scale

    def solve(self, b, compat_tol: float = 1e-8):
        resid = self.compatibility(b)
        if resid > compat_tol:
            raise CompatibilityError("load violates the solvability condition", resid)
        sol = self.lu.solve(np.concatenate([b, [0.0]]))
        return sol[: self.n]


class ProjectedSolver:
    """Solve ``(K - lam M) u = b`` with ``<u, phi>_M = 0`` using a nearby shifted factor.

    The shifted factor ``(K - sigma M)^-1`` preconditions a fixed-point
    iteration on the M-orthogonal complement of ``phi``.  With
    ``|lam - sigma|`` much smaller than the spectral gap each sweep gains
    about ``-log10(|lam - sigma| / gap)`` digits, so no second factorisation
    is needed.
    """

    def __init__(self, K, M, lam, phi, factor: ShiftedFactor, rtol: float = 1e-12,
                 max_iter: int = 60):
        self.K = K.matrix if isinstance(K, SparseSymOperator) else K
        self.M = M.matrix if isinstance(M, SparseSymOperator) else M
        self.lam = lam
        self.phi = phi / np.sqrt(phi @ (self.M @ phi))
        self.c = self.M @ self.phi
        self.factor = factor
        self.rtol = rtol
        self.max_iter = max_iter

    def compatibility(self, b) -> float:
        scale = np.linalg.norm(b) * np.sqrt(self.phi @ self.c) + 1e-300
        return abs(float(self.phi @ b)) / scale

    def _apply(self, u):
        return self.K @ u - self.lam * (self.M @ u)

    def solve(self, b, compat_tol: float = 1e-8):
        resid = self.compatibility(b)
        if resid > compat_tol:
            raise CompatibilityError("load violates the solvability condition", resid)
        b = b - self.c * ((self.phi @ b) / (self.phi @ self.c))
        nb = np.linalg.norm(b)
        u = np.zeros_like(b)
        r = b.copy()
        history = []
        for _ in range(self.max_iter):
            z = self.factor.lu.solve(r)
            z -= self.phi * (self.c @ z)
            u += z
            r = b - self._apply(u)
            r -= self.c * ((self.phi @ r) / (self.phi @ self.c))
            history.append(float(np.linalg.norm(r) / max(nb, 1e-300)))
            if history[-1] < self.rtol:
                return u
            if len(history) > 3 and history[-1] > 0.5 * history[-4]:
                break
        if history and history[-1] < 1e3 * self.rtol:
            return u
        raise ConvergenceError("projected solve stagnated", history)


# --------------------------------------------------------------------------
# Eigenpairs
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EigenPair:
    lam: float
    coeffs: np.ndarray
    residual: float
    mass_norm: float


def _m_orthonormalize(X, M, drop_tol=1e-10):
    """Modified Gram-Schmidt in the M inner product, twice for stability."""
    cols = []
    for k in range(X.shape[1]):
        v = X[:, k].copy()
        for _ in range(2):
            for q in cols:
                v -= (q @ (M @ v)) * q
        nrm = np.sqrt(max(v @ (M @ v), 0.0))
        if nrm > drop_tol * np.sqrt(max(X[:, k] @ (M @ X[:, k]), 1e-300)):
            cols.append(v / nrm)
    return np.stack(cols, axis=1)


def _start_block(coords, size):
    x = coords[:, 0] - coords[:, 0].mean()
    y = coords[:, 1] - coords[:, 1].mean()
    cols = [np.ones(len(x))]
    deg = 1
    while len(cols) < size:
        for i in range(deg + 1):
            cols.append(x ** (deg - i) * y**i)
            if len(cols) == size:
                break
        deg += 1
    return np.stack(cols, axis=1)


@dataclass(frozen=True, eq=False)
class ShiftedFactor:
    """LU factors of ``K - sigma M``, reusable for solves near ``sigma``."""

    sigma: float
    lu: object


def eig_near(K, M, target: float, count: int = 1, tol: float = 1e-10, max_iter: int = 200,
             coords: np.ndarray | None = None, extra: int = 6, deflate=None,
             return_factor: bool = False):
    """``count`` eigenpairs of ``K u = lam M u`` nearest ``target``.

    Shift-invert subspace iteration with shift ``target - 1e-3 * scale``.  The
    start block is deterministic (all-ones followed by low-order monomials of
    ``coords``, which should be the dof coordinates).  ``deflate`` lists
    M-orthonormal vectors to project out at every step.  With
    ``return_factor`` the result is ``(pairs, ShiftedFactor)``.
    """
    Km = K.matrix if isinstance(K, SparseSymOperator) else K
    Mm = M.matrix if isinstance(M, SparseSymOperator) else M
    n = Km.shape[0]
    scale = max(1.0, abs(target))
    sigma = target - 1e-3 * scale
    lu = _factor((Km - sigma * Mm).tocsr())
    p = min(count + extra, n - 1)
    if coords is None:
        coords = np.stack([np.arange(n) / n, np.zeros(n)], axis=1)
    X = _start_block(coords, p)
    D = None if deflate is None else np.atleast_2d(np.asarray(deflate).T).reshape(n, -1)

    def project(Y):
        if D is None:
            return Y
        return Y - D @ (D.T @ (Mm @ Y))

    X = _m_orthonormalize(project(X), Mm)
    history = []
    for it in range(max_iter):
        Y = lu.solve(Mm @ X)
        Y = _m_orthonormalize(project(Y), Mm)
        Kr = Y.T @ (Km @ Y)
        Mr = Y.T @ (Mm @ Y)
        Kr = 0.5 * (Kr + Kr.T)
        Mr = 0.5 * (Mr + Mr.T)
        vals, vecs = sla.eigh(Kr, Mr)
        order = np.argsort(np.abs(vals - target), kind="stable")
        vals, vecs = vals[order], vecs[:, order]
        X = Y @ vecs
        R = Km @ X[:, :count] - (Mm @ X[:, :count]) * vals[:count]
        res = np.array([_residual_norm(R[:, k], X[:, k], Mm) for k in range(count)])
        history.append(float(res.max()))
        if np.all(res < tol * np.abs(vals[:count]) + 1e-12 * max(1.0, scale)) and it > 0:
            break
    else:
        raise ConvergenceError("subspace iteration did not converge", history)
    pairs = []
    for k in range(count):
        u = X[:, k]
        mn = float(np.sqrt(u @ (Mm @ u)))
        u = u / mn
        # fix the sign: largest-magnitude coefficient positive
        if u[np.argmax(np.abs(u))] < 0:
            u = -u
        r = Km @ u - vals[k] * (Mm @ u)
        pairs.append(EigenPair(float(vals[k]), u, _residual_norm(r, u, Mm), float(np.sqrt(u @ (Mm @ u)))))
    if return_factor:
        return pairs, ShiftedFactor(sigma, lu)
    return pairs


def _residual_norm(r, u, Mm):
    """``||r||_2 / ||u||_M``."""
    return float(np.linalg.norm(r) / np.sqrt(u @ (Mm @ u)))


# --------------------------------------------------------------------------
# Point evaluation
# --------------------------------------------------------------------------


class PointLocator:
    """Find the triangle and barycentric coordinates of query points."""

    def __init__(self, mesh: Mesh, k: int = 24):
        self.mesh = mesh
        self.coords = mesh.vertices[mesh.triangles]
        self.cent = self.coords.mean(axis=1)
        self.tree = cKDTree(self.cent)
        self.k = min(k, len(self.cent))

    def locate(self, pts, side=None, tol=1e-10, strict=True):
        """Return ``(elem, bary)``; ``side`` (+1/-1 per point) breaks ties on the cut.

        With ``strict = False`` points slightly outside the mesh (a different
        polygonal boundary) take the best nearby element and extrapolate.
        """
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        npts = len(pts)
        _, cand = self.tree.query(pts, k=self.k)
        cand = np.atleast_2d(cand).reshape(npts, -1)
        elem = np.full(npts, -1, dtype=np.int64)
        best = np.full(npts, -np.inf)
        bary = np.zeros((npts, 3))
        for j in range(cand.shape[1]):
            e = cand[:, j]
            lam = kernels.barycentric(self.coords[e], pts)
            score = lam.min(axis=1)
            if side is not None:
                cy = self.cent[e, 1]
                wrong = (np.sign(cy) != np.asarray(side)) & (np.abs(pts[:, 1]) < 1e-300)
                score = np.where(wrong, score - 1.0, score)
            better = score > best
            elem[better] = e[better]
            best[better] = score[better]
            bary[better] = lam[better]
        missing = np.where(best < -tol)[0] if strict else np.zeros(0, dtype=np.int64)
        for i in missing:
            lam = kernels.barycentric(self.coords, np.repeat(pts[i : i + 1], len(self.coords), axis=0))
            score = lam.min(axis=1)
            e = int(np.argmax(score))
            if score[e] < -1e-8:
                raise ValueError(f"point {pts[i]} outside the mesh")
            elem[i], bary[i] = e, lam[e]
        return elem, bary


def evaluate(space: FESpace, u: np.ndarray, pts, locator: PointLocator | None = None, side=None,
             strict: bool = True):
    """Values of the FE field ``u`` at points."""
    locator = locator or PointLocator(space.mesh)
    elem, lam = locator.locate(pts, side, strict=strict)
    dofs = space.elem_dofs[elem]
    if space.order == 2:
        basis = kernels.p2_basis(lam)
    else:
        basis = lam
    return np.sum(basis * u[dofs], axis=1)
