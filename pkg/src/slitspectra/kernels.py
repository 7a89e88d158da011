"""Element-level kernels with a numba and a pure-numpy implementation.

The backend is chosen once at import time: numba is used when it can be
imported unless ``SLITSPECTRA_NUMBA=0`` is set.  Both implementations follow
the same formulas and agree to rounding; `BACKEND` reports the active one.

Local P2 ordering: vertices 0, 1, 2 then edge midpoints of (0,1), (1,2), (2,0).
"""

from __future__ import annotations

import os

import numpy as np

EDGE_PAIRS = np.array([[0, 1], [1, 2], [2, 0]], dtype=np.int64)


def _want_numba() -> bool:
    flag = os.environ.get("SLITSPECTRA_NUMBA", "1").strip().lower()
    if flag in ("0", "false", "no", "off"):
        return False
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


# --------------------------------------------------------------------------
# numpy implementations
# --------------------------------------------------------------------------


def _geometry_np(coords):
    p0, p1, p2 = coords[:, 0], coords[:, 1], coords[:, 2]
    det = (p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1]) - (p1[:, 1] - p0[:, 1]) * (
        p2[:, 0] - p0[:, 0]
    )
    area = 0.5 * det
    G = np.empty((len(coords), 3, 2))
    G[:, 0, 0] = p1[:, 1] - p2[:, 1]
    G[:, 0, 1] = p2[:, 0] - p1[:, 0]
    G[:, 1, 0] = p2[:, 1] - p0[:, 1]
    G[:, 1, 1] = p0[:, 0] - p2[:, 0]
    G[:, 2, 0] = p0[:, 1] - p1[:, 1]
    G[:, 2, 1] = p1[:, 0] - p0[:, 0]
    G /= det[:, None, None]
    return area, G


def _p1_np(coords):
    area, G = _geometry_np(coords)
    GG = np.einsum("eid,ejd->eij", G, G)
    K = area[:, None, None] * GG
    base = (np.ones((3, 3)) + np.eye(3)) / 12.0
    M = area[:, None, None] * base[None]
    return K, M


_P2_MASS = (
    np.array(
        [
            [6, -1, -1, 0, -4, 0],
            [-1, 6, -1, 0, 0, -4],
            [-1, -1, 6, -4, 0, 0],
            [0, 0, -4, 32, 16, 16],
            [-4, 0, 0, 16, 32, 16],
            [0, -4, 0, 16, 16, 32],
        ],
        dtype=float,
    )
    / 180.0
)


def _p2_stiffness_table():
    """Coefficients c[a, b, i, j] with K_ab = area * sum_ij c * (G_i . G_j)."""
    c = np.zeros((6, 6, 3, 3))

    def lam2(a, b):  # int lam_a lam_b / area
        return (2.0 if a == b else 1.0) / 12.0

    # gradient of each basis function as sum over (coefficient polynomial, G index)
    # vertex i: (4 lam_i - 1) G_i ; edge (i, j): 4 lam_i G_j + 4 lam_j G_i
    for a in range(6):
        for b in range(6):
            for ta in _terms(a):
                for tb in _terms(b):
                    (ca, pa, ga), (cb, pb, gb) = ta, tb
                    c[a, b, ga, gb] += ca * cb * _int_poly(pa, pb, lam2)
    return c


def _terms(a):
    # term: (coefficient, polynomial as list of (coef, lam index or -1 for 1), G index)
    if a < 3:
        return [(1.0, [(4.0, a), (-1.0, -1)], a)]
    i, j = EDGE_PAIRS[a - 3]
    return [(4.0, [(1.0, int(i))], int(j)), (4.0, [(1.0, int(j))], int(i))]


def _int_poly(pa, pb, lam2):
    total = 0.0
    for ca, ia in pa:
        for cb, ib in pb:
            if ia < 0 and ib < 0:
                total += ca * cb
            elif ia < 0 or ib < 0:
                total += ca * cb / 3.0
            else:
                total += ca * cb * lam2(ia, ib)
    return total


_P2_STIFF = _p2_stiffness_table()


def _p2_np(coords):
    area, G = _geometry_np(coords)
    GG = np.einsum("eid,ejd->eij", G, G)
    K = area[:, None, None] * np.einsum("abij,eij->eab", _P2_STIFF, GG)
    K = 0.5 * (K + np.transpose(K, (0, 2, 1)))
    M = area[:, None, None] * _P2_MASS[None]
    return K, M


def _barycentric_np(coords, pts):
    area, G = _geometry_np(coords)
    lam1 = np.einsum("ed,ed->e", G[:, 1], pts - coords[:, 0])
    lam2 = np.einsum("ed,ed->e", G[:, 2], pts - coords[:, 0])
    return np.stack([1.0 - lam1 - lam2, lam1, lam2], axis=1)


def _p2_basis_np(lam):
    l0, l1, l2 = lam[:, 0], lam[:, 1], lam[:, 2]
    return np.stack(
        [l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1), 4 * l0 * l1, 4 * l1 * l2, 4 * l2 * l0],
        axis=1,
    )


# --------------------------------------------------------------------------
# numba implementations
# --------------------------------------------------------------------------


def _build_numba():
    from numba import njit

    stiff = _P2_STIFF.copy()
    mass = _P2_MASS.copy()

    @njit(cache=True)
    def geom(c):
        det = (c[1, 0] - c[0, 0]) * (c[2, 1] - c[0, 1]) - (c[1, 1] - c[0, 1]) * (c[2, 0] - c[0, 0])
        G = np.empty((3, 2))
        G[0, 0] = (c[1, 1] - c[2, 1]) / det
        G[0, 1] = (c[2, 0] - c[1, 0]) / det
        G[1, 0] = (c[2, 1] - c[0, 1]) / det
        G[1, 1] = (c[0, 0] - c[2, 0]) / det
        G[2, 0] = (c[0, 1] - c[1, 1]) / det
        G[2, 1] = (c[1, 0] - c[0, 0]) / det
        return 0.5 * det, G

    @njit(cache=True)
    def p2(coords):
        n = coords.shape[0]
        K = np.zeros((n, 6, 6))
        M = np.empty((n, 6, 6))
        GG = np.empty((3, 3))
        for e in range(n):
            area, G = geom(coords[e])
            for i in range(3):
                for j in range(3):
                    GG[i, j] = G[i, 0] * G[j, 0] + G[i, 1] * G[j, 1]
            for a in range(6):
                for b in range(a, 6):
                    s = 0.0
                    t = 0.0
                    for i in range(3):
                        for j in range(3):
                            s += stiff[a, b, i, j] * GG[i, j]
                            t += stiff[b, a, i, j] * GG[i, j]
                    v = area * 0.5 * (s + t)
                    K[e, a, b] = v
                    K[e, b, a] = v
                    M[e, a, b] = area * mass[a, b]
                    M[e, b, a] = area * mass[a, b]
        return K, M

    @njit(cache=True)
    def p1(coords):
        n = coords.shape[0]
        K = np.empty((n, 3, 3))
        M = np.empty((n, 3, 3))
        for e in range(n):
            area, G = geom(coords[e])
            for a in range(3):
                for b in range(3):
                    K[e, a, b] = area * (G[a, 0] * G[b, 0] + G[a, 1] * G[b, 1])
                    M[e, a, b] = area * (2.0 if a == b else 1.0) / 12.0
        return K, M

    @njit(cache=True)
    def bary(coords, pts):
        n = coords.shape[0]
        out = np.empty((n, 3))
        for e in range(n):
            area, G = geom(coords[e])
            dx = pts[e, 0] - coords[e, 0, 0]
            dy = pts[e, 1] - coords[e, 0, 1]
            l1 = G[1, 0] * dx + G[1, 1] * dy
            l2 = G[2, 0] * dx + G[2, 1] * dy
            out[e, 0] = 1.0 - l1 - l2
            out[e, 1] = l1
            out[e, 2] = l2
        return out

    @njit(cache=True)
    def basis(lam):
        n = lam.shape[0]
        out = np.empty((n, 6))
        for k in range(n):
            l0, l1, l2 = lam[k, 0], lam[k, 1], lam[k, 2]
            out[k, 0] = l0 * (2 * l0 - 1)
            out[k, 1] = l1 * (2 * l1 - 1)
            out[k, 2] = l2 * (2 * l2 - 1)
            out[k, 3] = 4 * l0 * l1
            out[k, 4] = 4 * l1 * l2
            out[k, 5] = 4 * l2 * l0
        return out

    return p1, p2, bary, basis


NUMPY_KERNELS = {
    "p1": _p1_np,
    "p2": _p2_np,
    "barycentric": _barycentric_np,
    "p2_basis": _p2_basis_np,
}

if _want_numba():
    _p1_nb, _p2_nb, _bary_nb, _basis_nb = _build_numba()
    NUMBA_KERNELS = {
        "p1": _p1_nb,
        "p2": _p2_nb,
        "barycentric": _bary_nb,
        "p2_basis": _basis_nb,
    }
    BACKEND = "numba"
    _ACTIVE = NUMBA_KERNELS
else:
    NUMBA_KERNELS = None
    BACKEND = "numpy"
    _ACTIVE = NUMPY_KERNELS


def element_matrices(coords: np.ndarray, order: int, backend: str | None = None):
    """Local stiffness and mass matrices, shape ``(n_el, nloc, nloc)``."""
    table = _table(backend)
    coords = np.ascontiguousarray(coords, dtype=float)
    return table["p2" if order == 2 else "p1"](coords)


def barycentric(coords, pts, backend: str | None = None) -> np.ndarray:
    return _table(backend)["barycentric"](
        np.ascontiguousarray(coords, dtype=float), np.ascontiguousarray(pts, dtype=float)
    )


def p2_basis(lam, backend: str | None = None) -> np.ndarray:
    return _table(backend)["p2_basis"](np.ascontiguousarray(lam, dtype=float))


def _table(backend):
    if backend is None:
        return _ACTIVE
    if backend == "numba":
        if NUMBA_KERNELS is None:
            raise RuntimeError("numba backend disabled or unavailable")
        return NUMBA_KERNELS
    if backend == "numpy":
        return NUMPY_KERNELS
    raise ValueError(f"unknown backend {backend!r}")
