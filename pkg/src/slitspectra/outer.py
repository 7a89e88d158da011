"""Outer expansion on the cut domain: eigenpair, tip data and correctors.

Weak forms
----------
With ``C(u, v) = int (g_plus u v)|_upper - (g_minus u v)|_lower`` and
``D(u, v) = int (g_plus u' v')|_upper - (g_minus u' v')|_lower`` over the two
sides of the cut (``'`` is ``d/dx1``) and ``B = D - lam0 C``:

* ``lam1 = -B(phi0, phi0)``;
* ``phi1``:  ``a(phi1, v) - lam0 m(phi1, v) = lam1 m(phi0, v) + B(phi0, v)``;
* ``phi_t``: ``a - lam0 m = lam1 m(phi1, v) + lam_t m(phi0, v) + B(phi1, v)
  - lam1 C(phi0, v)``, solvable for
  ``lam_t = lam1 C(phi0, phi0) + lam0 C(phi1, phi0) - D(phi1, phi0)``;
* ``psi = chi S + psi_hat`` with the lifted singular part
  ``S = r^(-1/2) cos(theta/2) - (lam0/2) r^(3/2) cos(theta/2)`` and
  ``a(psi_hat, v) - lam0 m(psi_hat, v) = lam_pm m(phi0, v) - (F, v)``,
  ``F = -(Delta + lam0)(chi S)``, so ``lam_pm = (F, phi0)``.

The cut forms come from integrating the tangential Neumann data
``d/dx1 (g dphi/dx1) + lam0 g phi`` by parts along each side; the endpoint
terms of the two sides cancel at the tips.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import gamma, jv

from .fem import (
    ProjectedSolver,
    ShiftedFactor,
    EigenPair,
    FESpace,
    PointLocator,
    assemble,
    domain_load,
    eig_near,
    evaluate,
)
from .geometry import TIPS, SlitGeometry, smoothstep_cutoff, tip_polar
from .meshgen import Mesh, Tag

TIP_POINTS = {"left": (0.0, 0.0), "right": (1.0, 0.0)}
# user-facing labels: d_minus belongs to the left tip O-, d_plus to the right tip O+
TIP_SIGN = {"left": "minus", "right": "plus"}


class ExpansionError(ArithmeticError):
    pass


# --------------------------------------------------------------------------
# Limiting eigenpair
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LimitingSolution:
    space: FESpace
    K: object
    M: object
    pair: EigenPair
    mode_index: int
    gap: float
    factor: ShiftedFactor | None = None

    @property
    def lam0(self) -> float:
        return self.pair.lam

    @property
    def phi0(self) -> np.ndarray:
        return self.pair.coeffs


def solve_limiting(mesh0: Mesh, mode_index: int, order: int = 2, gap_tol: float = 1e-3,
                   space: FESpace | None = None, tol: float = 1e-10,
                   guess: float | None = None) -> LimitingSolution:
    """Eigenpair number ``mode_index`` (0 = constant mode) of the cut problem.

    ``guess`` (typically the value from a coarser mesh) skips the search from
    the bottom of the spectrum.  The returned factor is shifted close to
    ``lam0`` so it can serve the corrector solves.

    The sign is fixed by ``phi0(O-) > 0``; when that value vanishes (modes odd
    in ``x2``) the sign of the left-tip singular coefficient ``d-`` is used.
    """
    space = space or FESpace.build(mesh0, order)
    K, M = assemble(mesh0, order, space)
    coords = space.dof_coords
    factor = None
    if guess is None:
        count = mode_index + 2
        pairs, factor = eig_near(K, M, 0.0, count, coords=coords, tol=tol, extra=6,
                                 return_factor=True)
        pairs = sorted(pairs, key=lambda p: p.lam)
        lams = np.array([p.lam for p in pairs])
        pair = pairs[mode_index]
        neighbours = np.delete(lams, mode_index)
    else:
        pairs, factor = eig_near(K, M, guess, 3, coords=coords, tol=tol, extra=6,
                                 return_factor=True)
        pair = pairs[0]
        neighbours = np.array([p.lam for p in pairs[1:]])
    lam = pair.lam
    scale = max(1.0, abs(lam))
    gap = float(np.min(np.abs(neighbours - lam)) / scale)
    if gap < gap_tol:
        raise ExpansionError(
            f"eigenvalue {lam:.6g} (mode {mode_index}) is not simple: relative gap {gap:.2e}"
        )
    if abs(factor.sigma - lam) > 0.05 * gap * scale:
        pairs, factor = eig_near(K, M, lam, 2, coords=coords, tol=tol, extra=6,
                                 return_factor=True)
        pair = pairs[0]
    u = pair.coeffs.copy()
    if mode_index == 0:
        u = np.abs(u.mean()) / u.mean() * u if u.mean() != 0 else u
    else:
        u = _sign_convention(space, u, pair.lam) * u
    pair = EigenPair(pair.lam, u, pair.residual, pair.mass_norm)
    return LimitingSolution(space, K, M, pair, mode_index, gap, factor)


def _sign_convention(space: FESpace, u: np.ndarray, lam: float) -> float:
    tip = int(np.where(np.all(space.mesh.vertices == 0.0, axis=1))[0][0])
    scale = np.max(np.abs(u))
    if abs(u[tip]) > 1e-6 * scale:
        return float(np.sign(u[tip]))
    sampler = fe_sampler(space, u)
    radii = np.geomspace(1e-3, 5e-2, 6)
    fit = fit_tip(sampler, "left", radii, k=math.sqrt(max(lam, 0.0)))
    if abs(fit["d"]) > 1e-8 * scale:
        return float(np.sign(fit["d"]))
    return float(np.sign(u[np.argmax(np.abs(u))]))


# --------------------------------------------------------------------------
# Tip expansions
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TipExpansion:
    tip: str
    phi0_at_tip: float
    d: float
    phi1_at_tip: float = 0.0
    fit_radii: tuple = ()
    fit_residual: float = 0.0
    coefficients: dict = field(default_factory=dict)


def fe_sampler(space: FESpace, u: np.ndarray, locator: PointLocator | None = None):
    locator = locator or PointLocator(space.mesh)

    def sample(pts):
        side = np.where(pts[:, 1] >= 0, 1.0, -1.0)
        return evaluate(space, u, pts, locator, side)

    return sample


def circle_points(tip: str, radii, n_angles: int = 32):
    """Sample points on circles about a tip, avoiding the cut directions."""
    theta = 2 * np.pi * (np.arange(n_angles) + 0.5) / n_angles
    R, T = np.meshgrid(np.asarray(radii, dtype=float), theta, indexing="ij")
    r, t = R.ravel(), T.ravel()
    x = r * np.cos(t)
    y = r * np.sin(t)
    if tip == "right":
        x = 1.0 - x
    return np.stack([x, y], axis=1), r, t


def radial_basis(j: int, r, k: float = 0.0):
    """``r^(j/2)`` or its Bessel analogue normalised to the same leading term."""
    nu = 0.5 * j
    if k <= 0.0 or j < 0:
        return r**nu
    return gamma(nu + 1.0) * (2.0 / k) ** nu * jv(nu, k * r)


def fit_tip(sample, tip: str, radii, n_terms: int = 6, k: float = 0.0, general: bool = False,
            singular: bool = False, n_angles: int = 32, cond_cap: float = 1e12) -> dict:
    """Least-squares fit of a field by tip harmonics on several circles.

    Columns are ``R_j(r) cos(j theta/2)`` for ``j < n_terms`` (with Bessel
    radial parts when ``k > 0``), plus ``r^(j/2) sin(j theta/2)`` for general
    (inhomogeneous) fields and ``r^(-1/2) cos(theta/2)`` when ``singular``.
    Returns the constant (``c0``), the ``r^(1/2) cos`` coefficient (``d``),
    the ``r cos`` coefficient (``c2``) and the singular coefficient.
    """
    pts, r, t = circle_points(tip, radii, n_angles)
    vals = np.asarray(sample(pts), dtype=float)
    cols, names = [], []
    for j in range(n_terms):
        cols.append(radial_basis(j, r, k) * np.cos(0.5 * j * t))
        names.append(f"cos{j}")
        if general and j > 0:
            cols.append(r ** (0.5 * j) * np.sin(0.5 * j * t))
            names.append(f"sin{j}")
    if singular:
        cols.append(r**-0.5 * np.cos(0.5 * t))
        names.append("sing")
    A = np.stack(cols, axis=1)
    colscale = np.linalg.norm(A, axis=0)
    As = A / colscale
    cond = np.linalg.cond(As)
    if not np.isfinite(cond) or cond > cond_cap:
        raise ExpansionError(f"ill-conditioned tip fit (condition {cond:.2e}); choose other radii")
    coef, *_ = np.linalg.lstsq(As, vals, rcond=None)
    coef = coef / colscale
    resid = vals - A @ coef
    denom = max(np.max(np.abs(vals)), 1e-300)
    out = dict(zip(names, coef))
    return {
        "c0": float(out["cos0"]),
        "d": float(out.get("cos1", 0.0)),
        "c2": float(out.get("cos2", 0.0)),
        "sin1": float(out.get("sin1", 0.0)),
        "sing": float(out.get("sing", 0.0)),
        "residual": float(np.max(np.abs(resid)) / denom),
        "condition": float(cond),
        "all": {k_: float(v) for k_, v in out.items()},
    }


def default_radii(h_tip: float, r_max: float = 0.1, n: int = 8):
    return tuple(np.geomspace(4 * h_tip, r_max, n))


def extract_tip(sample, tip: str, radii, k: float = 0.0, n_terms: int = 6,
                phi1_sample=None, tol: float = 1e-3) -> TipExpansion:
    """Tip data ``(phi0(O), d)`` of an eigenfunction from circle samples."""
    fit = fit_tip(sample, tip, radii, n_terms=n_terms, k=k)
    phi1 = 0.0
    coeffs = {"c2": fit["c2"], **{f"phi0_{k_}": v for k_, v in fit["all"].items()}}
    if phi1_sample is not None:
        fit1 = fit_tip(phi1_sample, tip, radii, n_terms=n_terms, general=True)
        phi1 = fit1["c0"]
        coeffs.update({f"phi1_{k_}": v for k_, v in fit1["all"].items()})
    return TipExpansion(tip, fit["c0"], fit["d"], phi1, tuple(float(x) for x in radii),
                        fit["residual"], coeffs)


# --------------------------------------------------------------------------
# Cut quadrature, traces and tip recovery
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CutTraces:
    """Values and ``d/dx1`` of a field on both cut sides at the quadrature nodes."""

    t: np.ndarray
    weights: np.ndarray
    upper: np.ndarray
    lower: np.ndarray
    d_upper: np.ndarray
    d_lower: np.ndarray


@dataclass(frozen=True, eq=False)
class CutQuadrature:
    """Edge-aligned Gauss rule on the cut, shared by both sides.

    Every cut edge carries ``ceil((degree+1)/2)`` Gauss points, with the
    ``s = sigma**2`` substitution on the two tip edges, so piecewise
    polynomials of the given degree (times square-root weights at the tips)
    integrate exactly on (0, 1).
    """

    degree: int
    t: np.ndarray          # (E, Q)
    weights: np.ndarray    # (E, Q)
    dofs: dict             # side -> (E, 3)
    N: np.ndarray          # (E, Q, 3)
    dN: np.ndarray         # (E, Q, 3), d/dx1
    g_upper: np.ndarray
    g_lower: np.ndarray
    n_dofs: int

    @classmethod
    def build(cls, space: FESpace, geom: SlitGeometry, degree: int = 8) -> "CutQuadrature":
        nq = max(1, math.ceil((degree + 1) / 2))
        x, w = np.polynomial.legendre.leggauss(nq)
        sig, wq = 0.5 * (x + 1), 0.5 * w
        verts = space.mesh.vertices
        sides = {}
        for name, tag in (("upper", Tag.CUT_UPPER), ("lower", Tag.CUT_LOWER)):
            dofs = space.boundary_dofs(tag)
            a, b = verts[dofs[:, 0], 0], verts[dofs[:, 1], 0]
            dofs = np.where((a > b)[:, None], dofs[:, [1, 0, 2]], dofs)
            a, b = np.minimum(a, b), np.maximum(a, b)
            order = np.argsort(a, kind="stable")
            sides[name] = (dofs[order], a[order], b[order])
        (du, a, b), (dl, al, bl) = sides["upper"], sides["lower"]
        if not (np.array_equal(a, al) and np.array_equal(b, bl)):
            raise ExpansionError("upper and lower cut partitions differ")
        L = b - a
        S = np.tile(sig, (len(a), 1))
        W = np.tile(wq, (len(a), 1))
        at0, at1 = a == 0.0, b == 1.0
        S[at0], W[at0] = sig**2, 2 * sig * wq
        S[at1], W[at1] = 1 - sig**2, 2 * sig * wq
        N = np.stack([(1 - S) * (1 - 2 * S), S * (2 * S - 1), 4 * S * (1 - S)], axis=-1)
        dN = np.stack([4 * S - 3, 4 * S - 1, 4 - 8 * S], axis=-1) / L[:, None, None]
        t = a[:, None] + S * L[:, None]
        return cls(degree, t, W * L[:, None], {"upper": du, "lower": dl}, N, dN,
                   geom.g(t, "+"), geom.g(t, "-"), space.n_dofs)

    def traces(self, u: np.ndarray) -> CutTraces:
        vals = {}
        for side in ("upper", "lower"):
            c = u[self.dofs[side]]
            vals[side] = (np.einsum("eqa,ea->eq", self.N, c), np.einsum("eqa,ea->eq", self.dN, c))
        return CutTraces(self.t, self.weights, vals["upper"][0], vals["lower"][0],
                         vals["upper"][1], vals["lower"][1])

    def load(self, tr: CutTraces, lam0: float, stiffness: bool = True) -> np.ndarray:
        """Vector ``v -> D(u, v) - lam0 C(u, v)`` (or ``C(u, v)`` alone)."""
        out = np.zeros(self.n_dofs)
        for side, g, val, der, sgn in (
            ("upper", self.g_upper, tr.upper, tr.d_upper, 1.0),
            ("lower", self.g_lower, tr.lower, tr.d_lower, -1.0),
        ):
            wg = sgn * self.weights * g
            if stiffness:
                loc = np.einsum("eq,eqa->ea", wg * der, self.dN) - lam0 * np.einsum(
                    "eq,eqa->ea", wg * val, self.N)
            else:
                loc = np.einsum("eq,eqa->ea", wg * val, self.N)
            np.add.at(out, self.dofs[side].ravel(), loc.ravel())
        return out

    def c_form(self, a: CutTraces, b: CutTraces) -> float:
        return float(np.sum(self.weights * (self.g_upper * a.upper * b.upper
                                            - self.g_lower * a.lower * b.lower)))

    def d_form(self, a: CutTraces, b: CutTraces) -> float:
        return float(np.sum(self.weights * (self.g_upper * a.d_upper * b.d_upper
                                            - self.g_lower * a.d_lower * b.d_lower)))


def cut_traces(space: FESpace, u: np.ndarray, quad_degree: int = 8,
               geom: SlitGeometry | None = None) -> CutTraces:
    return CutQuadrature.build(space, geom or SlitGeometry(), quad_degree).traces(u)


def tip_size(mesh: Mesh) -> float:
    rep = mesh.grading_report
    return max(rep.get("tip_size_left", 0.0), rep.get("tip_size_right", 0.0)) or rep["min_size"]


def recovery_fits(sample, h: float, n_terms: int = 5) -> dict:
    """Local tip expansions of a field fitted a few elements away from each tip."""
    radii = np.geomspace(4 * h, 64 * h, 8)
    return {tip: fit_tip(sample, tip, radii, n_terms=n_terms, general=True) for tip in TIPS}


def recover_traces(tr: CutTraces, fits: dict, r_blend: float) -> CutTraces:
    """Replace the discrete traces by the fitted expansion near the tips.

    The P2 trace on the elements touching a tip carries an O(1) relative
    flux error that does not shrink under refinement; on the cut it acts as
    a spurious point load.  The fitted expansion is blended in with a smooth
    cutoff supported in ``r < 2 r_blend``.
    """
    up, lo, dup, dlo = tr.upper.copy(), tr.lower.copy(), tr.d_upper.copy(), tr.d_lower.copy()
    for tip, fit in fits.items():
        r = tr.t if tip == "left" else 1.0 - tr.t
        drdx = 1.0 if tip == "left" else -1.0
        near = r < 2 * r_blend
        if not np.any(near):
            continue
        rn = np.maximum(r[near], 1e-300)
        fu = np.zeros_like(rn)
        fl = np.zeros_like(rn)
        gu = np.zeros_like(rn)
        gl = np.zeros_like(rn)
        for name, a in fit["all"].items():
            if not name.startswith("cos"):
                continue  # sin(j theta/2) vanishes on both faces with its x1-derivative
            j = int(name[3:])
            val = rn ** (0.5 * j)
            der = 0.5 * j * rn ** (0.5 * j - 1) if j else np.zeros_like(rn)
            sgn = (-1.0) ** j
            fu += a * val
            fl += sgn * a * val
            gu += a * der * drdx
            gl += sgn * a * der * drdx
        chi = smoothstep_cutoff(rn, r_blend)
        dchi = smoothstep_cutoff(rn, r_blend, 1) * drdx
        for arr, darr, f, gf in ((up, dup, fu, gu), (lo, dlo, fl, gl)):
            old, dold = arr[near], darr[near]
            arr[near] = chi * f + (1 - chi) * old
            darr[near] = chi * gf + (1 - chi) * dold + dchi * (f - old)
    return CutTraces(tr.t, tr.weights, up, lo, dup, dlo)


def lambda1_from_traces(tr: CutTraces, geom: SlitGeometry, lam0: float) -> float:
    gp = geom.g(tr.t, "+")
    gm = geom.g(tr.t, "-")
    mass = np.sum(tr.weights * (gp * tr.upper**2 - gm * tr.lower**2))
    stiff = np.sum(tr.weights * (gp * tr.d_upper**2 - gm * tr.d_lower**2))
    return float(lam0 * mass - stiff)


def lambda1(space: FESpace, phi0: np.ndarray, geom: SlitGeometry, lam0: float,
            quad_degree: int = 8, fits: dict | None = None, r_blend: float = 0.0) -> float:
    """Trace-quadrature value of ``lam1``, checked across two quadrature degrees."""
    vals = []
    for deg in (quad_degree, quad_degree + 6):
        tr = CutQuadrature.build(space, geom, deg).traces(phi0)
        if fits:
            tr = recover_traces(tr, fits, r_blend)
        vals.append(lambda1_from_traces(tr, geom, lam0))
    a, b = vals
    if abs(a - b) > 1e-6 * max(abs(b), 1e-12):
        raise ExpansionError(f"lambda1 quadrature not converged: {a!r} vs {b!r}")
    return b


# --------------------------------------------------------------------------
# Correctors
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CorrectorField:
    """FE coefficients plus lifted singular terms ``weight * chi(r) S(r, theta)``.

    ``lifting`` maps a tip name to its weight; all lifted terms share the
    cutoff radius ``c`` and eigenvalue ``lam0`` stored alongside.
    """

    which: str
    coeffs: np.ndarray
    lifting: dict = field(default_factory=dict)
    c: float = 0.1
    lam0: float = 0.0
    orthogonality: float = 0.0

    def singular_values(self, pts, lower=None) -> np.ndarray:
        out = np.zeros(len(pts))
        for tip, weight in self.lifting.items():
            if weight != 0.0:
                out += weight * lifted_singular(pts, tip, self.c, self.lam0, lower)
        return out

    def sampler(self, space: FESpace, locator=None):
        fe = fe_sampler(space, self.coeffs, locator)

        def sample(pts):
            return fe(pts) + self.singular_values(pts)

        return sample


def lifted_singular(pts, tip, c, lam0, lower=None):
    r, th = tip_polar(pts, tip, lower)
    chi = smoothstep_cutoff(r, c)
    with np.errstate(divide="ignore"):
        S = (r**-0.5 - 0.5 * lam0 * r**1.5) * np.cos(0.5 * th)
    return np.where(chi > 0, chi * S, 0.0)


def lifting_source(pts, tip, c, lam0):
    """``F = -(Delta + lam0)(chi S)`` for the lifted singular term at a tip."""
    r, th = tip_polar(pts, tip)
    chi = smoothstep_cutoff(r, c)
    d1 = smoothstep_cutoff(r, c, 1)
    d2 = smoothstep_cutoff(r, c, 2)
    cos = np.cos(0.5 * th)
    rs = np.maximum(r, 1e-300)
    S = (rs**-0.5 - 0.5 * lam0 * rs**1.5) * cos
    dS = (-0.5 * rs**-1.5 - 0.75 * lam0 * rs**0.5) * cos
    F = 0.5 * lam0**2 * chi * rs**1.5 * cos - 2 * d1 * dS - S * (d2 + d1 / rs)
    return np.where(r < 2 * c, F, 0.0)


@dataclass(frozen=True, eq=False)
class OuterExpansion:
    limiting: LimitingSolution
    quadrature: CutQuadrature
    lam0: float
    lam1: float
    lam1_matrix: float
    lam1_solvability: float
    lam_tilde: float
    lam_tilde_traces: float
    lam_pm: dict
    lam2: float
    tips: dict
    phi1: CorrectorField
    phi_tilde: CorrectorField
    psi: dict
    phi2: CorrectorField
    diagnostics: dict

    def coefficients(self) -> dict:
        t = self.tips
        return {
            "lambda0": self.lam0,
            "lambda1": self.lam1,
            "lambda_tilde": self.lam_tilde,
            "lambda_plus": self.lam_pm["right"],
            "lambda_minus": self.lam_pm["left"],
            "lambda2": self.lam2,
            "d_plus": t["right"].d,
            "d_minus": t["left"].d,
            "phi0_at_tip_plus": t["right"].phi0_at_tip,
            "phi0_at_tip_minus": t["left"].phi0_at_tip,
            "phi1_at_tip_plus": t["right"].phi1_at_tip,
            "phi1_at_tip_minus": t["left"].phi1_at_tip,
            "fit_residual_plus": t["right"].fit_residual,
            "fit_residual_minus": t["left"].fit_residual,
        }


def outer_expansion(mesh0: Mesh, geom: SlitGeometry, mode_index: int = 1, cutoff_c: float = 0.1,
                    radii=None, n_terms: int = 6, limiting: LimitingSolution | None = None,
                    gap_tol: float = 1e-3, sign: float = 1.0, quad_degree: int = 8,
                    recover: bool = True, guess: float | None = None) -> OuterExpansion:
    """Every outer coefficient and corrector for one limiting mesh.

    ``sign = -1`` runs the pipeline on ``-phi0`` (gauge check).  With
    ``recover`` the cut data near the tips use the fitted local expansions
    (see :func:`recover_traces`).
    """
    sol = limiting or solve_limiting(mesh0, mode_index, gap_tol=gap_tol, guess=guess)
    space, K, M = sol.space, sol.K, sol.M
    Mm = M.matrix
    lam0 = sol.lam0
    phi0 = sign * sol.phi0
    quad = CutQuadrature.build(space, geom, quad_degree)
    locator = PointLocator(space.mesh)
    h = tip_size(space.mesh)
    r_blend = 8 * h

    def traces(u):
        tr = quad.traces(u)
        if recover:
            tr = recover_traces(tr, recovery_fits(fe_sampler(space, u, locator), h), r_blend)
        return tr

    tr0_raw = quad.traces(phi0)
    lam1_m = -float(phi0 @ quad.load(tr0_raw, lam0))
    tr0 = traces(phi0)
    lam1 = lambda1_from_traces(tr0, geom, lam0)
    # the same value at a higher quadrature degree guards against under-integration
    quad_hi = CutQuadrature.build(space, geom, quad_degree + 6)
    tr_hi = quad_hi.traces(phi0)
    if recover:
        tr_hi = recover_traces(tr_hi, recovery_fits(fe_sampler(space, phi0, locator), h), r_blend)
    lam1_hi = lambda1_from_traces(tr_hi, geom, lam0)
    if abs(lam1 - lam1_hi) > 1e-6 * max(abs(lam1), 1e-9):
        raise ExpansionError(f"lambda1 quadrature not converged: {lam1!r} vs {lam1_hi!r}")

    solver = ProjectedSolver(K, M, lam0, phi0, sol.factor)
    b0 = quad.load(tr0, lam0)
    lam1_s = -float(phi0 @ b0)
    if abs(lam1_s - lam1) > 1e-3 * max(abs(lam1), 1e-9):
        raise ExpansionError(f"phi1 solvability constant {lam1_s} disagrees with lambda1 {lam1}")
    b1 = lam1_s * (Mm @ phi0) + b0
    phi1 = solver.solve(b1)

    tr1 = traces(phi1)
    base = lam1 * (Mm @ phi1) + quad.load(tr1, lam0) - lam1 * quad.load(tr0, lam0, stiffness=False)
    lam_t = -float(phi0 @ base)
    phit = solver.solve(base + lam_t * (Mm @ phi0), compat_tol=1e-6)
    lam_t_tr = lam1 * quad.c_form(tr0, tr0) + lam0 * quad.c_form(tr1, tr0) - quad.d_form(tr1, tr0)
    if abs(lam_t_tr - lam_t) > 1e-2 * max(abs(lam_t), 1e-9):
        raise ExpansionError(f"lambda_tilde mismatch: traces {lam_t_tr} vs solvability {lam_t}")

    k = math.sqrt(max(lam0, 0.0))
    radii = radii or default_radii(h)
    tips = {}
    for tip in TIPS:
        tips[tip] = extract_tip(
            fe_sampler(space, phi0, locator), tip, radii, k=k, n_terms=n_terms,
            phi1_sample=fe_sampler(space, phi1, locator),
        )

    psi, lam_pm = {}, {}
    for tip in TIPS:
        F = domain_load(space, lambda p, tip=tip: lifting_source(p, tip, cutoff_c, lam0))
        lam = float(phi0 @ F)
        psi_hat = solver.solve(lam * (Mm @ phi0) - F)
        psi[tip] = CorrectorField(f"PSI_{TIP_SIGN[tip].upper()}", psi_hat, {tip: 1.0}, cutoff_c,
                                  lam0, float(psi_hat @ (Mm @ phi0)))
        lam_pm[tip] = lam

    G = {tip: geom.tip_amplitude(tip) for tip in TIPS}
    singular = math.pi / 8 * sum((tips[t].d * G[t]) ** 2 for t in TIPS)
    lam2 = lam_t + singular
    weights = {t: -0.125 * tips[t].d * G[t] ** 2 for t in TIPS}
    phi2_fe = phit + sum(weights[t] * psi[t].coeffs for t in TIPS)
    phi2 = CorrectorField("PHI2", phi2_fe, weights, cutoff_c, lam0, float(phi2_fe @ (Mm @ phi0)))
    # the assembled phi2 is fitted with a free singular column, an independent check of the weights
    for tip in TIPS:
        fit2 = fit_tip(phi2.sampler(space, locator), tip, radii, n_terms=n_terms, general=True,
                       singular=True)
        extra = {f"phi2_{k_}": v for k_, v in fit2["all"].items()}
        tips[tip] = replace(tips[tip], coefficients={**tips[tip].coefficients, **extra})
    diagnostics = {
        "compat_phi1": solver.compatibility(b1),
        "orth_phi1": float(phi1 @ (Mm @ phi0)),
        "lambda1_high_degree": lam1_hi,
        "gap": sol.gap,
        "r_blend": r_blend,
    }
    return OuterExpansion(
        limiting=sol, quadrature=quad, lam0=lam0, lam1=lam1, lam1_matrix=lam1_m,
        lam1_solvability=lam1_s, lam_tilde=lam_t, lam_tilde_traces=lam_t_tr, lam_pm=lam_pm,
        lam2=lam2, tips=tips,
        phi1=CorrectorField("PHI1", phi1, {}, cutoff_c, lam0, float(phi1 @ (Mm @ phi0))),
        phi_tilde=CorrectorField("PHI_TILDE", phit, {}, cutoff_c, lam0, float(phit @ (Mm @ phi0))),
        psi=psi, phi2=phi2, diagnostics=diagnostics,
    )
