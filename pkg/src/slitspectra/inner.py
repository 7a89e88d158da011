"""Inner expansion near the tips in parabolic coordinates.

In the stretched variables ``xi = x_tip / (g eps)^2`` the slit becomes the
parabola interior ``xi1 > xi2^2`` and ``w = sqrt(xi1 - 1/4 + i xi2)`` maps its
complement onto the half-plane ``zeta2 = Im w > 1/2``.  The harmonic functions
with homogeneous Neumann data on ``zeta2 = 1/2`` are

    Y_n = Re w^n + sum_j beta_j Im w^(n-1-2j),

and ``X_n(xi) = Y_n(zeta(xi))`` grows like ``rho^(n/2) cos(n theta/2)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from math import comb

import numpy as np

from .geometry import TIPS, CoordinateFrames, SlitGeometry, parabolic_map

MAX_ORDER = 2


class UnsupportedOrderError(ValueError):
    pass


# --------------------------------------------------------------------------
# Basis
# --------------------------------------------------------------------------


def _neumann_re(n: int) -> dict[int, Fraction]:
    """``d/dzeta2 Re w^n`` on ``zeta2 = 1/2`` as ``{power of zeta1: coefficient}``."""
    out: dict[int, Fraction] = {}
    for j in range(n // 2):
        out[n - 2 - 2 * j] = Fraction(-n, 2) * comb(n - 1, 2 * j + 1) * Fraction(-1, 4) ** j
    return out


def _neumann_im(m: int) -> dict[int, Fraction]:
    """``d/dzeta2 Im w^m`` on ``zeta2 = 1/2``."""
    out: dict[int, Fraction] = {}
    for j in range((m - 1) // 2 + 1):
        out[m - 1 - 2 * j] = m * comb(m - 1, 2 * j) * Fraction(-1, 4) ** j
    return out


def solve_beta(n: int) -> tuple[Fraction, ...]:
    """Exact ``beta_j`` for ``j = 0 .. floor((n-2)/2)``; higher ``j`` vanish.

    ``Im w^m`` contributes a polynomial of degree ``m - 1`` whose parity
    matches that of ``Re w^n``, so eliminating the top degree first gives a
    triangular system with leading entries ``m``.
    """
    if n < 2:
        return ()
    residual = dict(_neumann_re(n))
    beta = []
    for j in range((n - 2) // 2 + 1):
        m = n - 1 - 2 * j
        col = _neumann_im(m)
        b = -residual.get(m - 1, Fraction(0)) / col[m - 1]
        for p, c in col.items():
            residual[p] = residual.get(p, Fraction(0)) + b * c
        beta.append(b)
    if any(v != 0 for v in residual.values()):
        raise ArithmeticError(f"Neumann system for Y_{n} left a residual")
    return tuple(beta)


@dataclass(frozen=True)
class InnerBasisFunction:
    """``Y_n`` with exact rational ``beta``; callable on ``xi`` points."""

    n: int
    beta_exact: tuple[Fraction, ...]

    @property
    def beta(self) -> np.ndarray:
        return np.array([float(b) for b in self.beta_exact])

    @property
    def powers(self) -> tuple[int, ...]:
        return tuple(self.n - 1 - 2 * j for j in range(len(self.beta_exact)))

    def holomorphic(self, w):
        """``H(w)`` with ``Y_n = Re H``: ``w^n - i sum beta_j w^m``."""
        w = np.asarray(w, dtype=complex)
        if self.n == 0:
            return np.ones_like(w)
        out = w**self.n
        for b, m in zip(self.beta, self.powers):
            out = out - 1j * b * w**m
        return out

    def of_w(self, w):
        return self.holomorphic(w).real

    def of_zeta(self, zeta):
        zeta = np.atleast_2d(np.asarray(zeta, dtype=float))
        return self.of_w(zeta[:, 0] + 1j * zeta[:, 1])

    def __call__(self, xi, check: bool = True):
        _, w, _ = parabolic_map(xi, check=check)
        return self.of_w(w)

    def at(self, frames: CoordinateFrames, x, lower=None, check: bool = True):
        """``X_n`` at outer points through the tip frame."""
        xi, _, _ = frames.to_inner(x, lower)
        return self(xi, check=check)


def build_Y(n: int) -> InnerBasisFunction:
    if n < 0:
        raise ValueError("n must be nonnegative")
    return InnerBasisFunction(n, solve_beta(n))


def beta_table(n_max: int) -> list[tuple[int, int, Fraction]]:
    """Rows ``(n, j, beta_j)`` for ``n <= n_max``."""
    return [(n, j, b) for n in range(n_max + 1) for j, b in enumerate(build_Y(n).beta_exact)]


# --------------------------------------------------------------------------
# Property checks
# --------------------------------------------------------------------------


def harmonicity_defect(Y: InnerBasisFunction, n_points: int = 64, h: float = 1e-3,
                       seed: int = 0) -> float:
    """Largest scaled 5-point Laplacian at random points of the half-plane."""
    rng = np.random.default_rng(seed)
    z1 = rng.uniform(-3.0, 3.0, n_points)
    z2 = rng.uniform(0.5 + 2 * h, 3.0, n_points)
    c = Y.of_zeta(np.stack([z1, z2], axis=1))
    nb = [Y.of_zeta(np.stack([z1 + a, z2 + b], axis=1))
          for a, b in ((h, 0), (-h, 0), (0, h), (0, -h))]
    lap = sum(nb) - 4 * c
    scale = np.maximum.reduce([np.abs(c)] + [np.abs(v) for v in nb]) + 1.0
    return float(np.max(np.abs(lap) / scale))


def neumann_defect(Y: InnerBasisFunction, n_points: int = 64, h: float = 1e-4) -> float:
    """Centered difference of ``d/dzeta2`` on ``zeta2 = 1/2``, relative to the gradient scale."""
    z1 = np.linspace(-3.0, 3.0, n_points)
    up = Y.of_zeta(np.stack([z1, 0.5 + h + 0 * z1], axis=1))
    dn = Y.of_zeta(np.stack([z1, 0.5 - h + 0 * z1], axis=1))
    side = Y.of_zeta(np.stack([z1 + h, 0.5 + 0 * z1], axis=1)) - Y.of_zeta(
        np.stack([z1 - h, 0.5 + 0 * z1], axis=1))
    scale = np.max(np.abs(side)) / (2 * h) + 1.0
    return float(np.max(np.abs(up - dn)) / (2 * h) / scale)


def growth_defect(Y: InnerBasisFunction, rhos=(1e2, 1e3, 1e4), theta: float = np.pi) -> np.ndarray:
    """``|Y_n - rho^(n/2) cos(n theta/2)| / rho^(n/2)`` along a ray.

    For even ``n`` this is ``|Y_n / (rho^(n/2) cos(n theta/2)) - 1|`` on the
    ray ``theta = pi``; for odd ``n`` the leading term vanishes there and the
    normalised difference is the meaningful quantity.
    """
    rhos = np.asarray(rhos, dtype=float)
    xi = np.stack([rhos * np.cos(theta), rhos * np.sin(theta)], axis=1)
    lead = rhos ** (0.5 * Y.n)
    return np.abs(Y(xi) - lead * np.cos(0.5 * Y.n * theta)) / lead


def check_basis(n_max: int = 8, tol: float = 1e-6) -> dict:
    report = {}
    for n in range(n_max + 1):
        Y = build_Y(n)
        harmonic, neumann = harmonicity_defect(Y), neumann_defect(Y)
        # the odd-n leading term vanishes on theta = pi, so an oblique ray is checked as well
        rays = [growth_defect(Y), growth_defect(Y, theta=0.5 * np.pi)]
        decays = all(np.all(np.diff(g) <= 1e-14) and g[-1] < 0.1 for g in rays)
        report[n] = {
            "harmonic": harmonic,
            "neumann": neumann,
            "growth": tuple(float(v) for v in rays[0]),
            "growth_oblique": tuple(float(v) for v in rays[1]),
            "ok": bool(harmonic < tol and neumann < tol and decays),
        }
    return report


# --------------------------------------------------------------------------
# Far-field (Laurent) coefficients
# --------------------------------------------------------------------------


def laurent_coefficients(Y: InnerBasisFunction, powers, radius: float, n_nodes: int = 256) -> dict:
    """Coefficients ``h_p`` of ``H = sum_p h_p s^p`` with ``s = sqrt(xi1 + i xi2)``.

    ``w = s sqrt(1 - 1/(4 s^2))`` is single valued for ``|s| > 1/2``, so a
    trapezoidal contour integral over the full circle ``|s| = radius`` (one
    turn in ``s`` is two turns about the tip) is spectrally accurate.  Then
    ``Re(h_p s^p) = rho^(p/2) (Re h_p cos(p theta/2) - Im h_p sin(p theta/2))``.
    """
    if radius <= 0.5:
        raise ValueError("contour must enclose the branch points")
    phi = 2 * np.pi * np.arange(n_nodes) / n_nodes
    s = radius * np.exp(1j * phi)
    w = s * np.sqrt(1.0 - 0.25 / s**2)
    H = Y.holomorphic(w)
    return {p: complex(np.mean(H * s ** (-p))) for p in powers}


# --------------------------------------------------------------------------
# Inner fields
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class InnerField:
    """``sum_n eps^n v_n`` with ``v_n = sum_k a[n][k] X_k`` at one tip."""

    tip: str
    amplitude: float
    coefficients: tuple[dict, ...]
    basis: dict = field(default_factory=dict, compare=False)

    @property
    def order(self) -> int:
        return len(self.coefficients) - 1

    def _Y(self, k: int) -> InnerBasisFunction:
        if k not in self.basis:
            self.basis[k] = build_Y(k)
        return self.basis[k]

    def term(self, n: int, xi, check: bool = True):
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        _, w, _ = parabolic_map(xi, check=check)
        out = np.zeros(len(xi))
        for k, a in self.coefficients[n].items():
            if a != 0.0:
                out += a * self._Y(k).of_w(w)
        return out

    def evaluate(self, xi, eps: float, order: int | None = None, check: bool = True):
        order = self.order if order is None else order
        if order > self.order:
            raise UnsupportedOrderError(f"inner field stored only to order {self.order}")
        return sum(eps**n * self.term(n, xi, check) for n in range(order + 1))

    def at(self, geom: SlitGeometry, eps: float, x, order: int | None = None, check: bool = True):
        frames = CoordinateFrames(geom, eps, self.tip)
        xi, _, _ = frames.to_inner(x)
        return self.evaluate(xi, eps, order, check)


def build_inner_fields(tips: dict, geom: SlitGeometry, phi2_tips: dict | None = None) -> dict:
    """``v_0 = phi0(O) X_0`` and ``v_1 = d g X_1 + phi1(O) X_0`` at each tip.

    With ``phi2_tips`` (``{tip: (phi2 constant, phi1 half-power coefficient,
    phi0 first-order coefficient)}``) an order-2 term is added,
    ``v_2 = c2 g^2 X_2 + d1 g X_1 + (phi2(O) + c2 g^2/4) X_0``.  The shift of
    the constant undoes the ``-1/4`` carried by ``Re w^2 = xi1 - 1/4``.
    """
    out = {}
    for tip in TIPS:
        te = tips[tip]
        G = geom.tip_amplitude(tip)
        terms = [{0: float(te.phi0_at_tip)}, {0: float(te.phi1_at_tip), 1: float(te.d * G)}]
        if phi2_tips is not None:
            c_phi2, d1, c2 = phi2_tips[tip]
            terms.append({0: float(c_phi2 + 0.25 * c2 * G**2), 1: float(d1 * G), 2: float(c2 * G**2)})
        out[tip] = InnerField(tip, G, tuple(terms))
    return out


@dataclass(frozen=True)
class MatchingReport:
    """Outer coefficients predicted by re-expanding an inner field.

    ``cos[j][p]`` / ``sin[j][p]`` are the coefficients of
    ``r^(p/2) cos(p theta/2)`` / ``r^(p/2) sin(p theta/2)`` in ``phi_j``.
    """

    tip: str
    eps: float
    cos: dict
    sin: dict

    def constant(self, j: int) -> float:
        return self.cos[j].get(0, 0.0)

    def half(self, j: int) -> float:
        return self.cos[j].get(1, 0.0)

    def inverse_half(self, j: int) -> float:
        return self.cos[j].get(-1, 0.0)


def reexpand(inner: InnerField, eps: float, order: int = 2, n_nodes: int = 256) -> MatchingReport:
    """Rewrite ``sum eps^n v_n`` in outer variables up to outer order ``order``.

    The Laurent contour sits at the outer edge of the blending annulus,
    ``r = 2 eps``, i.e. ``rho = 2 / (g^2 eps)``.
    """
    if order > MAX_ORDER or order < 0:
        raise UnsupportedOrderError(f"re-expansion implemented for orders 0..{MAX_ORDER}")
    G = inner.amplitude
    rho = max(2.0 / (G**2 * eps), 4.0)
    cos = {j: {} for j in range(order + 1)}
    sin = {j: {} for j in range(order + 1)}
    for n, terms in enumerate(inner.coefficients):
        for k, a in terms.items():
            # outer order j = n - p
            ps = [p for p in range(n - order, k + 1) if n - p >= 0]
            if not ps or a == 0.0:
                continue
            h = laurent_coefficients(inner._Y(k), ps, np.sqrt(rho), n_nodes)
            for p, hp in h.items():
                j = n - p
                cos[j][p] = cos[j].get(p, 0.0) + a * hp.real * G ** (-p)
                sin[j][p] = sin[j].get(p, 0.0) - a * hp.imag * G ** (-p)
    clean = lambda d: {j: {p: v for p, v in row.items() if abs(v) > 1e-13} for j, row in d.items()}
    return MatchingReport(inner.tip, eps, clean(cos), clean(sin))
