"""Outer domain, slit profiles and the coordinate frames attached to the tips.

Conventions
-----------
The segment [0, 1] x {0} is the limiting cut.  The left tip is ``O- = (0, 0)``
and the right tip is ``O+ = (1, 0)``.  Tip coordinates are ``x- = x`` and
``x+ = (1 - x1, x2)``; in both frames the cut runs along the positive first
axis, and the tip polar angle lives in ``[0, 2*pi)`` with ``theta -> 0`` on the
upper side of the cut and ``theta -> 2*pi`` on the lower side.

The slit ``omega_eps`` is ``{0 < x1 < 1, eps*g_minus(x1) < x2 < eps*g_plus(x1)}``.
Near each tip the profiles follow an exact square-root law, so in the inner
variables ``xi = x_tip / (g_tip * eps)**2`` the slit boundary is the parabola
``xi1 = xi2**2`` and the inner domain is ``Pi = {xi1 < xi2**2}``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

Side = Literal["+", "-"]
Tip = Literal["left", "right"]
TIPS: tuple[Tip, Tip] = ("left", "right")


class GeometryError(ValueError):
    """Raised for invalid geometry parameters or out-of-domain evaluations."""


# --------------------------------------------------------------------------
# Outer domain
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DomainSpec:
    """Smooth closed outer boundary given by an analytic radial family.

    ``kind`` is one of ``"circle"``, ``"ellipse"`` or ``"fourier"``.  The
    Fourier family is a circle of radius ``semi_axes[0]`` whose radius is
    modulated by ``1 + sum(a_k cos(k s) + b_k sin(k s))``.
    """

    kind: str = "ellipse"
    center: tuple[float, float] = (0.5, 0.0)
    semi_axes: tuple[float, float] = (1.25, 1.0)
    fourier: tuple[tuple[int, float, float], ...] = ()
    clearance: float = 0.5

    def __post_init__(self):
        if self.kind not in ("circle", "ellipse", "fourier"):
            raise GeometryError(f"unknown boundary family {self.kind!r}")
        if min(self.semi_axes) <= 0:
            raise GeometryError("semi-axes must be positive")
        if self.kind == "fourier":
            amp = sum(abs(a) + abs(b) for _, a, b in self.fourier)
            if amp >= 0.5:
                raise GeometryError("Fourier modulation too strong for a simple curve")

    def _radii(self) -> tuple[float, float]:
        a, b = self.semi_axes
        if self.kind in ("circle", "fourier"):
            return a, a
        return a, b

    def _modulation(self, s):
        m = np.ones_like(s)
        for k, a, b in self.fourier:
            m = m + a * np.cos(k * s) + b * np.sin(k * s)
        return m

    def boundary_point(self, s) -> np.ndarray:
        """Boundary point(s) at curve parameter ``s`` in [0, 2*pi)."""
        s = np.asarray(s, dtype=float)
        a, b = self._radii()
        m = self._modulation(s) if self.kind == "fourier" else 1.0
        x = self.center[0] + a * m * np.cos(s)
        y = self.center[1] + b * m * np.sin(s)
        return np.stack([x, y], axis=-1)

    def boundary_derivative(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        a, b = self._radii()
        if self.kind != "fourier":
            return np.stack([-a * np.sin(s), b * np.cos(s)], axis=-1)
        m = self._modulation(s)
        dm = np.zeros_like(s)
        for k, ak, bk in self.fourier:
            dm = dm - k * ak * np.sin(k * s) + k * bk * np.cos(k * s)
        return np.stack(
            [a * (dm * np.cos(s) - m * np.sin(s)), a * (dm * np.sin(s) + m * np.cos(s))],
            axis=-1,
        )

    def boundary_polygon(self, n: int) -> np.ndarray:
        """``n`` counter-clockwise vertices equally spaced in arc length."""
        fine = np.linspace(0.0, 2 * np.pi, 64 * n + 1)
        speed = np.linalg.norm(self.boundary_derivative(fine), axis=1)
        arc = np.concatenate([[0.0], np.cumsum(0.5 * (speed[1:] + speed[:-1]) * np.diff(fine))])
        targets = np.linspace(0.0, arc[-1], n + 1)[:-1]
        s = np.interp(targets, arc, fine)
        return self.boundary_point(s)

    def project(self, points: np.ndarray) -> np.ndarray:
        """Closest-parameter projection of points near the boundary onto it."""
        p = np.asarray(points, dtype=float) - np.asarray(self.center)
        a, b = self._radii()
        s = np.arctan2(p[:, 1] / b, p[:, 0] / a)
        for _ in range(8):
            q = self.boundary_point(s) - np.asarray(self.center)
            dq = self.boundary_derivative(s)
            diff = q - p
            num = np.sum(diff * dq, axis=1)
            den = np.sum(dq * dq, axis=1) + 1e-300
            s = s - num / den
        return self.boundary_point(s)

    def contains(self, points) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float)) - np.asarray(self.center)
        a, b = self._radii()
        s = np.arctan2(p[:, 1] / b, p[:, 0] / a)
        if self.kind == "fourier":
            s = np.arctan2(p[:, 1], p[:, 0])
            rad = a * self._modulation(s)
            return np.hypot(p[:, 0], p[:, 1]) < rad
        return (p[:, 0] / a) ** 2 + (p[:, 1] / b) ** 2 < 1.0

    def area(self) -> float:
        a, b = self._radii()
        if self.kind == "fourier":
            s = np.linspace(0.0, 2 * np.pi, 4097)[:-1]
            return float(0.5 * np.mean((a * self._modulation(s)) ** 2) * 2 * np.pi)
        return math.pi * a * b

    def segment_clearance(self) -> float:
        """Distance from the unit segment [0,1]x{0} to the boundary curve."""
        s = np.linspace(0.0, 2 * np.pi, 20001)
        pts = self.boundary_point(s)
        t = np.clip(pts[:, 0], 0.0, 1.0)
        return float(np.min(np.hypot(pts[:, 0] - t, pts[:, 1])))

    def validate(self) -> None:
        if not np.all(self.contains(np.array([[0.0, 0.0], [1.0, 0.0], [0.5, 0.0]]))):
            raise GeometryError("outer domain must contain the unit segment")
        gap = self.segment_clearance()
        if gap < self.clearance:
            raise GeometryError(
                f"segment clearance {gap:.4f} below configured {self.clearance:.4f}"
            )


# --------------------------------------------------------------------------
# Slit profiles
# --------------------------------------------------------------------------


def _quintic_blend(a, b, left, right):
    """Coefficients (in s = (t-a)/(b-a)) of the quintic with given 2-jets.

    ``left``/``right`` are ``(value, d/dt, d2/dt2)`` at ``t = a`` / ``t = b``.
    """
    L = b - a
    A = np.array(
        [
            [1, 0, 0, 0, 0, 0],
            [0, 1, 0, 0, 0, 0],
            [0, 0, 2, 0, 0, 0],
            [1, 1, 1, 1, 1, 1],
            [0, 1, 2, 3, 4, 5],
            [0, 0, 2, 6, 12, 20],
        ],
        dtype=float,
    )
    rhs = np.array(
        [left[0], L * left[1], L * L * left[2], right[0], L * right[1], L * L * right[2]]
    )
    return np.linalg.solve(A, rhs)


@dataclass(frozen=True)
class SlitGeometry:
    """Slit profile pair with square-root tips and a quintic middle blend.

    Parameters
    ----------
    g_tip_left, g_tip_right
        Tip amplitudes ``g^-`` and ``g^+``.
    t0
        Width of the exact square-root zones at each end.
    bump_plus, bump_minus
        Mid-profile amplitudes added to the upper (``g_plus``) and the
        magnitude of the lower (``g_minus``) profile.  The bump is
        ``64 (s(1-s))**3`` which is flat to second order at both junctions.
    """

    g_tip_left: float = 1.0
    g_tip_right: float = 0.8
    t0: float = 0.25
    bump_plus: float = 0.15
    bump_minus: float = 0.0
    _coef: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if not 0.0 < self.t0 < 0.5:
            raise GeometryError("t0 must lie in (0, 1/2)")
        if self.g_tip_left <= 0 or self.g_tip_right <= 0:
            raise GeometryError("tip amplitudes must be positive")
        a, b = self.t0, 1.0 - self.t0
        gl, gr = self.g_tip_left, self.g_tip_right

        def jet_left(t):
            return (gl * t**0.5, 0.5 * gl * t**-0.5, -0.25 * gl * t**-1.5)

        def jet_right(t):
            u = 1.0 - t
            return (gr * u**0.5, -0.5 * gr * u**-0.5, -0.25 * gr * u**-1.5)

        coef = _quintic_blend(a, b, jet_left(a), jet_right(b))
        object.__setattr__(self, "_coef", {"blend": coef})
        ts = np.linspace(1e-9, 1 - 1e-9, 4001)
        if np.any(self.g(ts, "+") <= 0) or np.any(self.g(ts, "-") >= 0):
            raise GeometryError("profiles must satisfy g_plus > 0 > g_minus on (0,1)")

    def tip_amplitude(self, tip: Tip) -> float:
        return self.g_tip_left if tip == "left" else self.g_tip_right

    def _magnitude(self, t, side: Side, deriv: int = 0):
        t = np.asarray(t, dtype=float)
        a, b = self.t0, 1.0 - self.t0
        L = b - a
        gl, gr = self.g_tip_left, self.g_tip_right
        bump = self.bump_plus if side == "+" else self.bump_minus
        out = np.empty_like(t)
        left = t < a
        right = t > b
        mid = ~(left | right)
        tl, tr = t[left], 1.0 - t[right]
        if deriv == 0:
            out[left] = gl * np.sqrt(tl)
            out[right] = gr * np.sqrt(tr)
        elif deriv == 1:
            out[left] = 0.5 * gl / np.sqrt(tl)
            out[right] = -0.5 * gr / np.sqrt(tr)
        else:
            raise ValueError("deriv must be 0 or 1")
        s = (t[mid] - a) / L
        c = self._coef["blend"]
        if deriv == 0:
            poly = np.polynomial.polynomial.polyval(s, c)
            out[mid] = poly + bump * 64.0 * (s * (1 - s)) ** 3
        else:
            dc = np.polynomial.polynomial.polyder(c)
            poly = np.polynomial.polynomial.polyval(s, dc) / L
            out[mid] = poly + bump * 64.0 * 3 * (s * (1 - s)) ** 2 * (1 - 2 * s) / L
        return out

    def g(self, t, side: Side):
        """Profile ``g_plus`` (side ``"+"``) or ``g_minus`` (side ``"-"``)."""
        sign = 1.0 if side == "+" else -1.0
        return sign * self._magnitude(t, side)

    def dg(self, t, side: Side):
        sign = 1.0 if side == "+" else -1.0
        return sign * self._magnitude(t, side, deriv=1)

    def slit_area(self, eps: float) -> float:
        """``eps * int_0^1 (g_plus - g_minus) dt`` by graded Gauss quadrature."""
        return eps * integrate_profile(lambda t: self.g(t, "+") - self.g(t, "-"))


def eval_slit_profile(geom: SlitGeometry, side: Side, t) -> np.ndarray | float:
    """Evaluate ``g_plus`` or ``g_minus`` at ``t`` in the open interval (0, 1)."""
    arr = np.asarray(t, dtype=float)
    if np.any(arr <= 0.0) or np.any(arr >= 1.0):
        raise GeometryError("slit profile is defined on the open interval (0, 1)")
    out = geom.g(np.atleast_1d(arr), side)
    return float(out[0]) if arr.ndim == 0 else out


def integrate_profile(f, n: int = 16) -> float:
    """Integrate ``f`` over (0,1) with ``t = s**2`` substitution at both ends."""
    x, w = np.polynomial.legendre.leggauss(n)
    total = 0.0
    # [0, 1/4] and [3/4, 1] via t = a + s^2 with s in [0, 1/2]
    s = 0.25 * (x + 1.0)
    ws = 0.25 * w
    total += np.sum(ws * 2 * s * f(s * s))
    total += np.sum(ws * 2 * s * f(1.0 - s * s))
    # middle panels
    edges = np.linspace(0.25, 0.75, 5)
    for lo, hi in zip(edges[:-1], edges[1:]):
        t = 0.5 * (hi - lo) * x + 0.5 * (hi + lo)
        total += np.sum(0.5 * (hi - lo) * w * f(t))
    return float(total)


# --------------------------------------------------------------------------
# Coordinate frames
# --------------------------------------------------------------------------


def tip_coordinates(x: np.ndarray, tip: Tip) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if tip == "left":
        return x.copy()
    return np.stack([1.0 - x[:, 0], x[:, 1]], axis=1)


def tip_polar(x: np.ndarray, tip: Tip, lower=None) -> tuple[np.ndarray, np.ndarray]:
    """Polar coordinates about a tip with the angle in [0, 2*pi).

    ``lower`` flags points that sit on the lower side of the cut; for those a
    vanishing ``x2`` maps to ``theta = 2*pi`` rather than 0.
    """
    xt = tip_coordinates(x, tip)
    r = np.hypot(xt[:, 0], xt[:, 1])
    theta = np.mod(np.arctan2(xt[:, 1], xt[:, 0]), 2 * np.pi)
    if lower is not None:
        lower = np.asarray(lower, dtype=bool)
        on_cut = lower & (xt[:, 1] == 0.0) & (xt[:, 0] > 0)
        theta = np.where(on_cut, 2 * np.pi, theta)
    return r, theta


@dataclass(frozen=True)
class CoordinateFrames:
    """Maps between outer, tip, inner and parabolic coordinates for one tip."""

    geom: SlitGeometry
    eps: float
    tip: Tip = "left"

    @property
    def scale(self) -> float:
        """Inner length scale ``(g_tip * eps)**2``."""
        return (self.geom.tip_amplitude(self.tip) * self.eps) ** 2

    def to_inner(self, x, lower=None):
        """Return ``(xi, rho, theta)`` for outer points ``x``."""
        xt = tip_coordinates(x, self.tip)
        xi = xt / self.scale
        r, theta = tip_polar(x, self.tip, lower)
        return xi, r / self.scale, theta

    def from_inner(self, xi) -> np.ndarray:
        xt = np.atleast_2d(np.asarray(xi, dtype=float)) * self.scale
        if self.tip == "left":
            return xt
        return np.stack([1.0 - xt[:, 0], xt[:, 1]], axis=1)


def to_inner(frames: CoordinateFrames, x, lower=None):
    return frames.to_inner(x, lower)


def parabolic_map(xi, tol: float = 1e-9, check: bool = True):
    """Return ``(z, w, zeta)`` with ``w = sqrt(z)`` cut along ``(1/4, inf)``.

    The branch is ``w = i sqrt(-z)`` (principal root), so ``Im w >= 0`` and
    the closure of ``Pi = {xi1 < xi2**2}`` maps onto ``Im w >= 1/2``.  The
    restriction is checked with a relative slack ``tol`` unless ``check`` is
    false; the formula itself is analytic across the parabola.
    """
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    if check:
        excess = xi[:, 0] - xi[:, 1] ** 2
        if np.any(excess > tol * (1.0 + np.abs(xi[:, 0]))):
            raise GeometryError("point lies inside the slit, outside the closure of Pi")
    z = (xi[:, 0] - 0.25) + 1j * xi[:, 1]
    w = 1j * np.sqrt(-z)
    # the principal root of -z for z on the upper edge of the cut
    upper_cut = (xi[:, 1] == 0.0) & (xi[:, 0] > 0.25)
    w = np.where(upper_cut, np.sqrt(np.maximum(xi[:, 0] - 0.25, 0.0)) + 0j, w)
    zeta = np.stack([w.real, w.imag], axis=1)
    return z, w, zeta


# --------------------------------------------------------------------------
# Cutoff
# --------------------------------------------------------------------------


def smoothstep_cutoff(r, c: float, deriv: int = 0):
    """Quintic smoothstep cutoff: 1 for ``r < c``, 0 for ``r > 2c``.

    ``deriv`` selects the value (0), first (1) or second (2) radial derivative.
    """
    r = np.asarray(r, dtype=float)
    s = np.clip((r - c) / c, 0.0, 1.0)
    inside = (r > c) & (r < 2 * c)
    if deriv == 0:
        return 1.0 - (10 * s**3 - 15 * s**4 + 6 * s**5)
    if deriv == 1:
        return np.where(inside, -(30 * s**2 - 60 * s**3 + 30 * s**4) / c, 0.0)
    if deriv == 2:
        return np.where(inside, -(60 * s - 180 * s**2 + 120 * s**3) / c**2, 0.0)
    raise ValueError("deriv must be 0, 1 or 2")
