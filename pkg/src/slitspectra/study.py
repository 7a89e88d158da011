"""Study configuration, mesh-ladder extrapolation and the epsilon sweep."""

from __future__ import annotations

import configparser
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .composite import DualNorm, build_composite, composite_residual, inner_fields_for
from .fem import EigenPair, FESpace, PointLocator, assemble, eig_near, evaluate
from .geometry import TIPS, DomainSpec, GeometryError, SlitGeometry
from .meshgen import MeshError, SizeField, check_slit_fits, mesh_ladder, mesh_limiting, mesh_perturbed
from .outer import TIP_SIGN, OuterExpansion, outer_expansion, solve_limiting

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class AmbiguityError(ArithmeticError):
    """Two perturbed eigenvalues are equally good matches for the tracked mode."""


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------

MESH_KEYS = ("h_max", "h_tip", "grading", "min_angle", "tip_factor", "curvature_fraction",
             "channel_layers", "boundary_segments")


@dataclass(frozen=True)
class StudyConfig:
    domain: DomainSpec = DomainSpec()
    geom: SlitGeometry = SlitGeometry()
    mode_index: int = 1
    epsilons: tuple[float, ...] = (0.16, 0.08, 0.04, 0.02)
    levels: int = 3
    order: int = 2
    limiting_mesh: SizeField = SizeField(boundary_segments=64)
    perturbed_mesh: SizeField = SizeField(h_max=0.15, grading=0.25, boundary_segments=64)
    eig_tol: float = 1e-10
    gap_tol: float = 1e-3
    overlap_min: float = 0.8
    radii: tuple[float, ...] | None = None
    n_terms: int = 6
    cutoff_c: float = 0.1
    quad_degree: int = 8
    composite_epsilons: tuple[float, ...] = (0.16, 0.08, 0.04)
    composite_orders: tuple[int, ...] = (0, 1, 2)
    composite_level: int = 1
    output_dir: Path = Path("slitspectra-out")
    deterministic: bool = True

    def validate(self) -> "StudyConfig":
        eps = np.asarray(self.epsilons, dtype=float)
        if len(eps) == 0 or np.any(eps <= 0) or np.any(np.diff(eps) >= 0):
            raise ConfigError("epsilons must be positive and strictly decreasing")
        ceps = np.asarray(self.composite_epsilons, dtype=float)
        if len(ceps) and (np.any(ceps <= 0) or np.any(np.diff(ceps) >= 0)):
            raise ConfigError("composite epsilons must be positive and strictly decreasing")
        try:
            self.domain.validate()
            for e in sorted(set(eps) | set(ceps)):
                check_slit_fits(self.domain, self.geom, float(e))
        except (GeometryError, MeshError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.order not in (1, 2):
            raise ConfigError("element_order must be 1 or 2")
        for name in ("eig_tol", "gap_tol", "overlap_min", "cutoff_c"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.mode_index < 0:
            raise ConfigError("mode_index must be nonnegative")
        if self.levels < 3:
            raise ConfigError("the mesh ladder needs at least three levels")
        if not 0 <= self.composite_level < self.levels:
            raise ConfigError("composite limiting_level must index the limiting ladder")
        if any(n not in (0, 1, 2) for n in self.composite_orders):
            raise ConfigError("composite orders must lie in 0..2")
        if self.limiting_mesh.outer_segments(self.domain) != self.perturbed_mesh.outer_segments(self.domain):
            # eigenvalue differences of order eps^3 are meaningless on different polygons
            raise ConfigError("limiting and perturbed meshes must share boundary_segments")
        if not self.deterministic:
            raise ConfigError("deterministic mode cannot be switched off")
        return self


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(",", " ").split())


def _size_field(sec: configparser.SectionProxy, base: SizeField) -> SizeField:
    kw = {}
    for key, val in sec.items():
        if key not in MESH_KEYS:
            raise ConfigError(f"unknown key {key!r} in [{sec.name}]")
        if key in ("channel_layers", "boundary_segments"):
            kw[key] = int(val) if val.strip() else None
        else:
            kw[key] = float(val)
    return replace(base, **kw)


_SECTIONS = {
    "study": {"mode_index", "epsilons", "levels", "element_order", "output_dir", "deterministic"},
    "domain": {"kind", "center", "semi_axes", "fourier", "clearance"},
    "slit": {"g_tip_left", "g_tip_right", "t0", "bump_plus", "bump_minus"},
    "mesh.limiting": set(MESH_KEYS),
    "mesh.perturbed": set(MESH_KEYS),
    "solver": {"eig_tol", "gap_tol", "overlap_min"},
    "extraction": {"radii", "n_terms", "cutoff_c", "quad_degree"},
    "composite": {"epsilons", "orders", "limiting_level"},
}


def parse_config(text: str, base: StudyConfig | None = None) -> StudyConfig:
    """Read the INI-style study config; missing keys keep their defaults."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    cfg = base or StudyConfig()
    kw: dict = {}
    try:
        for name in cp.sections():
            if name not in _SECTIONS:
                raise ConfigError(f"unknown section [{name}]")
            unknown = set(cp[name]) - _SECTIONS[name]
            if unknown:
                raise ConfigError(f"unknown key(s) {sorted(unknown)} in [{name}]")
        if "study" in cp:
            s = cp["study"]
            if "mode_index" in s:
                kw["mode_index"] = s.getint("mode_index")
            if "epsilons" in s:
                kw["epsilons"] = _floats(s["epsilons"])
            if "levels" in s:
                kw["levels"] = s.getint("levels")
            if "element_order" in s:
                kw["order"] = s.getint("element_order")
            if "output_dir" in s:
                kw["output_dir"] = Path(s["output_dir"])
            if "deterministic" in s:
                kw["deterministic"] = s.getboolean("deterministic")
        if "domain" in cp:
            d = cp["domain"]
            dk = {}
            if "kind" in d:
                dk["kind"] = d["kind"].strip()
            if "center" in d:
                dk["center"] = _floats(d["center"])
            if "semi_axes" in d:
                dk["semi_axes"] = _floats(d["semi_axes"])
            if "clearance" in d:
                dk["clearance"] = d.getfloat("clearance")
            if "fourier" in d:
                vals = _floats(d["fourier"])
                if len(vals) % 3:
                    raise ConfigError("fourier takes triples k, a_k, b_k")
                dk["fourier"] = tuple((int(vals[i]), vals[i + 1], vals[i + 2]) for i in range(0, len(vals), 3))
            kw["domain"] = replace(cfg.domain, **dk)
        if "slit" in cp:
            kw["geom"] = SlitGeometry(**{**_geom_kwargs(cfg.geom), **{k: float(v) for k, v in cp["slit"].items()}})
        if "mesh.limiting" in cp:
            kw["limiting_mesh"] = _size_field(cp["mesh.limiting"], cfg.limiting_mesh)
        if "mesh.perturbed" in cp:
            kw["perturbed_mesh"] = _size_field(cp["mesh.perturbed"], cfg.perturbed_mesh)
        if "solver" in cp:
            for k, v in cp["solver"].items():
                kw[k] = float(v)
        if "extraction" in cp:
            e = cp["extraction"]
            if "radii" in e:
                kw["radii"] = _floats(e["radii"]) or None
            if "n_terms" in e:
                kw["n_terms"] = e.getint("n_terms")
            if "cutoff_c" in e:
                kw["cutoff_c"] = e.getfloat("cutoff_c")
            if "quad_degree" in e:
                kw["quad_degree"] = e.getint("quad_degree")
        if "composite" in cp:
            c = cp["composite"]
            if "epsilons" in c:
                kw["composite_epsilons"] = _floats(c["epsilons"])
            if "orders" in c:
                kw["composite_orders"] = tuple(int(v) for v in _floats(c["orders"]))
            if "limiting_level" in c:
                kw["composite_level"] = c.getint("limiting_level")
        cfg = replace(cfg, **kw)
    except ConfigError:
        raise
    except (ValueError, TypeError, GeometryError, MeshError) as exc:
        raise ConfigError(f"invalid config value: {exc}") from exc
    return cfg.validate()


def load_config(path: str | os.PathLike | None) -> StudyConfig:
    if path is None:
        return StudyConfig().validate()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def _geom_kwargs(g: SlitGeometry) -> dict:
    return {f.name: getattr(g, f.name) for f in fields(g) if f.init}


def config_to_ini(cfg: StudyConfig) -> str:
    """Canonical text form of a config (round-trips through :func:`parse_config`)."""
    fmt = lambda xs: ", ".join(repr(float(x)) for x in xs)
    d = cfg.domain
    lines = [
        "[study]",
        f"mode_index = {cfg.mode_index}",
        f"epsilons = {fmt(cfg.epsilons)}",
        f"levels = {cfg.levels}",
        f"element_order = {cfg.order}",
        f"output_dir = {cfg.output_dir}",
        f"deterministic = {str(cfg.deterministic).lower()}",
        "",
        "[domain]",
        f"kind = {d.kind}",
        f"center = {fmt(d.center)}",
        f"semi_axes = {fmt(d.semi_axes)}",
        f"fourier = {', '.join(f'{k}, {a!r}, {b!r}' for k, a, b in d.fourier)}",
        f"clearance = {d.clearance!r}",
        "",
        "[slit]",
        *[f"{k} = {v!r}" for k, v in _geom_kwargs(cfg.geom).items()],
    ]
    for name, sf in (("mesh.limiting", cfg.limiting_mesh), ("mesh.perturbed", cfg.perturbed_mesh)):
        lines += ["", f"[{name}]"]
        for k in MESH_KEYS:
            v = getattr(sf, k)
            lines.append(f"{k} = {'' if v is None else v!r}")
    lines += [
        "",
        "[solver]",
        f"eig_tol = {cfg.eig_tol!r}",
        f"gap_tol = {cfg.gap_tol!r}",
        f"overlap_min = {cfg.overlap_min!r}",
        "",
        "[extraction]",
        f"radii = {fmt(cfg.radii) if cfg.radii else ''}",
        f"n_terms = {cfg.n_terms}",
        f"cutoff_c = {cfg.cutoff_c!r}",
        f"quad_degree = {cfg.quad_degree}",
        "",
        "[composite]",
        f"epsilons = {fmt(cfg.composite_epsilons)}",
        f"orders = {', '.join(str(n) for n in cfg.composite_orders)}",
        f"limiting_level = {cfg.composite_level}",
        "",
    ]
    return "\n".join(lines)


def worker_count(n_tasks: int) -> int:
    cap = os.environ.get("SLITSPECTRA_THREADS")
    n = os.cpu_count() or 1
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError as exc:
            raise ConfigError("SLITSPECTRA_THREADS must be an integer") from exc
    return max(1, min(n, n_tasks))


# --------------------------------------------------------------------------
# Extrapolation and order fits
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Extrapolation:
    """Richardson value from the last three levels of a halving ladder.

    ``rate`` is measured from the level differences; ``uncertainty`` is the
    spread between the measured-rate and nominal-rate extrapolants (or the
    last difference when the sequence is not monotone).
    """

    value: float
    uncertainty: float
    rate: float | None
    levels: tuple[float, ...]


def richardson(values, ratio: float = 2.0, nominal: float = 2.0,
               rate_bounds: tuple[float, float] = (0.5, 8.0)) -> Extrapolation:
    values = tuple(float(v) for v in values)
    if len(values) < 3:
        raise ValueError("Richardson extrapolation needs three levels")
    a, b, c = values[-3:]
    d1, d2 = a - b, b - c
    scale = max(abs(a), abs(b), abs(c), 1e-300)
    nominal_value = c + (c - b) / (ratio**nominal - 1.0)
    if max(abs(d1), abs(d2)) <= 1e-14 * scale:
        return Extrapolation(c, abs(d2), None, values)
    if d1 * d2 <= 0 or d2 == 0:
        return Extrapolation(nominal_value, abs(d2), None, values)
    p = math.log(d1 / d2) / math.log(ratio)
    p = min(max(p, rate_bounds[0]), rate_bounds[1])
    value = c + (c - b) / (ratio**p - 1.0)
    return Extrapolation(value, abs(value - nominal_value), p, values)


@dataclass(frozen=True)
class OrderFit:
    slope: float | None
    intercept: float | None
    residual: float | None
    used: tuple[float, ...]
    excluded: tuple[float, ...] = ()
    contaminated: bool = False

    def astuple(self):
        return self.slope, self.intercept, self.residual


def fit_order(errors, contamination_tol: float = 0.02) -> OrderFit:
    """Least-squares line through ``(log eps, log e)``.

    Points with ``e <= 0`` are dropped and listed in ``excluded``.  With
    fewer than two usable points the slope is undefined (``None``).  The fit
    residual is the largest deviation in ``log e``; above
    ``contamination_tol`` the data are flagged as not a single power law.
    """
    pts = [(float(x), float(e)) for x, e in errors]
    if len(pts) < 3:
        raise ValueError("fit_order needs at least three points")
    good = [(x, e) for x, e in pts if e > 0 and x > 0]
    excluded = tuple(x for x, e in pts if not (e > 0 and x > 0))
    if len(good) < 2:
        return OrderFit(None, None, None, tuple(x for x, _ in good), excluded, bool(excluded))
    X = np.log([x for x, _ in good])
    Y = np.log([e for _, e in good])
    A = np.stack([X, np.ones_like(X)], axis=1)
    (slope, icpt), *_ = np.linalg.lstsq(A, Y, rcond=None)
    resid = float(np.max(np.abs(Y - A @ np.array([slope, icpt]))))
    return OrderFit(float(slope), float(icpt), resid, tuple(x for x, _ in good), excluded,
                    bool(excluded) or resid > contamination_tol)


# --------------------------------------------------------------------------
# Limiting problem
# --------------------------------------------------------------------------

COEFF_KEYS = ("lambda0", "lambda1", "lambda_tilde", "lambda_plus", "lambda_minus", "d_plus",
              "d_minus", "phi0_at_tip_plus", "phi0_at_tip_minus", "phi1_at_tip_plus",
              "phi1_at_tip_minus", "phi2_singular_plus", "phi2_singular_minus")


def level_coefficients(ex: OuterExpansion) -> dict:
    c = {k: v for k, v in ex.coefficients().items() if not k.startswith("fit_residual")}
    for tip in TIPS:
        c[f"phi2_singular_{TIP_SIGN[tip]}"] = ex.tips[tip].coefficients.get("phi2_sing", 0.0)
    return c


@dataclass(eq=False)
class LimitingStudy:
    levels: list[dict]
    coefficients: dict
    uncertainties: dict
    expansion: OuterExpansion | None = None
    expansion_level: int | None = None


def limiting_meshes(cfg: StudyConfig):
    return mesh_ladder(mesh_limiting(cfg.domain, cfg.geom, cfg.limiting_mesh), cfg.levels)


def limiting_eigen_ladder(cfg: StudyConfig) -> list[dict]:
    """``lambda0`` on every level (no correctors)."""
    rows, guess = [], None
    for lvl, m in enumerate(limiting_meshes(cfg)):
        sol = solve_limiting(m, cfg.mode_index, cfg.order, cfg.gap_tol, tol=cfg.eig_tol, guess=guess)
        guess = sol.lam0
        rows.append({"level": lvl, "n_vertices": m.n_vertices, "n_dofs": sol.space.n_dofs,
                     "lambda0": sol.lam0, "gap": sol.gap})
    return rows


def predicted_excess(coeffs: dict, geom: SlitGeometry) -> float:
    """``pi/8 ((d+ g+)^2 + (d- g-)^2)``: the gap between ``lambda2`` and ``lambda_tilde``."""
    return math.pi / 8 * ((coeffs["d_plus"] * geom.tip_amplitude("right")) ** 2
                          + (coeffs["d_minus"] * geom.tip_amplitude("left")) ** 2)


def limiting_study(cfg: StudyConfig, keep_level: int | None = None) -> LimitingStudy:
    """Outer coefficients on the limiting ladder, Richardson-extrapolated.

    ``lambda2`` is rebuilt from the extrapolated ``lambda_tilde`` and ``d``
    so that ``lambda2 - lambda_tilde`` is exactly the singular excess.
    """
    keep_level = cfg.composite_level if keep_level is None else keep_level
    rows, guess, kept = [], None, None
    for lvl, m in enumerate(limiting_meshes(cfg)):
        ex = outer_expansion(m, cfg.geom, cfg.mode_index, cfg.cutoff_c, cfg.radii, cfg.n_terms,
                             gap_tol=cfg.gap_tol, quad_degree=cfg.quad_degree, guess=guess)
        guess = ex.lam0
        row = {"level": lvl, "n_vertices": m.n_vertices, "n_dofs": ex.limiting.space.n_dofs,
               **level_coefficients(ex)}
        rows.append(row)
        log.info("limiting level %d: %d dofs, lambda0 = %.10f", lvl, row["n_dofs"], ex.lam0)
        if lvl == keep_level:
            kept = ex
    coeffs, unc = {}, {}
    for k in COEFF_KEYS:
        r = richardson([row[k] for row in rows])
        coeffs[k], unc[k] = r.value, r.uncertainty
    if cfg.mode_index == 0:
        # constant mode: every correction vanishes identically
        for k in ("lambda0", "lambda1", "lambda_tilde", "d_plus", "d_minus"):
            if abs(coeffs[k]) < 1e-9:
                coeffs[k] = 0.0
    coeffs["lambda2"] = coeffs["lambda_tilde"] + predicted_excess(coeffs, cfg.geom)
    # first-order propagation through the d^2 terms
    unc["lambda2"] = unc["lambda_tilde"] + sum(
        math.pi / 4 * abs(coeffs[f"d_{TIP_SIGN[t]}"]) * cfg.geom.tip_amplitude(t) ** 2
        * unc[f"d_{TIP_SIGN[t]}"] for t in TIPS)
    for tip in TIPS:
        s = TIP_SIGN[tip]
        coeffs[f"phi2_singular_predicted_{s}"] = -0.125 * coeffs[f"d_{s}"] * cfg.geom.tip_amplitude(tip) ** 2
    coeffs["singular_excess"] = predicted_excess(coeffs, cfg.geom)
    return LimitingStudy(rows, coeffs, unc, kept, keep_level if kept is not None else None)


# --------------------------------------------------------------------------
# Perturbed problem
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ReferenceMode:
    """A coarse limiting eigenfunction used only for overlap tracking."""

    space: FESpace
    phi0: np.ndarray

    def sample(self, pts) -> np.ndarray:
        side = np.where(pts[:, 1] >= 0, 1.0, -1.0)
        return evaluate(self.space, self.phi0, pts, PointLocator(self.space.mesh), side, strict=False)


@dataclass(frozen=True, eq=False)
class PerturbedResult:
    eps: float
    levels: tuple[float, ...]
    n_dofs: tuple[int, ...]
    extrapolation: Extrapolation
    pair: EigenPair
    overlap: float | None

    @property
    def lam(self) -> float:
        return self.extrapolation.value


def _choose(pairs, target, overlaps, gap_tol, overlap_min):
    scale = max(1.0, abs(target))
    dist = np.array([abs(p.lam - target) for p in pairs])
    order = np.argsort(dist, kind="stable")
    i0, i1 = int(order[0]), int(order[1])
    tied = abs(dist[i0] - dist[i1]) < gap_tol * scale
    if overlaps is None:
        if tied:
            raise AmbiguityError(f"eigenvalues {pairs[i0].lam:.8g} and {pairs[i1].lam:.8g} are "
                                 f"equidistant from {target:.8g}")
        return i0
    good = [i for i in order if overlaps[i] > overlap_min]
    if tied:
        cand = [i for i in (i0, i1) if overlaps[i] > overlap_min]
        if len(cand) != 1:
            raise AmbiguityError(f"eigenvalues {pairs[i0].lam:.8g} and {pairs[i1].lam:.8g} are "
                                 f"equidistant from {target:.8g} and overlap does not decide")
        return cand[0]
    if overlaps[i0] <= overlap_min and good:
        return int(good[0])
    return i0


def solve_perturbed_tracked(cfg: StudyConfig, eps: float, lam0: float,
                            reference: ReferenceMode | None = None) -> PerturbedResult:
    """Perturbed eigenvalue tracked from ``lam0`` on a three-level ladder.

    On the coarsest level the candidate nearest ``lam0`` wins unless its mass
    overlap with the reference mode is below ``overlap_min`` while another
    candidate's is above; nested finer levels follow the previous value.
    """
    mesh = mesh_perturbed(cfg.domain, cfg.geom, eps, cfg.perturbed_mesh)
    lams, dofs, pair, overlap, target = [], [], None, None, lam0
    for lvl, m in enumerate(mesh_ladder(mesh, cfg.levels, slit=cfg.geom)):
        V = FESpace.build(m, cfg.order)
        K, M = assemble(m, cfg.order, V)
        Mm = M.matrix
        pairs = eig_near(K, M, target, 3, tol=cfg.eig_tol, coords=V.dof_coords)
        ref = None
        if lvl == 0 and reference is not None:
            ref = reference.sample(V.dof_coords)
            nref = math.sqrt(max(ref @ (Mm @ ref), 1e-300))
            overlaps = [abs(ref @ (Mm @ p.coeffs)) / nref for p in pairs]
        else:
            overlaps = None
        k = _choose(pairs, target, overlaps, cfg.gap_tol, cfg.overlap_min)
        pair = pairs[k]
        if ref is not None:
            overlap = overlaps[k]
            s = np.sign(ref @ (Mm @ pair.coeffs)) or 1.0
            pair = EigenPair(pair.lam, s * pair.coeffs, pair.residual, pair.mass_norm)
        lams.append(pair.lam)
        dofs.append(V.n_dofs)
        target = pair.lam
        log.info("eps %.4g level %d: %d dofs, lambda = %.11f", eps, lvl, V.n_dofs, pair.lam)
    ex = richardson(lams)
    if cfg.mode_index == 0 and max(abs(v) for v in lams) < 1e-9:
        ex = Extrapolation(0.0, max(abs(v) for v in lams), None, tuple(lams))
    return PerturbedResult(float(eps), tuple(lams), tuple(dofs), ex, pair, overlap)


def _perturbed_task(args):
    cfg, eps, lam0, reference = args
    r = solve_perturbed_tracked(cfg, eps, lam0, reference)
    # eigenvectors stay in the worker
    return replace(r, pair=EigenPair(r.pair.lam, np.zeros(0), r.pair.residual, r.pair.mass_norm))


def perturbed_sweep(cfg: StudyConfig, lam0: float, reference: ReferenceMode | None = None,
                    epsilons=None) -> list[PerturbedResult]:
    eps_list = list(cfg.epsilons if epsilons is None else epsilons)
    tasks = [(cfg, float(e), lam0, reference) for e in eps_list]
    n = worker_count(len(tasks))
    if n == 1:
        results = [_perturbed_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=n) as pool:
            results = list(pool.map(_perturbed_task, tasks))
    return sorted(results, key=lambda r: -r.eps)


def reference_mode(cfg: StudyConfig) -> ReferenceMode:
    m = mesh_limiting(cfg.domain, cfg.geom, cfg.limiting_mesh)
    sol = solve_limiting(m, cfg.mode_index, cfg.order, cfg.gap_tol, tol=cfg.eig_tol)
    return ReferenceMode(sol.space, sol.phi0)


# --------------------------------------------------------------------------
# Sweep report
# --------------------------------------------------------------------------

SWEEP_COLUMNS = ("epsilon", "lambda_fem", "uncertainty", "S0", "S1", "S2", "S2_tilde", "err0",
                 "err1", "err2", "err2_tilde", "rho")


@dataclass(frozen=True)
class SweepRecord:
    epsilon: float
    lambda_fem: float
    uncertainty: float
    S0: float
    S1: float
    S2: float
    S2_tilde: float
    err0: float
    err1: float
    err2: float
    err2_tilde: float
    rho: float
    levels: tuple[float, ...] = ()
    n_dofs: tuple[int, ...] = ()
    rate: float | None = None

    def row(self) -> tuple:
        return tuple(getattr(self, c) for c in SWEEP_COLUMNS)


@dataclass(frozen=True)
class SweepReport:
    records: tuple[SweepRecord, ...]
    slopes: dict
    excluded: dict
    warnings: tuple[str, ...]
    predicted_rho: float
    lambda1_fd: float | None
    coefficients: dict = field(default_factory=dict)


def make_record(res: PerturbedResult, coeffs: dict) -> SweepRecord:
    e, lam = res.eps, res.lam
    l0, l1, l2, lt = coeffs["lambda0"], coeffs["lambda1"], coeffs["lambda2"], coeffs["lambda_tilde"]
    S0, S1 = l0, l0 + e * l1
    S2, S2t = S1 + e * e * l2, S1 + e * e * lt
    return SweepRecord(e, lam, res.extrapolation.uncertainty, S0, S1, S2, S2t, abs(lam - S0),
                       abs(lam - S1), abs(lam - S2), abs(lam - S2t), (lam - S2t) / e**2,
                       res.levels, res.n_dofs, res.extrapolation.rate)


def lambda1_finite_difference(records) -> float | None:
    """``(lambda_eps - lambda0) / eps`` extrapolated linearly to ``eps = 0``."""
    if len(records) < 2:
        return None
    a, b = sorted(records, key=lambda r: r.epsilon)[:2]
    qa = (a.lambda_fem - a.S0) / a.epsilon
    qb = (b.lambda_fem - b.S0) / b.epsilon
    return qa - a.epsilon * (qb - qa) / (b.epsilon - a.epsilon)


def assemble_sweep(results, coeffs: dict, geom: SlitGeometry, zero_tol: float = 1e-10,
                   signal_fraction: float = 0.1) -> SweepReport:
    """Errors, slopes and the wrong-term ratio from extrapolated eigenvalues.

    An epsilon enters the fit of ``err_k`` only when its FEM uncertainty is
    below ``signal_fraction`` of that error; errors below ``zero_tol`` count
    as exact zeros (slope undefined).
    """
    records = tuple(sorted((make_record(r, coeffs) for r in results), key=lambda r: -r.epsilon))
    slopes, excluded, warnings = {}, {}, []
    for key in ("err0", "err1", "err2", "err2_tilde"):
        pts, drop = [], []
        for r in records:
            e = getattr(r, key)
            if e <= zero_tol:
                pts.append((r.epsilon, 0.0))
            elif r.uncertainty >= signal_fraction * e:
                drop.append(r.epsilon)
                warnings.append(f"{key}: eps = {r.epsilon:g} excluded, FEM uncertainty "
                                f"{r.uncertainty:.2e} exceeds {signal_fraction:.0%} of the signal {e:.2e}")
            else:
                pts.append((r.epsilon, e))
        excluded[key] = tuple(drop)
        if len(pts) >= 3:
            slopes[key] = fit_order(pts)
        else:
            slopes[key] = OrderFit(None, None, None, tuple(x for x, _ in pts), tuple(drop), True)
    for w in warnings:
        log.warning(w)
    return SweepReport(records, slopes, excluded, tuple(warnings), predicted_excess(coeffs, geom),
                       lambda1_finite_difference(records), dict(coeffs))


def run_sweep(cfg: StudyConfig, coeffs: dict, reference: ReferenceMode | None = None) -> SweepReport:
    missing = [k for k in ("lambda0", "lambda1", "lambda2", "lambda_tilde", "d_plus", "d_minus") if k not in coeffs]
    if missing:
        raise KeyError(f"coefficients missing: {missing}")
    results = perturbed_sweep(cfg, coeffs["lambda0"], reference)
    return assemble_sweep(results, coeffs, cfg.geom)


# --------------------------------------------------------------------------
# Composite residuals
# --------------------------------------------------------------------------

COMPOSITE_COLUMNS = ("epsilon", "N", "dual_norm_residual", "flux_defect", "observed_order")


def composite_study(cfg: StudyConfig, ex: OuterExpansion) -> tuple[list[dict], dict]:
    """Residual rows per ``(eps, N)`` and the least-squares order per ``N``."""
    inner = inner_fields_for(ex, cfg.geom)
    rows = []
    for eps in cfg.composite_epsilons:
        mesh = mesh_perturbed(cfg.domain, cfg.geom, eps, cfg.perturbed_mesh)
        V = FESpace.build(mesh, 2)
        K, M = assemble(mesh, 2, V)
        dual = DualNorm(K.matrix, M.matrix)
        for N in cfg.composite_orders:
            c = build_composite(ex, cfg.geom, eps, N, inner)
            rep = composite_residual(c, mesh, V, (K, M), dual)
            rows.append({"epsilon": float(eps), "N": N, "dual_norm_residual": rep.dual_norm,
                         "flux_defect": rep.flux_defect})
    orders = {}
    for N in cfg.composite_orders:
        sub = [r for r in rows if r["N"] == N]
        prev = None
        for r in sub:
            r["observed_order"] = (math.log(prev["dual_norm_residual"] / r["dual_norm_residual"])
                                   / math.log(prev["epsilon"] / r["epsilon"])
                                   if prev and r["dual_norm_residual"] > 0 and prev["dual_norm_residual"] > 0
                                   else float("nan"))
            prev = r
        pts = [(r["epsilon"], r["dual_norm_residual"]) for r in sub]
        orders[N] = fit_order(pts) if len(pts) >= 3 else None
    return rows, orders
