"""Command line entry point: ``slitspectra <subcommand> [--config FILE]``.

Every subcommand reads the study config, writes its artifacts into the output
directory and can be rerun with the same result.  Exit codes: 0 success,
2 config error, 3 numerical failure (or missing upstream artifact),
4 acceptance violation under ``--check``.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

from . import study
from .fem import AssemblyError, CompatibilityError, ConvergenceError
from .geometry import TIPS, GeometryError
from .composite import inner_fields_for
from .inner import beta_table, check_basis, reexpand
from .meshgen import MeshError, mesh_limiting, mesh_perturbed, write_mesh
from .outer import TIP_SIGN, ExpansionError, TipExpansion

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_ACCEPT = 0, 2, 3, 4

log = logging.getLogger("slitspectra")


class MissingArtifact(RuntimeError):
    pass


# --------------------------------------------------------------------------
# Artifact I/O
# --------------------------------------------------------------------------


def fmt(v) -> str:
    if isinstance(v, bool) or v is None:
        return "" if v is None else str(v).lower()
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_csv(path: Path, columns, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([fmt(row[c] if isinstance(row, dict) else v) for c, v in
                        zip(columns, row if not isinstance(row, dict) else columns)])


def read_csv(path: Path) -> list[dict]:
    if not path.exists():
        raise MissingArtifact(f"{path} not found; run the upstream subcommand first")
    with open(path, newline="") as fh:
        return [dict(r) for r in csv.DictReader(fh)]


def write_coefficients(path: Path, values: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for k in sorted(values):
            fh.write(f"{k} = {fmt(float(values[k]))}\n")


def read_coefficients(path: Path) -> dict:
    if not path.exists():
        raise MissingArtifact(f"{path} not found; run `slitspectra correctors` first")
    out = {}
    for line in path.read_text().splitlines():
        if line.strip() and not line.lstrip().startswith("#"):
            k, _, v = line.partition("=")
            out[k.strip()] = float(v)
    return out


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def cmd_mesh(cfg: study.StudyConfig, args) -> int:
    out = cfg.output_dir / "meshes"
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    m = mesh_limiting(cfg.domain, cfg.geom, cfg.limiting_mesh)
    write_mesh(m, out / "limiting.mesh")
    rows.append(_mesh_row("limiting", 0.0, m))
    for eps in cfg.epsilons:
        m = mesh_perturbed(cfg.domain, cfg.geom, eps, cfg.perturbed_mesh)
        write_mesh(m, out / f"perturbed_{eps:g}.mesh")
        rows.append(_mesh_row("perturbed", float(eps), m))
    cols = ("kind", "epsilon", "n_vertices", "n_triangles", "min_angle", "tip_size_left",
            "tip_size_right")
    write_csv(cfg.output_dir / "meshes.csv", cols, rows)
    return EXIT_OK


def _mesh_row(kind, eps, m):
    g = m.grading_report
    return {"kind": kind, "epsilon": eps, "n_vertices": m.n_vertices, "n_triangles": m.n_triangles,
            "min_angle": float(g["min_angle"]), "tip_size_left": float(g.get("tip_size_left", math.nan)),
            "tip_size_right": float(g.get("tip_size_right", math.nan))}


def cmd_limit(cfg, args) -> int:
    rows = study.limiting_eigen_ladder(cfg)
    ex = study.richardson([r["lambda0"] for r in rows])
    write_csv(cfg.output_dir / "limit.csv", ("level", "n_vertices", "n_dofs", "lambda0", "gap"), rows)
    print(f"lambda0 = {ex.value:.10f} +- {ex.uncertainty:.1e} (rate {fmt(ex.rate)})")
    return EXIT_OK


CORRECTOR_COLUMNS = ("level", "n_vertices", "n_dofs") + study.COEFF_KEYS + ("lambda2",)


def cmd_correctors(cfg, args) -> int:
    ls = study.limiting_study(cfg, keep_level=cfg.levels - 1)
    write_csv(cfg.output_dir / "correctors.csv", CORRECTOR_COLUMNS, ls.levels)
    values = dict(ls.coefficients)
    values.update({f"{k}_uncertainty": v for k, v in ls.uncertainties.items()})
    finest = ls.levels[-1]
    values.update({f"finest_{k}": finest[k] for k in study.COEFF_KEYS + ("lambda2",)})
    values["mode_index"] = cfg.mode_index
    write_coefficients(cfg.output_dir / "coefficients.txt", values)
    # order-2 matching: re-expanded inner fields against the assembled phi2
    ex = ls.expansion
    inner = inner_fields_for(ex, cfg.geom)
    rows = []
    for tip in TIPS:
        rep = reexpand(inner[tip], cfg.epsilons[-1], 2)
        s = TIP_SIGN[tip]
        te: TipExpansion = ex.tips[tip]
        extracted = {
            (0, "constant"): te.phi0_at_tip,
            (0, "half"): te.d,
            (1, "constant"): te.phi1_at_tip,
            (2, "inverse_half"): te.coefficients.get("phi2_sing", float("nan")),
        }
        predicted = {
            (0, "constant"): rep.constant(0),
            (0, "half"): rep.half(0),
            (1, "constant"): rep.constant(1),
            (2, "inverse_half"): rep.inverse_half(2),
        }
        for key in extracted:
            p, e = predicted[key], extracted[key]
            rows.append({"tip": s, "order": key[0], "harmonic": key[1], "predicted": p,
                         "extracted": e, "relative_error": abs(e - p) / abs(p) if p else abs(e - p)})
    write_csv(cfg.output_dir / "matching.csv",
              ("tip", "order", "harmonic", "predicted", "extracted", "relative_error"), rows)
    c = ls.coefficients
    print(f"lambda0 = {c['lambda0']:.10f}  lambda1 = {c['lambda1']:.8f}  "
          f"lambda_tilde = {c['lambda_tilde']:.8f}  lambda2 = {c['lambda2']:.8f}")
    if args.check:
        return _verdict(_check_coefficients(cfg, values, rows))
    return EXIT_OK


def cmd_inner_check(cfg, args) -> int:
    n_max = args.n_max
    rows = [{"n": n, "j": j, "beta_j": float(b)} for n, j, b in beta_table(n_max)]
    write_csv(cfg.output_dir / "inner_beta.csv", ("n", "j", "beta_j"), rows)
    rep = check_basis(n_max)
    write_csv(cfg.output_dir / "inner_checks.csv", ("n", "harmonic", "neumann", "growth_1e4", "ok"),
              [{"n": n, "harmonic": r["harmonic"], "neumann": r["neumann"],
                "growth_1e4": r["growth"][-1], "ok": r["ok"]} for n, r in rep.items()])
    ok = all(r["ok"] for r in rep.values())
    print(f"inner basis n <= {n_max}: {'all checks pass' if ok else 'FAILED'}")
    if not ok:
        return EXIT_ACCEPT if args.check else EXIT_NUMERIC
    return EXIT_OK


def cmd_composite(cfg, args) -> int:
    read_coefficients(cfg.output_dir / "coefficients.txt")
    meshes = study.limiting_meshes(cfg)[: cfg.composite_level + 1]
    from .outer import outer_expansion

    guess, ex = None, None
    for m in meshes:
        ex = outer_expansion(m, cfg.geom, cfg.mode_index, cfg.cutoff_c, cfg.radii, cfg.n_terms,
                             gap_tol=cfg.gap_tol, quad_degree=cfg.quad_degree, guess=guess)
        guess = ex.lam0
    rows, orders = study.composite_study(cfg, ex)
    write_csv(cfg.output_dir / "composite.csv", study.COMPOSITE_COLUMNS, rows)
    lines = [f"N = {N}: order {fmt(o.slope) if o else 'undefined'}" for N, o in orders.items()]
    (cfg.output_dir / "composite_summary.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    if args.check:
        return _verdict([_composite_check(orders, cfg.mode_index)])
    return EXIT_OK


def cmd_sweep(cfg, args) -> int:
    coeffs = read_coefficients(cfg.output_dir / "coefficients.txt")
    if int(coeffs.get("mode_index", cfg.mode_index)) != cfg.mode_index:
        raise MissingArtifact("coefficients.txt was computed for another mode; rerun correctors")
    ref = study.reference_mode(cfg)
    rep = study.run_sweep(cfg, coeffs, ref)
    write_sweep(cfg.output_dir, rep)
    print(summary_text(rep))
    if args.check:
        return _verdict(_check_sweep(cfg, rep))
    return EXIT_OK


def write_sweep(out: Path, rep: study.SweepReport) -> None:
    write_csv(out / "sweep.csv", study.SWEEP_COLUMNS, [r.row() for r in rep.records])
    prov = []
    for r in rep.records:
        for lvl, (lam, n) in enumerate(zip(r.levels, r.n_dofs)):
            prov.append({"epsilon": r.epsilon, "level": lvl, "n_dofs": n, "lambda": lam})
    write_csv(out / "sweep_levels.csv", ("epsilon", "level", "n_dofs", "lambda"), prov)
    (out / "sweep_summary.txt").write_text(summary_text(rep) + "\n")


def summary_text(rep: study.SweepReport) -> str:
    lines = []
    for key in ("err1", "err2", "err2_tilde"):
        f = rep.slopes[key]
        s = "undefined" if f.slope is None else f"{f.slope:.4f} (fit residual {f.residual:.2e})"
        ex = rep.excluded.get(key)
        lines.append(f"slope {key}: {s}" + (f"; excluded eps {', '.join(f'{e:g}' for e in ex)}" if ex else ""))
    lines.append(f"predicted rho limit: {rep.predicted_rho:.6f}")
    for r in rep.records:
        lines.append(f"eps {r.epsilon:g}: rho = {r.rho:.6f}")
    if rep.lambda1_fd is not None:
        lines.append(f"lambda1 finite difference: {rep.lambda1_fd:.6f}")
    lines += [f"warning: {w}" for w in rep.warnings]
    return "\n".join(lines)


def sweep_from_csv(out: Path, coeffs: dict, geom) -> study.SweepReport:
    rows = read_csv(out / "sweep.csv")
    prov = read_csv(out / "sweep_levels.csv")
    results = []
    for r in rows:
        eps = float(r["epsilon"])
        lv = sorted((p for p in prov if float(p["epsilon"]) == eps), key=lambda p: int(p["level"]))
        ex = study.Extrapolation(float(r["lambda_fem"]), float(r["uncertainty"]), None,
                                 tuple(float(p["lambda"]) for p in lv))
        results.append(study.PerturbedResult(eps, ex.levels, tuple(int(p["n_dofs"]) for p in lv), ex,
                                             None, None))
    return study.assemble_sweep(results, coeffs, geom)


def cmd_report(cfg, args) -> int:
    out = cfg.output_dir
    coeffs = read_coefficients(out / "coefficients.txt")
    rep = sweep_from_csv(out, coeffs, cfg.geom)
    write_csv(out / "report.csv", study.SWEEP_COLUMNS, [r.row() for r in rep.records])
    text = [summary_text(rep)]
    comp_path = out / "composite.csv"
    orders = None
    if comp_path.exists():
        comp = read_csv(comp_path)
        orders = {}
        for N in sorted({int(r["N"]) for r in comp}):
            pts = [(float(r["epsilon"]), float(r["dual_norm_residual"])) for r in comp if int(r["N"]) == N]
            orders[N] = study.fit_order(pts) if len(pts) >= 3 else None
            text.append(f"composite N = {N}: order {fmt(orders[N].slope) if orders[N] else 'undefined'}")
    (out / "report.txt").write_text("\n".join(text) + "\n")
    print("\n".join(text))
    if args.svg:
        render_svg(out, rep)
    if args.check:
        results = _check_sweep(cfg, rep) + _check_coefficients(cfg, coeffs, None)
        if orders is not None:
            results.append(_composite_check(orders, cfg.mode_index))
        return _verdict(results)
    return EXIT_OK


def render_svg(out: Path, rep: study.SweepReport) -> None:
    try:
        import matplotlib

        matplotlib.use("svg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.warning("matplotlib not installed; SVG plots skipped")
        return
    matplotlib.rcParams["svg.hashsalt"] = "slitspectra"
    eps = [r.epsilon for r in rep.records]
    fig, ax = plt.subplots(figsize=(5, 4))
    for key, label in (("err1", "|lam - S1|"), ("err2", "|lam - S2|"), ("err2_tilde", "|lam - S2~|")):
        vals = [getattr(r, key) for r in rep.records]
        if all(v > 0 for v in vals):
            ax.loglog(eps, vals, "o-", label=label)
    ax.set_xlabel("eps")
    ax.set_ylabel("error")
    ax.legend()
    fig.savefig(out / "sweep_errors.svg", metadata={"Date": None})
    plt.close(fig)


# --------------------------------------------------------------------------
# Acceptance checks on artifacts
# --------------------------------------------------------------------------


def _check_coefficients(cfg, c: dict, matching_rows) -> list[tuple[str, bool, str]]:
    res = []
    if cfg.mode_index == 0:
        ok = all(abs(c.get(k, 0.0)) < 1e-8 for k in ("lambda0", "lambda1", "lambda_tilde", "lambda2"))
        return [("zero mode coefficients vanish", ok, "")]
    for tip in TIPS:
        s = TIP_SIGN[tip]
        d, lam = c[f"finest_d_{s}"], c[f"finest_lambda_{s}"]
        err = abs(lam + math.pi * d) / abs(math.pi * d)
        res.append((f"lambda_{s} = -pi d_{s}", err < 0.02, f"rel {err:.2e}"))
        pred = -0.125 * d * cfg.geom.tip_amplitude(tip) ** 2
        got = c[f"finest_phi2_singular_{s}"]
        err = abs(got - pred) / abs(pred)
        res.append((f"phi2 singular coefficient ({s})", err < 0.02, f"rel {err:.2e}"))
    return res


def _check_sweep(cfg, rep: study.SweepReport) -> list[tuple[str, bool, str]]:
    if cfg.mode_index == 0:
        ok = all(abs(r.lambda_fem) < 1e-8 for r in rep.records)
        return [("zero mode: lambda_eps = 0", ok, "")]
    res = []
    s1, s2 = rep.slopes["err1"].slope, rep.slopes["err2"].slope
    res.append(("slope err1 in [1.7, 2.3]", s1 is not None and 1.7 <= s1 <= 2.3, fmt(s1)))
    res.append(("slope err2 in [2.5, 3.5]", s2 is not None and 2.5 <= s2 <= 3.5, fmt(s2)))
    pred = rep.predicted_rho
    for r in sorted(rep.records, key=lambda r: r.epsilon)[:2]:
        rel = abs(r.rho - pred) / abs(pred)
        res.append((f"rho({r.epsilon:g}) vs pi/8 sum (d g)^2", rel < 0.1 and abs(r.rho) > 0.5 * abs(pred),
                    f"rel {rel:.2e}"))
    if rep.lambda1_fd is not None:
        l1 = rep.coefficients["lambda1"]
        rel = abs(rep.lambda1_fd - l1) / abs(l1)
        res.append(("lambda1 trace vs finite difference", rel < 0.03, f"rel {rel:.2e}"))
    return res


def _composite_check(orders, mode_index):
    if mode_index == 0:
        return ("composite residual (constant mode)", True, "not applicable")
    s = [orders[N].slope if orders.get(N) else None for N in (0, 1, 2)]
    ok = None not in s and s[0] < s[1] < s[2]
    return ("composite residual order increases with N", ok, ", ".join(fmt(v) for v in s))


def _verdict(results) -> int:
    for name, ok, detail in results:
        print(f"[{'PASS' if ok else 'FAIL'}] {name}" + (f" ({detail})" if detail else ""))
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_ACCEPT


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------

COMMANDS = {
    "mesh": cmd_mesh,
    "limit": cmd_limit,
    "correctors": cmd_correctors,
    "inner-check": cmd_inner_check,
    "composite": cmd_composite,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="study config file (INI format)")
    common.add_argument("--output", "-o", help="override the output directory")
    common.add_argument("--check", action="store_true", help="exit 4 if an acceptance check fails")
    common.add_argument("--verbose", "-v", action="store_true")
    p = argparse.ArgumentParser(prog="slitspectra", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "inner-check":
            sp.add_argument("--n-max", type=int, default=8)
        if name == "report":
            sp.add_argument("--svg", action="store_true", help="also write log-log SVG plots")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = study.load_config(args.config)
        if args.output:
            cfg = replace(cfg, output_dir=Path(args.output))
        cfg.output_dir.mkdir(parents=True, exist_ok=True)
        (cfg.output_dir / "config.ini").write_text(study.config_to_ini(cfg))
    except study.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](cfg, args)
    except MissingArtifact as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ExpansionError, ConvergenceError, CompatibilityError, AssemblyError, MeshError,
            GeometryError, study.AmbiguityError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
