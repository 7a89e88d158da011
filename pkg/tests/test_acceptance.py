"""Acceptance criteria at their stated tolerances, one printed line each.

The default-config pipeline is run twice through the CLI (the second run
serves the determinism criterion) and once more for the constant mode.
Expect roughly ten minutes on one core.
"""

import math
import time
from fractions import Fraction

import numpy as np
import pytest

from slitspectra.cli import EXIT_OK, main, read_coefficients, read_csv
from slitspectra.fem import FESpace, assemble, eig_near
from slitspectra.geometry import DomainSpec, SlitGeometry
from slitspectra.inner import build_Y, check_basis
from slitspectra.meshgen import mesh_disk, mesh_ladder
from slitspectra.study import fit_order, richardson

from oracles import DISK_EIG

PIPELINE = ("mesh", "limit", "correctors", "sweep", "composite", "report")
CSV_ARTIFACTS = ("meshes.csv", "limit.csv", "correctors.csv", "matching.csv", "sweep.csv",
                 "sweep_levels.csv", "composite.csv", "report.csv")


def _run(out, commands=PIPELINE, config=None):
    times = {}
    for c in commands:
        t = time.perf_counter()
        args = [c, "-o", str(out)] + (["-c", str(config)] if config else [])
        code = main(args)
        times[c] = time.perf_counter() - t
        assert code == EXIT_OK, f"{c} exited with {code}"
    return times


@pytest.fixture(scope="session")
def full_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("accept_a")
    return out, _run(out)


@pytest.fixture(scope="session")
def second_run(tmp_path_factory, full_run):
    out = tmp_path_factory.mktemp("accept_b")
    return out, _run(out)


@pytest.fixture(scope="session")
def zero_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("accept_0")
    cfg = base / "mode0.ini"
    cfg.write_text("[study]\nmode_index = 0\n")
    out = base / "out"
    return out, _run(out, ("correctors", "sweep"), cfg)


@pytest.fixture
def verdict(capsys):
    def emit(num, ok, text):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {num}: {text}")
        assert ok, text
    return emit


def test_criterion_01_solvability_constant(full_run, verdict):
    out, times = full_run
    c = read_coefficients(out / "coefficients.txt")
    errs = {s: abs(c[f"finest_lambda_{s}"] + math.pi * c[f"finest_d_{s}"]) / abs(math.pi * c[f"finest_d_{s}"])
            for s in ("plus", "minus")}
    t = times["correctors"]
    ok = max(errs.values()) < 0.02 and t <= 300
    verdict(1, ok, "|lambda_pm + pi d_pm| / |pi d_pm|: "
            + ", ".join(f"{s} {e:.2e}" for s, e in errs.items()) + f" (< 0.02); {t:.0f} s (<= 300 s)")


def test_criterion_02_wrong_lambda_tilde(full_run, verdict):
    out, times = full_run
    rows = {float(r["epsilon"]): r for r in read_csv(out / "sweep.csv")}
    c = read_coefficients(out / "coefficients.txt")
    pred = c["singular_excess"]
    parts, ok = [], True
    for e in (0.04, 0.02):
        rho = float(rows[e]["rho"])
        rel = abs(rho - pred) / abs(pred)
        ok &= rel < 0.1 and abs(rho) > 0.5 * abs(pred)
        parts.append(f"rho({e:g}) = {rho:.5f} (rel {rel:.2e})")
    t = sum(times.values())
    ok &= t <= 1800
    verdict(2, ok, "; ".join(parts) + f" vs pi/8 sum (d g)^2 = {pred:.5f} (< 10%); pipeline {t:.0f} s")


def test_criterion_03_convergence_orders(full_run, verdict):
    out, _ = full_run
    rows = read_csv(out / "sweep.csv")
    slopes = {}
    for key in ("err1", "err2"):
        # only points whose FEM uncertainty is below 10% of the signal
        pts = [(float(r["epsilon"]), float(r[key])) for r in rows
               if float(r["uncertainty"]) < 0.1 * float(r[key])]
        slopes[key] = (fit_order(pts).slope if len(pts) >= 3 else None, len(pts))
    s1, s2 = slopes["err1"][0], slopes["err2"][0]
    ok = s1 is not None and 1.7 <= s1 <= 2.3 and s2 is not None and 2.5 <= s2 <= 3.5
    verdict(3, ok, f"slope |lam - S1| = {s1:.3f} over {slopes['err1'][1]} eps in [1.7, 2.3]; "
            f"slope |lam - S2| = {s2:.3f} over {slopes['err2'][1]} eps in [2.5, 3.5]")


def test_criterion_04_lambda1_cross_check(full_run, verdict):
    out, _ = full_run
    rows = sorted(read_csv(out / "sweep.csv"), key=lambda r: float(r["epsilon"]))
    c = read_coefficients(out / "coefficients.txt")
    (ea, la, sa), (eb, lb, sb) = [(float(r["epsilon"]), float(r["lambda_fem"]), float(r["S0"])) for r in rows[:2]]
    qa, qb = (la - sa) / ea, (lb - sb) / eb
    fd = qa - ea * (qb - qa) / (eb - ea)
    rel = abs(fd - c["lambda1"]) / abs(c["lambda1"])
    verdict(4, rel < 0.03, f"trace lambda1 = {c['lambda1']:.6f}, finite difference {fd:.6f} (rel {rel:.2e} < 0.03)")


def test_criterion_05_phi2_singular_coefficient(full_run, verdict):
    out, _ = full_run
    c = read_coefficients(out / "coefficients.txt")
    geom = SlitGeometry()
    parts, ok = [], True
    for s, tip in (("plus", "right"), ("minus", "left")):
        pred = -0.125 * c[f"finest_d_{s}"] * geom.tip_amplitude(tip) ** 2
        got = c[f"finest_phi2_singular_{s}"]
        rel = abs(got - pred) / abs(pred)
        ok &= rel < 0.02
        parts.append(f"{s}: {got:.6f} vs {pred:.6f} (rel {rel:.2e})")
    verdict(5, ok, "; ".join(parts) + " (< 0.02)")


def test_criterion_06_inner_basis(verdict):
    t = time.perf_counter()
    rep = check_basis(8, tol=1e-6)
    exact = (build_Y(0).beta_exact == () and build_Y(1).beta_exact == ()
             and build_Y(2).beta_exact == (Fraction(1),) and build_Y(2).powers == (1,))
    # Y_0 = 1, Y_1 = Re w, Y_2 = Re w^2 + Im w at sample points
    w = np.array([0.3 + 0.7j, -2.0 + 0.5j, 5.0 + 3.0j])
    vals = (np.allclose(build_Y(0).of_w(w), 1.0) and np.allclose(build_Y(1).of_w(w), w.real)
            and np.allclose(build_Y(2).of_w(w), (w**2).real + w.imag, rtol=0, atol=1e-14))
    t = time.perf_counter() - t
    worst_h = max(r["harmonic"] for r in rep.values())
    worst_n = max(r["neumann"] for r in rep.values())
    ok = all(r["ok"] for r in rep.values()) and exact and vals and t <= 10
    verdict(6, ok, f"n <= 8: harmonic {worst_h:.1e}, Neumann {worst_n:.1e} (< 1e-6), growth ok; "
            f"Y0, Y1, Y2 exact; {t:.2f} s")


def test_criterion_07_zero_mode(zero_run, verdict):
    out, _ = zero_run
    c = read_coefficients(out / "coefficients.txt")
    lam = {k: c[k] for k in ("lambda0", "lambda1", "lambda_tilde", "lambda2")}
    sweep = [abs(float(r["lambda_fem"])) for r in read_csv(out / "sweep.csv")]
    ok = max(abs(v) for v in lam.values()) < 1e-8 and max(sweep) < 1e-8
    verdict(7, ok, f"max |lambda_k| = {max(abs(v) for v in lam.values()):.1e}, "
            f"max |lambda_eps| = {max(sweep):.1e} (< 1e-8)")


def test_criterion_08_disk_calibration(verdict):
    d = DomainSpec(kind="circle", center=(0.0, 0.0), semi_axes=(1.0, 1.0))
    vals = []
    for m in mesh_ladder(mesh_disk(1.0, 0.2), 3, project=d.project):
        V = FESpace.build(m, 2)
        K, M = assemble(m, 2, V)
        vals.append(eig_near(K, M, 3.3, 1, coords=V.dof_coords)[0].lam)
    ex = richardson(vals)
    rel = abs(ex.value - DISK_EIG) / DISK_EIG
    verdict(8, rel < 1e-3, f"extrapolated {ex.value:.8f} vs (j'_11)^2 = {DISK_EIG:.8f} (rel {rel:.1e} < 1e-3)")


def test_criterion_09_composite_ordering(full_run, verdict):
    out, _ = full_run
    rows = read_csv(out / "composite.csv")
    slopes = []
    for N in (0, 1, 2):
        pts = [(float(r["epsilon"]), float(r["dual_norm_residual"])) for r in rows if int(r["N"]) == N]
        slopes.append(fit_order(pts).slope)
    ok = slopes[0] < slopes[1] < slopes[2]
    verdict(9, ok, "residual orders N=0,1,2: " + ", ".join(f"{s:.3f}" for s in slopes) + " (strictly increasing)")


def test_criterion_10_determinism(full_run, second_run, verdict):
    a, b = full_run[0], second_run[0]
    diff = [n for n in CSV_ARTIFACTS if (a / n).read_bytes() != (b / n).read_bytes()]
    verdict(10, not diff, f"{len(CSV_ARTIFACTS)} CSV artifacts byte-identical across two full runs"
            + (f"; differing: {diff}" if diff else ""))
