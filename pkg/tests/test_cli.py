import csv

import pytest

from slitspectra.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, main, read_coefficients

TINY = """
[study]
epsilons = 0.16, 0.08, 0.04
mode_index = {mode}
[mesh.limiting]
h_max = 0.3
grading = 0.5
boundary_segments = 48
[mesh.perturbed]
h_max = 0.3
grading = 0.5
boundary_segments = 48
[composite]
epsilons = 0.16, 0.08, 0.04
limiting_level = 0
"""


def _cfg(tmp_path, mode=1):
    p = tmp_path / f"tiny{mode}.ini"
    p.write_text(TINY.format(mode=mode))
    return str(p)


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_unknown_flag_is_config_error(capsys):
    assert main(["sweep", "--bogus"]) == EXIT_CONFIG


def test_malformed_config(tmp_path, capsys):
    p = tmp_path / "bad.ini"
    p.write_text("[study]\nepsilons = 0.02, 0.04\n")
    assert main(["limit", "--config", str(p), "-o", str(tmp_path)]) == EXIT_CONFIG
    assert "strictly decreasing" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert main(["limit", "--config", str(tmp_path / "none.ini")]) == EXIT_CONFIG


def test_missing_upstream_artifacts(tmp_path, capsys):
    out = str(tmp_path / "out")
    assert main(["sweep", "-c", _cfg(tmp_path), "-o", out]) == EXIT_NUMERIC
    assert "slitspectra correctors" in capsys.readouterr().err
    assert main(["composite", "-c", _cfg(tmp_path), "-o", out]) == EXIT_NUMERIC


def test_inner_check(tmp_path):
    assert main(["inner-check", "-o", str(tmp_path), "--check"]) == EXIT_OK
    rows = _rows(tmp_path / "inner_beta.csv")
    assert list(rows[0]) == ["n", "j", "beta_j"]
    assert [(r["n"], r["j"], float(r["beta_j"])) for r in rows[:4]] == [
        ("2", "0", 1.0), ("3", "0", 1.5), ("4", "0", 2.0), ("4", "1", 1.0)]


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("tiny")
    cfg = _cfg(base)
    out = base / "out"
    codes = {c: main([c, "-c", cfg, "-o", str(out)]) for c in ("mesh", "correctors", "sweep", "composite")}
    return cfg, out, codes


def test_pipeline_codes(tiny_run):
    _, out, codes = tiny_run
    assert set(codes.values()) == {EXIT_OK}
    for name in ("meshes.csv", "correctors.csv", "coefficients.txt", "matching.csv", "sweep.csv",
                 "sweep_levels.csv", "composite.csv", "config.ini"):
        assert (out / name).exists(), name


def test_sweep_schema(tiny_run):
    rows = _rows(tiny_run[1] / "sweep.csv")
    assert list(rows[0]) == ["epsilon", "lambda_fem", "uncertainty", "S0", "S1", "S2", "S2_tilde",
                             "err0", "err1", "err2", "err2_tilde", "rho"]
    assert [float(r["epsilon"]) for r in rows] == [0.16, 0.08, 0.04]


def test_composite_schema(tiny_run):
    rows = _rows(tiny_run[1] / "composite.csv")
    assert list(rows[0]) == ["epsilon", "N", "dual_norm_residual", "flux_defect", "observed_order"]
    assert len(rows) == 9


def test_coefficients_file(tiny_run):
    c = read_coefficients(tiny_run[1] / "coefficients.txt")
    assert c["lambda0"] > 0 and "lambda2_uncertainty" in c and "finest_d_plus" in c


def test_report_is_byte_identical(tiny_run):
    cfg, out, _ = tiny_run
    assert main(["report", "-c", cfg, "-o", str(out)]) == EXIT_OK
    first = (out / "report.csv").read_bytes()
    assert main(["report", "-c", cfg, "-o", str(out)]) == EXIT_OK
    assert (out / "report.csv").read_bytes() == first
    assert first == (out / "sweep.csv").read_bytes()


def test_report_svg(tiny_run):
    pytest.importorskip("matplotlib")
    cfg, out, _ = tiny_run
    assert main(["report", "-c", cfg, "-o", str(out), "--svg"]) == EXIT_OK
    assert (out / "sweep_errors.svg").read_text().lstrip().startswith("<?xml")


def test_mode_zero_sweep(tmp_path):
    cfg, out = _cfg(tmp_path, mode=0), str(tmp_path / "out0")
    assert main(["correctors", "-c", cfg, "-o", out, "--check"]) == EXIT_OK
    assert main(["sweep", "-c", cfg, "-o", out, "--check"]) == EXIT_OK
    rows = _rows(tmp_path / "out0" / "sweep.csv")
    assert all(float(r["lambda_fem"]) == 0.0 and float(r["err2"]) == 0.0 for r in rows)
    assert "undefined" in (tmp_path / "out0" / "sweep_summary.txt").read_text()
