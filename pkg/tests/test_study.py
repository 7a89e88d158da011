import math
from dataclasses import replace

import numpy as np
import pytest

from slitspectra.study import (
    ConfigError,
    Extrapolation,
    PerturbedResult,
    StudyConfig,
    assemble_sweep,
    config_to_ini,
    fit_order,
    parse_config,
    predicted_excess,
    richardson,
    worker_count,
)

COEFFS = {"lambda0": 2.0, "lambda1": -0.5, "lambda_tilde": -0.3, "d_plus": 1.0, "d_minus": 1.0}


def test_fit_order_exact_square():
    f = fit_order([(e, e**2) for e in (0.1, 0.05, 0.025)])
    assert f.slope == pytest.approx(2.0, abs=1e-12) and not f.contaminated


def test_fit_order_cube_intercept():
    f = fit_order([(e, 3 * e**3) for e in (0.1, 0.05, 0.025)])
    assert f.slope == pytest.approx(3.0, abs=1e-12)
    assert f.intercept == pytest.approx(math.log(3), abs=1e-12)


def test_fit_order_flags_contamination():
    f = fit_order([(e, e**2 + 1e-3) for e in (0.16, 0.08, 0.04, 0.02)])
    assert f.slope < 2 and f.residual > 0 and f.contaminated


def test_fit_order_drops_nonpositive():
    f = fit_order([(0.1, 0.01), (0.05, 0.0), (0.025, 6.25e-4)])
    assert f.excluded == (0.05,) and f.contaminated
    assert f.slope == pytest.approx(2.0)
    assert fit_order([(0.1, 0.0), (0.05, 0.0), (0.02, 0.0)]).slope is None


def test_richardson_exact_rate():
    lim, C = 1.5, 0.3
    vals = [lim + C * h**2 for h in (0.1, 0.05, 0.025)]
    r = richardson(vals)
    assert r.value == pytest.approx(lim, abs=1e-14)
    assert r.rate == pytest.approx(2.0, abs=1e-9)
    assert r.uncertainty < 1e-12


def test_richardson_measured_rate():
    vals = [1.0 + 0.2 * h**1.5 for h in (0.1, 0.05, 0.025)]
    r = richardson(vals)
    assert r.value == pytest.approx(1.0, abs=1e-13) and r.rate == pytest.approx(1.5)
    assert r.uncertainty > 0


def test_richardson_non_monotone():
    r = richardson([1.0, 1.1, 1.05])
    assert r.rate is None and r.uncertainty == pytest.approx(0.05)


def test_config_roundtrip():
    cfg = StudyConfig()
    assert parse_config(config_to_ini(cfg)) == cfg
    text = "[study]\nmode_index = 2\nepsilons = 0.1, 0.05, 0.025\n[slit]\ng_tip_right = 0.9\n"
    c2 = parse_config(text)
    assert c2.mode_index == 2 and c2.epsilons == (0.1, 0.05, 0.025) and c2.geom.g_tip_right == 0.9
    assert parse_config(config_to_ini(c2)) == c2


@pytest.mark.parametrize("text", [
    "[bogus]\nx = 1\n",
    "[study]\nmood = 1\n",
    "[study]\nepsilons = 0.02, 0.04\n",
    "[study]\nlevels = 2\n",
    "[study]\nelement_order = 3\n",
    "[study]\ndeterministic = no\n",
    "[study]\nmode_index = one\n",
    "[mesh.perturbed]\nboundary_segments = 80\n",
    "[slit]\nt0 = 0.7\n",
    "not an ini file",
])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_worker_count(monkeypatch):
    monkeypatch.setenv("SLITSPECTRA_THREADS", "1")
    assert worker_count(4) == 1
    monkeypatch.setenv("SLITSPECTRA_THREADS", "x")
    with pytest.raises(ConfigError):
        worker_count(4)


def _results(fn, eps=(0.16, 0.08, 0.04, 0.02), unc=1e-12):
    return [PerturbedResult(e, (fn(e),) * 3, (1, 4, 16), Extrapolation(fn(e), unc, 2.0, (fn(e),) * 3),
                            None, None) for e in eps]


def test_sweep_bookkeeping(geom):
    c = dict(COEFFS, lambda2=COEFFS["lambda_tilde"] + predicted_excess(COEFFS, geom))
    lam = lambda e: c["lambda0"] + e * c["lambda1"] + e**2 * c["lambda2"] + 0.7 * e**3
    rep = assemble_sweep(_results(lam), c, geom)
    assert rep.slopes["err1"].slope == pytest.approx(2.0, abs=0.15)
    assert rep.slopes["err2"].slope == pytest.approx(3.0, abs=1e-9)
    for r in rep.records:
        # (S2 - S2_tilde) / eps^2 is the singular excess identically
        assert (r.S2 - r.S2_tilde) / r.epsilon**2 == pytest.approx(rep.predicted_rho, rel=1e-9)
    assert rep.lambda1_fd == pytest.approx(c["lambda1"], abs=0.02)
    assert [r.epsilon for r in rep.records] == [0.16, 0.08, 0.04, 0.02]


def test_sweep_excludes_noisy_points(geom):
    c = dict(COEFFS, lambda2=COEFFS["lambda_tilde"] + predicted_excess(COEFFS, geom))
    lam = lambda e: c["lambda0"] + e * c["lambda1"] + e**2 * c["lambda2"] + e**3
    rep = assemble_sweep(_results(lam, unc=2e-6), c, geom)
    assert 0.02 in rep.excluded["err2"] and rep.warnings


def test_sweep_zero_mode(geom):
    c = {k: 0.0 for k in ("lambda0", "lambda1", "lambda_tilde", "lambda2", "d_plus", "d_minus")}
    rep = assemble_sweep(_results(lambda e: 0.0), c, geom)
    assert all(r.err0 == r.err1 == r.err2 == 0.0 for r in rep.records)
    assert rep.slopes["err1"].slope is None and rep.slopes["err2"].slope is None


def _pair(lam):
    from slitspectra.fem import EigenPair

    return EigenPair(lam, np.zeros(1), 0.0, 1.0)


def test_choose_nearest_and_ambiguity():
    from slitspectra.study import AmbiguityError, _choose

    pairs = [_pair(1.9), _pair(2.1), _pair(2.5)]
    with pytest.raises(AmbiguityError):
        _choose(pairs, 2.0, None, 1e-3, 0.8)
    assert _choose(pairs, 2.0, [0.1, 0.95, 0.0], 1e-3, 0.8) == 1
    assert _choose([_pair(2.01), _pair(2.3)], 2.0, None, 1e-3, 0.8) == 0
    # overlap overrides proximity when the nearest candidate is the wrong mode
    assert _choose([_pair(2.01), _pair(2.3)], 2.0, [0.2, 0.9], 1e-3, 0.8) == 1


TINY = """
[study]
epsilons = 0.16, 0.08, 0.04
[mesh.limiting]
h_max = 0.3
grading = 0.5
boundary_segments = 48
[mesh.perturbed]
h_max = 0.3
grading = 0.5
boundary_segments = 48
"""


def test_tracked_perturbed_solve():
    from slitspectra.study import reference_mode, solve_perturbed_tracked

    cfg = parse_config(TINY)
    ref = reference_mode(cfg)
    lam0 = 2.1203
    r = solve_perturbed_tracked(cfg, 0.16, lam0, ref)
    # coarse bracket lam0 +- (|eps lam1| + 1) * 2
    assert abs(r.lam - lam0) < 2 * (0.16 * 0.46 + 1)
    assert r.overlap > 0.8
    # Galerkin: nested refinement never raises the eigenvalue
    assert r.levels[0] >= r.levels[1] >= r.levels[2]
    assert r.n_dofs[1] > 3 * r.n_dofs[0]
