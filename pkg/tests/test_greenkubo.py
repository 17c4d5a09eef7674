import json
import math
from dataclasses import replace

import numpy as np
import pytest

from bulkdiff.cells import CellProblemSpec, estimate_abar, get_system, solve_nu, solve_resolvent
from bulkdiff.core import CoefficientModel, Domain, RandomStream, ValidationError
from bulkdiff.functionals import FeatureBasis, FeatureFunctional, affine_statistic, energy_samples, h1_norms
from bulkdiff.greenkubo import (REGIME_CONSTANT, REGIME_INTERMEDIATE, REGIME_SATURATED, CurrentFunctional,
                                classify_regime, current_apply, current_apply_sector, gk_bracket,
                                gk_integral_value, gk_mesoscale, gk_report, palm_flux, regime_rate,
                                regime_thresholds, representation_gap, resolvent_energies)
from bulkdiff.sector import SectorGridFunctional
from bulkdiff.stats import EstimatorResult, combined_se, mean_se

ID = CoefficientModel()
CI = CoefficientModel("count-indicator", 2.0)
PALM_CI = 0.5 * (2.0 - math.exp(-2.0))


def _zero_boundary(U, seed):
    B = FeatureBasis(U)
    return FeatureFunctional(B, np.random.default_rng(seed).normal(size=B.n_zero))


# --- current functional --------------------------------------------------------

def test_current_of_zero_is_zero():
    F = CurrentFunctional((1.0,), 1, CI)
    B = FeatureBasis(F.U)
    r = current_apply(F, FeatureFunctional(B, np.zeros(B.n_zero)), M=50, rng=1)
    assert r.value == 0.0


def test_current_requires_zero_boundary_and_samples():
    F = CurrentFunctional((1.0,), 1, CI)
    with pytest.raises(ValidationError):
        current_apply(F, affine_statistic(F.U, 1.0), M=10, rng=1)
    with pytest.raises(ValidationError):
        current_apply(F, _zero_boundary(F.U, 1), M=0, rng=1)
    with pytest.raises(ValidationError):
        CurrentFunctional((2.0,), 1, CI)


@pytest.mark.parametrize("seed", [2, 3, 4])
def test_identity_current_vanishes(seed):
    F = CurrentFunctional((1.0,), 1, ID)
    r = current_apply(F, _zero_boundary(F.U, seed), M=2000, rng=RandomStream(seed).generator())
    assert abs(r.value) <= 3 * r.se


def test_identity_current_vanishes_on_sector_grid():
    # integration by parts on the grid: the constant flux only sees zero boundary values
    U = Domain(1, "box", 3.0)
    T = SectorGridFunctional.from_functional(_zero_boundary(U, 5), U, 2, 1 / 32)
    assert abs(current_apply_sector(T, ID, 1.0)) < 1e-10


def test_current_is_linear_and_bounded():
    F = CurrentFunctional((1.0,), 1, CI)
    S = F.samples(800, RandomStream(6).generator())
    f, g = _zero_boundary(F.U, 7), _zero_boundary(F.U, 8)
    h = FeatureFunctional(f.basis, 2.0 * f.coef - g.coef)
    lhs = current_apply(F, h, samples=S).value
    rhs = 2.0 * current_apply(F, f, samples=S).value - current_apply(F, g, samples=S).value
    assert math.isclose(lhs, rhs, rel_tol=1e-10, abs_tol=1e-12)
    n = h1_norms(f, F.U, 1.0, 800, RandomStream(9).generator())
    grad = math.sqrt(max(n.h1 ** 2 - n.l2 ** 2, 0.0))
    assert abs(current_apply(F, f, samples=S).value) <= F.cauchy_schwarz_bound(grad)


def test_current_equals_corrector_energy():
    # exact on the fitting samples; held out, the fitted corrector carries an nf/M bias
    F = CurrentFunctional((1.0,), 1, CI)
    gaps = []
    for M in (1000, 4000):
        spec = CellProblemSpec(m=1, model=CI, M=M, eval_M=2000)
        phi = solve_nu(spec).corrector
        sysm = get_system(spec)
        assert abs(representation_gap(F, phi, phi, sysm.train).value) < 1e-6
        a = current_apply(F, phi, samples=sysm.train)
        assert a.value > 0
        gaps.append(representation_gap(F, phi, phi, sysm.eval))
    assert abs(gaps[1].value) < abs(gaps[0].value) / 3
    assert abs(gaps[1].value) <= 4 * gaps[1].se


def test_representations_agree_on_fixture_set():
    spec = CellProblemSpec(m=1, model=CI, M=1000)
    phi = solve_nu(spec).corrector
    F = CurrentFunctional((1.0,), 1, CI)
    sysm = get_system(spec)
    for seed in (10, 11, 12):
        v = _zero_boundary(F.U, seed)
        held = representation_gap(F, phi, v, sysm.eval)
        assert abs(held.value) <= 3 * held.se
        # on the fitting samples the normal equations make the gap vanish up to the ridge
        train = representation_gap(F, phi, v, sysm.train)
        assert abs(train.value) < 1e-6


# --- resolvent value ---------------------------------------------------------

@pytest.mark.parametrize("lam", [0.0, 0.1, 1.0, 10.0])
def test_identity_integral_vanishes(lam):
    r = gk_integral_value(CellProblemSpec(m=1, model=ID, M=1000, lam=lam))
    assert abs(r.value) <= 3 * r.se + 1e-12


def test_integral_tends_to_zero_for_large_lambda():
    spec = CellProblemSpec(m=1, model=CI, M=800)
    vals = [abs(gk_integral_value(replace(spec, lam=l), normalize=True).value) for l in (1.0, 100.0, 1e6)]
    assert vals[0] > vals[1] > vals[2]
    assert vals[2] < 1e-4


def test_integral_at_zero_matches_nu():
    # per sample: affine energy - nu - integral is the corrector representation gap
    spec = CellProblemSpec(m=1, model=CI, M=1000)
    nu = solve_nu(spec)
    res = solve_resolvent(replace(spec, lam=0.0))
    sysm = get_system(spec)
    l = affine_statistic(spec.U, 1.0)
    lhs = energy_samples(l, l, sysm.eval) - nu.samples - res.samples
    F = CurrentFunctional((1.0,), 1, CI)
    rhs = (F.sample_values(nu.corrector, sysm.eval)
           - energy_samples(nu.corrector, nu.corrector, sysm.eval, normalize=False)) / sysm.norm
    assert np.allclose(lhs, rhs, atol=1e-10)
    raw = gk_integral_value(replace(spec, lam=0.0))
    assert math.isclose(raw.value, res.value * 3.0, rel_tol=1e-12)


def test_resolvent_energy_nonincreasing_in_lambda():
    spec = CellProblemSpec(m=1, model=CI, M=800)
    e = resolvent_energies(spec, [0.0, 0.01, 0.1, 1.0, 10.0, 100.0, 1e4, 1e6])
    assert np.all(np.diff(e) <= 1e-12)
    assert e[-1] < 1e-6 * e[0]


def test_integral_rejects_negative_lambda():
    with pytest.raises(ValidationError):
        gk_report(CellProblemSpec(m=0, model=ID, M=50), -1.0, [[1.0]], None,
                  EstimatorResult(0.5, 0.0, 1))


# --- palm flux ---------------------------------------------------------------

def test_palm_flux_identity():
    assert palm_flux(ID, 1.0, [1.0], 10, 0).value == 0.5
    assert palm_flux(ID, 1.0, [0.6, 0.8], 10, 0).value == pytest.approx(0.5)


def test_palm_flux_count_indicator_void_probability():
    r = palm_flux(CI, 1.0, [1.0], 20000, RandomStream(13).generator())
    assert abs(r.value - PALM_CI) <= 3 * r.se
    assert 0.5 <= r.value <= 0.5 * CI.Lambda


def test_palm_flux_needs_samples():
    with pytest.raises(ValidationError):
        palm_flux(CI, 1.0, [1.0], 0, 0)


# --- regimes -----------------------------------------------------------------

def test_regime_labels():
    a, m = 1.0, 2
    lo = 3.0 ** (-2 * (1 + a) * m)
    assert regime_thresholds(m, a) == (1.0, lo)
    assert classify_regime(1.0, m, a) == REGIME_CONSTANT
    assert classify_regime(5.0, m, a) == REGIME_CONSTANT
    assert classify_regime(0.5, m, a) == REGIME_INTERMEDIATE
    assert classify_regime(lo, m, a) == REGIME_SATURATED
    assert classify_regime(0.0, m, a) == REGIME_SATURATED
    # lambda = 1 at m = 0 sits on both thresholds; constant wins
    assert classify_regime(1.0, 0, a) == REGIME_CONSTANT
    assert REGIME_INTERMEDIATE == "λ^{α/(2(1+α))}" and REGIME_SATURATED == "3^{−αm}"


def test_regime_rate_is_continuous_at_lower_threshold():
    a, m = 0.5, 2
    lo = 3.0 ** (-2 * (1 + a) * m)
    assert regime_rate(lo * (1 + 1e-9), m, a) == pytest.approx(regime_rate(lo, m, a), rel=1e-6)
    assert regime_rate(2.0, m, a) == 1.0


def test_regimes_need_alpha():
    with pytest.raises(ValidationError):
        regime_thresholds(1, float("nan"))
    rep = gk_bracket(1, 0.5, EstimatorResult(0.5, 0.0, 1), EstimatorResult(0.0, 0.0, 1), [[1.0]], None, [1.0])
    assert rep.regime == "unknown" and rep.alpha_source == "none"


def test_mesoscale():
    a, m = 0.7, 4
    assert gk_mesoscale(1.0, a, m) == 0
    assert gk_mesoscale(3.0 ** (-2 * (1 + a)), a, m) == 1
    ns = [gk_mesoscale(l, a, m) for l in np.logspace(-12, 1, 40)]
    assert all(x >= y for x, y in zip(ns, ns[1:]))
    assert max(ns) == m and min(ns) == 0
    with pytest.raises(ValidationError):
        gk_mesoscale(0.0, a, m)


# --- bracket -----------------------------------------------------------------

@pytest.mark.parametrize("lam", [0.0, 1.0])
def test_identity_bracket_vanishes(lam):
    spec = CellProblemSpec(m=1, model=ID, M=1000)
    rep = gk_report(spec, lam, [[1.0]], [[0.0]], palm_flux(ID, 1.0, [1.0], 10, 0), alpha_hat=1.0)
    assert rep.within(3.0)


def test_bracket_requires_inputs():
    with pytest.raises(ValidationError):
        gk_bracket(1, 0.5, None, EstimatorResult(0.0, 0.0, 1), [[1.0]], None, [1.0])
    with pytest.raises(ValidationError):
        gk_bracket(1, 0.5, EstimatorResult(0.5, 0.0, 1), EstimatorResult(0.0, 0.0, 1), None, None, [1.0])


def test_report_json_keeps_unicode():
    rep = gk_bracket(2, 0.5, EstimatorResult(0.9, 0.01, 1), EstimatorResult(0.05, 0.01, 1),
                     [[1.7]], [[0.02]], [1.0], alpha_hat=1.0, alpha_source="override")
    s = rep.to_json()
    assert "λ^{α/(2(1+α))}" in s
    obj = json.loads(s)
    assert obj["regime"] == REGIME_INTERMEDIATE and obj["alpha_source"] == "override"
    assert obj["bracket"] == pytest.approx(0.85 - 0.9 + 0.05)
    assert rep.reconstructed == pytest.approx(0.85)


def test_reconstruction_matches_variational_abar():
    spec = CellProblemSpec(m=1, model=CI, M=1000)
    est = estimate_abar(spec)
    palm = palm_flux(CI, 1.0, [1.0], 20000, RandomStream(14).generator())
    rep = gk_report(spec, 0.0, est.abar, est.abar_se, palm)
    half, half_se = 0.5 * est.abar[0, 0], 0.5 * est.abar_se[0, 0]
    assert abs(rep.reconstructed - half) <= 3 * combined_se(rep.reconstructed_se, half_se)


def test_count_indicator_bracket_shrinks_with_m():
    palm = palm_flux(CI, 1.0, [1.0], 20000, RandomStream(15).generator())
    ref = estimate_abar(CellProblemSpec(m=2, model=CI, M=1000, seed=1))
    reps = [gk_report(CellProblemSpec(m=m, model=CI, M=1000), 0.0, ref.abar, ref.abar_se, palm)
            for m in (0, 1, 2)]
    for a, b in zip(reps, reps[1:]):
        assert abs(b.bracket) <= abs(a.bracket) + 3 * combined_se(a.bracket_se, b.bracket_se)
