import json
from dataclasses import replace

import numpy as np
import pytest

from bulkdiff.cells import (AbarEstimate, BasisSpec, CellProblemSpec, assemble_abar, clear_cache,
                            corrector_covariance, duality_gap_J, estimate_abar, extrapolate_abar,
                            get_system, slope_check, solve_nu, solve_nu_star, solve_resolvent)
from bulkdiff.core import CoefficientModel, ValidationError
from bulkdiff.sector import solve_sector_cell
from bulkdiff.stats import combined_se

ID = CoefficientModel()
CI = CoefficientModel("count-indicator", 2.0)

# frozen from the sector-grid FD oracle (h = 1/64, K = 2, side 3, rho = 1)
SECTOR_NU_CI = 0.369783
SECTOR_NU_STAR_CI = 0.154392


def _spec(model, m=1, **kw):
    kw.setdefault("M", 1000)
    return CellProblemSpec(m=m, model=model, **kw)


# --- identity model ------------------------------------------------------------

def test_identity_nu_is_half():
    sol = solve_nu(_spec(ID))
    assert abs(sol.value - 0.5) <= 3 * sol.se
    assert sol.bound == "upper"


def test_identity_nu_star_is_half_with_unit_slope():
    sol = solve_nu_star(_spec(ID))
    assert abs(sol.value - 0.5) <= 3 * sol.se
    s = slope_check(sol, [1.0])
    assert abs(s.value - 1.0) <= 3 * s.se


def test_identity_J_vanishes():
    r = duality_gap_J(solve_nu(_spec(ID)), solve_nu_star(_spec(ID)))
    assert abs(r.value) <= 3 * r.se + 1e-12


def test_identity_J_quadratic_form_is_fitting_noise():
    # grad w is pure fitting noise here, so the nonnegative form decays like 1/M
    q = []
    for M in (1000, 2000):
        s = _spec(ID, M=M)
        q.append(duality_gap_J(solve_nu(s), solve_nu_star(s)).quadra)
    assert 0 <= q[1] < q[0] / 1.5
    assert q[0] < 0.01


def test_identity_abar_is_identity_in_2d():
    est = estimate_abar(_spec(ID, m=0, d=2, M=1500))
    assert np.all(np.abs(est.abar - np.eye(2)) <= 3 * est.abar_se + 1e-12)


def test_identity_resolvent_value_vanishes():
    for lam in (0.0, 1.0, 10.0):
        sol = solve_resolvent(_spec(ID, lam=lam))
        assert abs(sol.value) <= 3 * sol.se + 1e-12


# --- sandwich, slope, resolvent ----------------------------------------------

@pytest.mark.parametrize("m", [0, 1])
def test_count_indicator_sandwich(m):
    est = estimate_abar(_spec(CI, m=m))
    a, s = est.abar[0, 0], est.abar_se[0, 0]
    astar, sstar = est.abar_star[0, 0], est.abar_star_se[0, 0]
    assert 1.0 - 3 * sstar <= astar
    assert a <= 2.0 + 3 * s
    assert est.J[0] >= -3 * est.J_se[0]
    assert np.allclose(est.abar, est.abar.T)


def test_slope_check_matches_twice_nu_star():
    sol = solve_nu_star(_spec(CI))
    s = slope_check(sol, [1.0])
    # at the optimum E int grad u.a grad u = E int q.grad u, so the slope is 2 nu*
    assert abs(s.value - 2 * sol.value) <= 3 * combined_se(s.se, 2 * sol.se)


def test_resolvent_at_zero_reproduces_nu():
    spec = _spec(CI)
    a = solve_nu(spec)
    b = solve_resolvent(replace(spec, lam=0.0))
    assert np.allclose(a.coef, b.coef, rtol=1e-8, atol=1e-10)


def test_resolvent_coefficients_shrink_with_lambda():
    spec = _spec(CI)
    norms = [np.linalg.norm(solve_resolvent(replace(spec, lam=l)).coef) for l in (1.0, 10.0, 100.0)]
    assert norms[0] > norms[1] > norms[2]


def test_resolvent_needs_lambda():
    with pytest.raises(ValidationError):
        solve_resolvent(_spec(CI))
    with pytest.raises(ValidationError):
        CellProblemSpec(m=0, lam=-1.0)


def test_nested_basis_monotone_in_sample():
    small = _spec(CI, basis=BasisSpec(pairs=False))
    big = _spec(CI, basis=BasisSpec(pairs=True))
    assert solve_nu(big).value_in_sample <= solve_nu(small).value_in_sample + 1e-12
    assert solve_nu_star(big).value_in_sample >= solve_nu_star(small).value_in_sample - 1e-12


def test_count_indicator_d2_isotropic():
    est = estimate_abar(_spec(CI, m=0, d=2, M=1500, basis=BasisSpec(n_radial=4)))
    a, s = est.abar, est.abar_se
    assert abs(a[0, 0] - a[1, 1]) <= 3 * np.hypot(s[0, 0], s[1, 1])
    assert abs(a[0, 1]) <= 3 * s[0, 1] + 1e-12
    ev = np.linalg.eigvalsh(a)
    assert ev.min() >= 1.0 - 3 * s.max() and ev.max() <= 2.0 + 3 * s.max()


# --- sector oracle -----------------------------------------------------------

def test_sector_oracle_identity_closed_form():
    # truncated Poisson(3) on {0,1,2}: E[N]/(rho L) = 8/17, so both values are 4/17
    nu = solve_sector_cell(ID, 1.0, 3.0, K=2, h=1 / 16)
    star = solve_sector_cell(ID, 1.0, 3.0, K=2, h=1 / 16, mode="nu_star")
    assert abs(nu.value - 4 / 17) < 1e-10
    assert abs(star.value - 4 / 17) < 1e-10


def test_sector_oracle_frozen_values():
    nu = solve_sector_cell(CI, 1.0, 3.0, K=2, h=1 / 64)
    star = solve_sector_cell(CI, 1.0, 3.0, K=2, h=1 / 64, mode="nu_star")
    assert abs(nu.value - SECTOR_NU_CI) < 1e-5
    assert abs(star.value - SECTOR_NU_STAR_CI) < 1e-5
    # duality: with c = 8/17, abar = 2 nu / c >= abar* = c / (2 nu*)
    c = 8 / 17
    assert 2 * nu.value / c >= c / (2 * star.value)


def test_feature_identity_matches_truncated_law():
    sol = solve_nu(_spec(ID, max_count=2))
    assert abs(sol.value - 4 / 17) <= 3 * sol.se


# --- extrapolation -----------------------------------------------------------

def _fixture(m, val, se=1e-6):
    A = np.array([[val]])
    return AbarEstimate(m, A, np.full((1, 1), se), A, np.full((1, 1), se))


def test_extrapolation_synthetic_rate_one():
    ests = [_fixture(m, 1.5 + 3.0 ** -m) for m in range(4)]
    out = extrapolate_abar(ests)
    assert abs(out.alpha_hat - 1.0) < 1e-10
    assert abs(out.abar_inf[0, 0] - 1.5) < 1e-12
    assert out.extrapolation == "geometric tail"


def test_extrapolation_noise_floor_reports_last():
    ests = [_fixture(m, 1.0 + 1e-9 * (-1) ** m, se=1e-3) for m in range(3)]
    out = extrapolate_abar(ests)
    assert np.isnan(out.alpha_hat)
    assert np.allclose(out.abar_inf, ests[-1].abar)


def test_extrapolation_refuses_non_monotone():
    ests = [_fixture(0, 1.5), _fixture(1, 1.8), _fixture(2, 1.6)]
    out = extrapolate_abar(ests)
    assert out.extrapolation.startswith("refused")
    with pytest.raises(ValidationError):
        extrapolate_abar(ests[:2])


# --- independence, determinism, serialization --------------------------------

def test_corrector_self_covariance_positive():
    spec = _spec(CI, M=600)
    r = corrector_covariance(spec, 0, [0.0], [0.0], M=1000)
    assert r.value > 3 * r.se


def test_corrector_covariance_distant_cells():
    spec = _spec(CI, M=600)
    r = corrector_covariance(spec, 0, [0.0], [2.0], M=800, statistic="energy")
    assert abs(r.value) <= 3 * r.se
    with pytest.raises(ValidationError):
        corrector_covariance(spec, 0, [0.0], [0.5], M=10)


def test_seed_determinism_bitwise():
    spec = _spec(CI, M=300)
    clear_cache()
    a = solve_nu(spec)
    clear_cache()
    b = solve_nu(spec)
    assert np.array_equal(a.coef, b.coef) and a.value == b.value and a.se == b.se
    c = solve_nu(replace(spec, seed=1))
    assert not np.array_equal(a.coef, c.coef)


def test_polarization_requires_all_directions():
    spec = _spec(ID, m=0, d=2, M=200)
    with pytest.raises(ValidationError):
        assemble_abar([solve_nu(replace(spec, p=(1.0, 0.0))), solve_nu_star(replace(spec, p=(1.0, 0.0)))])


def test_solution_json_roundtrip():
    sol = solve_nu(_spec(ID, m=0, M=200))
    obj = json.loads(sol.to_json())
    assert obj["kind"] == "nu" and obj["value"] == sol.value
    est = estimate_abar(_spec(ID, m=0, M=200))
    assert json.loads(est.to_json())["abar"] == est.abar.tolist()


def test_system_is_cached_per_sample_set():
    spec = _spec(ID, m=0, M=200)
    assert get_system(spec) is get_system(replace(spec, p=(1.0,)))
