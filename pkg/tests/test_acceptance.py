"""Acceptance criteria AC1-AC8, each at its stated tolerance, one PASS/FAIL line per criterion."""
import math
import time

import numpy as np
from scipy.integrate import trapezoid

from bulkdiff.cells import CellProblemSpec, estimate_abar, solve_nu
from bulkdiff.core import CoefficientModel, Domain
from bulkdiff.dynamics import ChainParams, correlation_table, discrete_transition_matrix
from bulkdiff.experiment import task_seed
from bulkdiff.greenkubo import (REGIME_CONSTANT, REGIME_INTERMEDIATE, REGIME_SATURATED, classify_regime,
                                gk_report, palm_flux, regime_thresholds)
from bulkdiff.homogenized import (GridFunction, HeatKernel, apply_homog_semigroup, elliptic_mesoscale,
                                  gaussian_density, heat_kernel, parabolic_parameters, solve_homog_dirichlet)
from bulkdiff.sector import solve_sector_cell
from bulkdiff.stats import combined_se

ID = CoefficientModel()
CI = CoefficientModel("count-indicator", 2.0)
T27 = Domain.torus(27.0, 1)


def _bump(center=0.0, width=1.0, dom=T27, h=0.1):
    return GridFunction.from_function(lambda X: np.exp(-(X[:, 0] - center) ** 2 / (2 * width ** 2)), dom, h)


def _within(x, target, se, k=3.0):
    return abs(x - target) <= k * se + 1e-12


def test_ac1_identity_exactness(acceptance):
    t0 = time.perf_counter()
    checks = {}
    for m in (0, 1, 2):
        spec = CellProblemSpec(m=m, model=ID, M=1000)
        nu = solve_nu(spec)
        checks[f"nu m={m}"] = _within(nu.value, 0.5, nu.se)
        est = estimate_abar(spec)
        checks[f"abar m={m}"] = np.all(np.abs(est.abar - 1.0) <= 3 * est.abar_se + 1e-12)
        checks[f"J m={m}"] = _within(est.J[0], 0.0, est.J_se[0])
    est2 = estimate_abar(CellProblemSpec(m=0, d=2, model=ID, M=1500))
    checks["abar d=2"] = np.all(np.abs(est2.abar - np.eye(2)) <= 3 * est2.abar_se + 1e-12)
    palm = palm_flux(ID, 1.0, [1.0], 10, 0)
    for lam in (0.0, 0.1, 1.0, 10.0):
        rep = gk_report(CellProblemSpec(m=1, model=ID, M=1000), lam, [[1.0]], [[0.0]], palm)
        checks[f"gk lam={lam}"] = rep.within(3.0)
    rows = correlation_table([(0.5, 0.0), (1.0, 0.0)], _bump(), _bump(0.5, 1.5), ChainParams(0.05, T27, ID),
                             2000, seed=1)
    for r in rows:
        checks[f"two-point t-s={r.t - r.s}"] = r.within(3.0)
    dt = time.perf_counter() - t0
    ok = acceptance("AC1 identity-model exactness", checks, f"{dt:.0f}s")
    assert ok


def test_ac2_structural_order(acceptance):
    t0 = time.perf_counter()
    checks = {}
    ests = [estimate_abar(CellProblemSpec(m=m, model=CI, M=4000, control_variate=True)) for m in range(4)]
    nus = [solve_nu(CellProblemSpec(m=m, model=CI, M=4000, control_variate=True)) for m in range(4)]
    for e in ests:
        checks[f"abar* >= 1 m={e.m}"] = e.abar_star[0, 0] >= 1.0 - 3 * e.abar_star_se[0, 0]
        checks[f"abar <= 2 m={e.m}"] = e.abar[0, 0] <= 2.0 + 3 * e.abar_se[0, 0]
    for a, b in zip(nus, nus[1:]):
        checks[f"nu monotone m={a.m}->{b.m}"] = b.value <= a.value + 3 * combined_se(a.se, b.se)
    J = np.array([e.J[0] for e in ests[:3]])
    slope = np.polyfit(np.arange(3), np.log(np.maximum(J, 1e-300)), 1)[0] if np.all(J > 0) else float("nan")
    checks["J log-slope < 0"] = slope < 0
    dt = time.perf_counter() - t0
    detail = f"nu={[round(n.value, 4) for n in nus]} J={np.round(J, 4).tolist()} slope={slope:.3f} {dt:.0f}s"
    assert acceptance("AC2 structural order", checks, detail)


def test_ac3_oracle_equivalence(acceptance):
    t0 = time.perf_counter()
    oracle = solve_sector_cell(CI, 1.0, 3.0, K=2, h=1 / 64).value
    sol = solve_nu(CellProblemSpec(m=1, model=CI, M=3000, max_count=2))
    rel = abs(sol.value - oracle) / oracle
    checks = {"relative gap <= 5%": rel <= 0.05, "upper-bound direction": sol.value >= oracle - 3 * sol.se}
    dt = time.perf_counter() - t0
    detail = f"feature {sol.value:.5f}+-{sol.se:.5f} oracle {oracle:.6f} rel {rel:.3%} {dt:.0f}s"
    assert acceptance("AC3 oracle equivalence", checks, detail)


def test_ac4_equal_time_white_noise(acceptance):
    t0 = time.perf_counter()
    fixtures = [(_bump(), _bump()), (_bump(), _bump(1.0)), (_bump(width=0.5), _bump(0.3, 2.0)),
                (_bump(-4.0, 1.5), _bump(-3.0, 1.0)), (_bump(width=3.0), _bump(6.0, 2.0))]
    params = ChainParams(0.1, T27, CI)
    checks = {}
    for k, (f, g) in enumerate(fixtures):
        r = correlation_table([(0.0, 0.0)], f, g, params, 2000, seed=task_seed(0, 4, k), abar=[[1.87]])[0]
        checks[f"pair {k}"] = abs(r.prediction - f.inner(g)) < 1e-12 and r.within(3.0)
    dt = time.perf_counter() - t0
    assert acceptance("AC4 equal-time white noise", checks, f"{dt:.0f}s")


def test_ac5_heat_kernel_and_pde(acceptance):
    checks = {}
    hk = HeatKernel.identity(1)
    x = np.linspace(-40, 40, 80001)
    for t in (0.5, 2.0, 8.0):
        checks[f"mass t={t}"] = abs(trapezoid(heat_kernel(hk, t, x), x) - 1.0) < 1e-6
    checks["Psi_1(0)"] = abs(heat_kernel(hk, 1.0, 0.0) - 1 / math.sqrt(2 * math.pi)) < 1e-12
    for A in (1.0, 1.87):
        hka = HeatKernel(np.array([[A]]))
        g = GridFunction.from_function(lambda X: gaussian_density(X, [[1.0]]), Domain.torus(40.0, 1), 0.05)
        a = apply_homog_semigroup(apply_homog_semigroup(g, 1.0, hka), 0.5, hka)
        b = apply_homog_semigroup(g, 1.5, hka)
        checks[f"composition abar={A}"] = np.abs(a.values - b.values).max() < 1e-6
    dom = Domain.cube(1, 1)
    L = dom.side
    errs = []
    for n in (32, 64, 128):
        f = GridFunction.from_function(lambda X: (math.pi / L) ** 2 * np.sin(math.pi * (X[:, 0] + L / 2) / L),
                                       dom, L / n)
        u = solve_homog_dirichlet(f, 1.0)
        errs.append(np.abs(u.values - np.sin(math.pi * (u.coords()[:, 0] + L / 2) / L)).max())
    ratios = [errs[i] / errs[i + 1] for i in range(2)]
    checks["Dirichlet O(h^2)"] = all(3.5 < r < 4.5 for r in ratios)
    for t in (1.0, 3.0 ** 8, 3.0 ** 16, 10.0 ** 6, 3.0 ** 32, 3.0 ** 48):
        pp = parabolic_parameters(t)
        checks[f"tau t={t:g}"] = pp.tau == t ** 0.75
        checks[f"3^n ~ t^(1/16) t={t:g}"] = abs(pp.n - math.log(t, 3) / 16) <= 0.5 + 1e-12
    checks["t=3^16 -> 3^n=3, tau=3^12"] = (parabolic_parameters(3.0 ** 16).n == 1
                                          and parabolic_parameters(3.0 ** 16).tau == 3.0 ** 12)
    assert acceptance("AC5 heat kernel and PDE determinism", checks, f"ratios {np.round(ratios, 3).tolist()}")


def test_ac6_reversibility(acceptance):
    t0 = time.perf_counter()
    checks = {}
    for model in (CI, CoefficientModel("smooth-count", 2.0, width=0.4)):
        K, _ = discrete_transition_matrix(model)
        checks[f"detailed balance {model.kind}"] = np.max(np.abs(K - K.T)) < 1e-10
    f = _bump()
    for model, abar in ((ID, None), (CI, [[1.87]])):
        est = [correlation_table([(1.0, 0.0)], f, f, ChainParams(dt, T27, model), 600, seed=18, abar=abar)[0]
               for dt in (0.1, 0.05)]
        checks[f"dt-halving {model.kind}"] = abs(est[0].estimate - est[1].estimate) <= 3 * combined_se(
            est[0].se, est[1].se)
    dt = time.perf_counter() - t0
    assert acceptance("AC6 reversibility certificate", checks, f"{dt:.0f}s")


def test_ac7_formula_fidelity(acceptance):
    checks = {}
    for a in (0.0, 0.3, 1.0, 2.5):
        checks[f"beta a={a}"] = parabolic_parameters(3.0 ** 16, alpha_hat=a).beta == min(a, 1.0) / 16
        for m in range(6):
            checks[f"elliptic n m={m} a={a}"] = elliptic_mesoscale(m, a) == math.floor(m / (1 + a))
            hi, lo = regime_thresholds(m, a)
            checks[f"thresholds m={m} a={a}"] = hi == 1.0 and lo == 3.0 ** (-2 * (1 + a) * m)
            if m >= 1:
                checks[f"labels m={m} a={a}"] = (classify_regime(2.0, m, a) == REGIME_CONSTANT
                                                 and classify_regime(math.sqrt(lo), m, a) == REGIME_INTERMEDIATE
                                                 and classify_regime(lo / 2, m, a) == REGIME_SATURATED)
    checks["label strings"] = (REGIME_CONSTANT, REGIME_INTERMEDIATE, REGIME_SATURATED) == (
        "constant", "λ^{α/(2(1+α))}", "3^{−αm}")
    assert acceptance("AC7 formula fidelity", checks)


def test_ac8_green_kubo_cross_route(acceptance):
    t0 = time.perf_counter()
    spec = CellProblemSpec(m=2, model=CI, M=4000, eval_M=2000)
    est = estimate_abar(spec)
    palm = palm_flux(CI, 1.0, [1.0], 20000, 7)
    rep = gk_report(spec, 0.0, est.abar, est.abar_se, palm)
    half, half_se = 0.5 * est.abar[0, 0], 0.5 * est.abar_se[0, 0]
    se = combined_se(rep.reconstructed_se, half_se)
    z = (rep.reconstructed - half) / se
    dt = time.perf_counter() - t0
    detail = f"GK {rep.reconstructed:.5f}+-{rep.reconstructed_se:.5f} variational {half:.5f}+-{half_se:.5f} z={z:.2f} {dt:.0f}s"
    assert acceptance("AC8 Green-Kubo cross-route consistency", {"within 3 combined SE": abs(z) <= 3}, detail)
