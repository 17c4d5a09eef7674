"""Localized Green-Kubo quantities: the current functional, the resolvent value of the
current-current integral, the palm flux, and the assembled bracket with its regime."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .cells import CellProblemSpec, get_system, solve_resolvent
from .core import CoefficientModel, Domain, ValidationError, as_generator, palm_sample
from .functionals import Functional, SampleSet, energy_samples
from .stats import EstimatorResult, combined_se, mean_se

REGIME_CONSTANT = "constant"
REGIME_INTERMEDIATE = "λ^{α/(2(1+α))}"
REGIME_SATURATED = "3^{−αm}"


# ---------------------------------------------------------------------------
# current functional

@dataclass(frozen=True)
class CurrentFunctional:
    """v -> E[int_{cube_m} -1/2 p.a grad v dmu]."""

    p: tuple
    m: int
    model: CoefficientModel
    rho: float = 1.0

    def __post_init__(self):
        p = np.atleast_1d(np.asarray(self.p, dtype=float))
        if not np.isclose(np.linalg.norm(p), 1.0):
            raise ValidationError("direction p must be a unit vector")
        object.__setattr__(self, "p", tuple(p))

    @property
    def d(self):
        return len(self.p)

    @property
    def U(self):
        return Domain.cube(self.m, self.d)

    def samples(self, M, rng, max_count=None):
        return SampleSet.draw(self.U, self.rho, self.model, M, rng, max_count)

    def sample_values(self, v: Functional, samples: SampleSet):
        p = np.asarray(self.p)
        out = np.empty(len(samples))
        for s, (mu, ins, a) in enumerate(zip(samples.configs, samples.inside, samples.a_inside)):
            gv = v.gradient(mu)[ins]
            out[s] = -0.5 * np.einsum("i,nij,nj->", p, a, gv)
        return out

    def cauchy_schwarz_bound(self, h1):
        """1/2 Lambda |p| (rho|U|)^{1/2} ||v||, with ||v||^2 = E int |grad v|^2 dmu."""
        return 0.5 * self.model.Lambda * (self.rho * self.U.volume) ** 0.5 * h1


def current_apply(F: CurrentFunctional, v: Functional, M=None, rng=None, samples=None) -> EstimatorResult:
    """Monte Carlo value of <F, v> for a zero-boundary functional v."""
    if not getattr(v, "zero_boundary", False):
        raise ValidationError("the current functional acts on zero-boundary functionals")
    if samples is None:
        if not M:
            raise ValidationError("sample count must be positive")
        samples = F.samples(M, rng)
    x = F.sample_values(v, samples)
    m, se = mean_se(x)
    return EstimatorResult(float(m), float(se), len(x))


def current_apply_corrector(phi: Functional, v: Functional, samples: SampleSet) -> EstimatorResult:
    """The corrector representation E[int 1/2 grad phi . a grad v dmu]."""
    x = energy_samples(phi, v, samples, normalize=False)
    m, se = mean_se(x)
    return EstimatorResult(float(m), float(se), len(x))


def representation_gap(F: CurrentFunctional, phi: Functional, v: Functional, samples: SampleSet):
    """Paired difference between the two representations on one sample set."""
    x = F.sample_values(v, samples) - energy_samples(phi, v, samples, normalize=False)
    m, se = mean_se(x)
    return EstimatorResult(float(m), float(se), len(x))


def current_apply_sector(v, model, rho, p=1.0):
    """Exact pairing for d = 1 grid functionals under the truncated law (sector quadrature)."""
    from .sector import sector_pairing
    return sector_pairing(v, model, rho, p, normalize=False)


# ---------------------------------------------------------------------------
# resolvent value and palm flux

def _with_lambda(spec: CellProblemSpec, lam):
    if lam is None or lam < 0:
        raise ValidationError("lambda must be nonnegative")
    return replace(spec, lam=float(lam))


def gk_integral_value(spec: CellProblemSpec, normalize=False) -> EstimatorResult:
    """E[int_{cube_m} (1/2 p.a p - 1/2 p.a grad U_lambda) dmu], U_lambda from the resolvent solve."""
    sol = solve_resolvent(_with_lambda(spec, spec.lam if spec.lam is not None else 0.0))
    scale = 1.0 if normalize else spec.rho * spec.U.volume
    return EstimatorResult(sol.value * scale, sol.se * scale, len(sol.samples), spec.seed,
                           "normalized" if normalize else "raw")


def resolvent_energies(spec: CellProblemSpec, lams):
    """In-sample energy E[int 1/2 grad(U_lambda - l_p).a grad(U_lambda - l_p)] per lambda."""
    sysm = get_system(spec)
    p = spec.direction
    z = sysm.z
    out = []
    for lam in lams:
        c = sysm.resolvent_matrix(lam) @ p
        out.append(float(0.5 * c @ sysm.S[:z, :z] @ c))
    return np.array(out)


def palm_flux(model: CoefficientModel, rho, p, M, rng) -> EstimatorResult:
    """1/2 E[p.a°(mu + delta_0) p] under the Poisson law."""
    if not M:
        raise ValidationError("sample count must be positive")
    p = np.atleast_1d(np.asarray(p, dtype=float))
    d = len(p)
    if model.is_constant:
        return EstimatorResult(0.5 * float(p @ p), 0.0, M)
    g = as_generator(rng)
    dom = Domain(d, "box", 2.5)
    x = np.empty(M)
    origin = np.zeros((1, d))
    for s in range(M):
        mu = palm_sample(dom, rho, g)
        a = model.field(mu.points, origin)[0]
        x[s] = 0.5 * p @ a @ p
    m, se = mean_se(x)
    return EstimatorResult(float(m), float(se), M)


# ---------------------------------------------------------------------------
# regimes

def regime_thresholds(m, alpha_hat):
    if alpha_hat is None or not np.isfinite(alpha_hat) or alpha_hat < 0:
        raise ValidationError("a finite nonnegative alpha is required for the regime thresholds")
    return 1.0, 3.0 ** (-2 * (1 + alpha_hat) * m)


def classify_regime(lam, m, alpha_hat):
    hi, lo = regime_thresholds(m, alpha_hat)
    if lam >= hi:
        return REGIME_CONSTANT
    if lam > lo:
        return REGIME_INTERMEDIATE
    return REGIME_SATURATED


def regime_rate(lam, m, alpha_hat):
    """The bound form without its constant: 1, lambda^{a/(2(1+a))} or 3^{-a m}."""
    label = classify_regime(lam, m, alpha_hat)
    if label == REGIME_CONSTANT:
        return 1.0
    if label == REGIME_INTERMEDIATE:
        return lam ** (alpha_hat / (2 * (1 + alpha_hat)))
    return 3.0 ** (-alpha_hat * m)


def gk_mesoscale(lam, alpha_hat, m):
    """n = round(-log_3 lambda / (2(1+alpha))), clamped to [0, m]."""
    if not lam > 0:
        raise ValidationError("lambda must be positive")
    regime_thresholds(m, alpha_hat)
    n = int(round(-math.log(lam, 3) / (2 * (1 + alpha_hat)) + 1e-12))
    return min(max(n, 0), m)


# ---------------------------------------------------------------------------
# bracket

@dataclass
class GKReport:
    m: int
    lam: float
    p: list
    palm: float
    palm_se: float
    integral: float          # normalized by rho|cube_m|
    integral_se: float
    integral_raw: float
    half_pap: float          # 1/2 p.abar_ref p
    half_pap_se: float
    bracket: float
    bracket_se: float
    regime: str
    bound_form: str
    alpha: Optional[float]
    alpha_source: str
    thresholds: list = field(default_factory=list)
    mesoscale: Optional[int] = None

    @property
    def reconstructed(self):
        """1/2 p.abar p recovered from palm flux minus the normalized integral."""
        return self.palm - self.integral

    @property
    def reconstructed_se(self):
        return combined_se(self.palm_se, self.integral_se)

    def within(self, k=3.0):
        return abs(self.bracket) <= k * self.bracket_se + 1e-12

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), ensure_ascii=False)


def gk_bracket(m, lam, palm: EstimatorResult, integral: EstimatorResult, abar_ref, abar_ref_se, p,
               alpha_hat=None, alpha_source="fit") -> GKReport:
    """1/2 p.abar p - palm flux + (rho|cube_m|)^{-1} integral, with propagated SEs.

    ``integral`` must be the normalized value. The regime needs alpha; without it the
    label is reported as unknown.
    """
    if palm is None or integral is None or abar_ref is None:
        raise ValidationError("palm flux, integral and a reference matrix are all required")
    p = np.atleast_1d(np.asarray(p, dtype=float))
    A = np.atleast_2d(np.asarray(abar_ref, dtype=float))
    Ase = np.zeros_like(A) if abar_ref_se is None else np.atleast_2d(np.asarray(abar_ref_se, dtype=float))
    half = 0.5 * float(p @ A @ p)
    # entrywise SEs combined as if independent
    half_se = 0.5 * float(np.sqrt(np.sum((np.outer(p, p) * Ase) ** 2)))
    br = half - palm.value + integral.value
    se = combined_se(half_se, palm.se, integral.se)
    if alpha_hat is not None and np.isfinite(alpha_hat):
        regime = classify_regime(lam, m, alpha_hat)
        thr = list(regime_thresholds(m, alpha_hat))
        n = gk_mesoscale(lam, alpha_hat, m) if lam > 0 else m
    else:
        regime, thr, n, alpha_source = "unknown", [], None, "none"
    forms = {REGIME_CONSTANT: "C", REGIME_INTERMEDIATE: "C λ^{α/(2(1+α))}", REGIME_SATURATED: "C 3^{−αm}"}
    return GKReport(m, float(lam), p.tolist(), palm.value, palm.se, integral.value, integral.se,
                    float("nan"), half, half_se, float(br),
                    float(se), regime, forms.get(regime, "n/a"),
                    None if alpha_hat is None else float(alpha_hat), alpha_source, thr, n)


def gk_report(spec: CellProblemSpec, lam, abar_ref, abar_ref_se, palm: EstimatorResult,
              alpha_hat=None, alpha_source="fit") -> GKReport:
    """Solve the resolvent problem on ``spec`` at ``lam`` and assemble the bracket."""
    integ = gk_integral_value(_with_lambda(spec, lam), normalize=True)
    rep = gk_bracket(spec.m, lam, palm, integ, abar_ref, abar_ref_se, spec.direction, alpha_hat, alpha_source)
    rep.integral_raw = integ.value * spec.rho * spec.U.volume
    return rep
