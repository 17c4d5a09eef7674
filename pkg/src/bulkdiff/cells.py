"""Finite-volume cell problems: nu, nu*, the resolvent problem, J and extrapolation.

All problems on a cube share one sampled system. A training sample set fixes
the quadratic program (Gram matrix, right-hand sides, mass matrix), whose
solution is then scored on an independent evaluation sample set. Held-out
scoring keeps the reported nu-hat an honest upper bound and nu*-hat an honest
lower bound for the chosen feature class, up to Monte Carlo error.
"""
from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import linalg
from scipy.sparse.linalg import LinearOperator, cg

from .core import CoefficientModel, Domain, RandomStream, ValidationError, mesoscopic_grid, sample_with_collar
from .functionals import FeatureBasis, FeatureFunctional, SampleSet
from .stats import EstimatorResult, mean_se


class SingularSystemError(ArithmeticError):
    """Gram system could not be factorized even after ridge regularization."""


@dataclass(frozen=True)
class BasisSpec:
    spacing: float = 0.5
    degree: int = 1
    pairs: bool = True
    radial_spacing: float = 0.25
    n_radial: int = 8
    radial_degree: int = 1
    star_pairs: str = "all"
    min_cells: int = 3

    def build(self, U: Domain) -> FeatureBasis:
        ncell = max(int(round(U.side / self.spacing)), self.min_cells, self.degree + 1)
        return FeatureBasis(U, U.side / ncell, self.degree, self.pairs, self.radial_spacing,
                            self.n_radial, self.radial_degree, self.star_pairs)


@dataclass(frozen=True)
class CellProblemSpec:
    m: int
    d: int = 1
    rho: float = 1.0
    model: CoefficientModel = field(default_factory=CoefficientModel)
    p: Optional[tuple] = None
    basis: BasisSpec = field(default_factory=BasisSpec)
    M: int = 1000
    seed: int = 0
    ridge: float = 1e-10
    lam: Optional[float] = None
    eval_M: Optional[int] = None
    max_count: Optional[int] = None
    control_variate: bool = False

    def __post_init__(self):
        if self.M < 1:
            raise ValidationError("M must be at least 1")
        if self.ridge < 0:
            raise ValidationError("ridge must be nonnegative")
        if self.lam is not None and self.lam < 0:
            raise ValidationError("lambda must be nonnegative")
        if self.rho <= 0:
            raise ValidationError("rho must be positive")
        if self.p is not None:
            object.__setattr__(self, "p", tuple(float(v) for v in np.ravel(self.p)))
            if len(self.p) != self.d:
                raise ValidationError("direction has wrong dimension")

    @property
    def U(self):
        return Domain.cube(self.m, self.d)

    @property
    def direction(self):
        return np.asarray(self.p if self.p is not None else np.eye(self.d)[0], dtype=float)

    def system_key(self):
        return (self.m, self.d, self.rho, self.model, self.basis, self.M, self.seed, self.ridge,
                self.eval_M, self.max_count)

    def to_dict(self):
        out = asdict(self)
        out["model"] = self.model.to_dict()
        return out


# ---------------------------------------------------------------------------
# sampled system

@dataclass
class EvalStats:
    """Per-sample d x d summaries on the evaluation set (normalized by rho|U|)."""

    E: np.ndarray        # sum V^T a V, V = I + grad(phi)
    Q: np.ndarray        # sum W + W^T - W^T a W, W = grad(u) per unit q
    VW: np.ndarray       # sum V^T a W
    WW: np.ndarray       # sum W^T a W
    A: np.ndarray        # sum a
    W: np.ndarray        # sum W (average slope of u)
    EC: np.ndarray       # sum grad(phi)^T a grad(phi)
    G: dict              # lambda -> sum a grad(U_lambda - l_p)
    phi: np.ndarray      # corrector values, (M, d)
    counts: np.ndarray
    control_mean: float
    norm: float


def _solve_psd(A, B, ridge):
    n = A.shape[0]
    if n == 0:
        return np.zeros((0,) + B.shape[1:])
    tr = np.trace(A)
    eps = ridge * (tr / n if tr > 0 else 1.0)
    Ar = A + eps * np.eye(n)
    if n < 2000:
        try:
            return linalg.cho_solve(linalg.cho_factor(Ar, lower=True, check_finite=False), B,
                                    check_finite=False)
        except linalg.LinAlgError as exc:
            raise SingularSystemError(str(exc)) from exc
    Bm = B.reshape(n, -1)
    out = np.empty_like(Bm)
    diag = np.diag(Ar).copy()
    diag[diag <= 0] = 1.0
    M = LinearOperator((n, n), matvec=lambda x: x / diag)
    for j in range(Bm.shape[1]):
        x, info = cg(Ar, Bm[:, j], rtol=1e-12, atol=0.0, M=M, maxiter=10 * n)
        if info != 0:
            raise SingularSystemError("conjugate gradient did not converge")
        out[:, j] = x
    return out.reshape(B.shape)


class CellSystem:
    """Training aggregates and evaluation samples for one cube."""

    def __init__(self, spec: CellProblemSpec, chunk=64):
        self.spec = spec
        self.U = spec.U
        self.basis = spec.basis.build(self.U)
        stream = RandomStream(spec.seed)
        self.train = SampleSet.draw(self.U, spec.rho, spec.model, spec.M, stream.substream(1), spec.max_count)
        self.eval = SampleSet.draw(self.U, spec.rho, spec.model, spec.eval_M or spec.M,
                                   stream.substream(2), spec.max_count)
        self.norm = spec.rho * self.U.volume
        self._assemble(chunk)
        self._cache = {}

    def _sample_features(self, samples, s):
        mu, ins = samples.configs[s], samples.inside[s]
        return self.basis.features(mu.points[ins])

    def _assemble(self, chunk):
        nf, d = self.basis.nf, self.basis.d
        S = np.zeros((nf, nf))
        R = np.zeros((nf, d))
        B = np.zeros((nf, d))
        C0 = np.zeros((d, d))
        Mass = np.zeros((nf, nf))
        mean_vals = np.zeros(nf)
        M = len(self.train)
        # fixed chunk order keeps the reduction bitwise reproducible
        for start in range(0, M, chunk):
            Sc = np.zeros_like(S)
            Mc = np.zeros_like(Mass)
            for s in range(start, min(start + chunk, M)):
                a = self.train.a_inside[s]
                vals, X = self._sample_features(self.train, s)
                C0 += a.sum(axis=0)
                nzv = np.nonzero(vals)[0]
                if len(nzv):
                    Mc[np.ix_(nzv, nzv)] += np.outer(vals[nzv], vals[nzv])
                    mean_vals[nzv] += vals[nzv]
                if X.shape[0] == 0:
                    continue
                cols = np.nonzero(np.any(X != 0, axis=(0, 1)))[0]
                Xc = X[:, :, cols]
                aX = np.einsum("nij,njf->nif", a, Xc)
                Sc[np.ix_(cols, cols)] += Xc.reshape(-1, len(cols)).T @ aX.reshape(-1, len(cols))
                R[cols] += np.einsum("nif,nij->fj", Xc, a)
                B[cols] += Xc.sum(axis=0).T
            S += Sc
            Mass += Mc
        self.S, self.R, self.B, self.C0 = S / M, R / M, B / M, C0 / M
        self.Mass, self.mean_vals = Mass / M, mean_vals / M

    # solves ---------------------------------------------------------------
    @property
    def z(self):
        return self.basis.n_zero

    def nu_matrix(self):
        """Coefficient matrix C (n_zero x d): corrector for slope p is C p."""
        if "nu" not in self._cache:
            z = self.z
            self._cache["nu"] = -_solve_psd(self.S[:z, :z], self.R[:z], self.spec.ridge)
        return self._cache["nu"]

    def star_matrix(self):
        """Coefficient matrix C* (nf x d): maximizer for slope q is C* q."""
        if "star" not in self._cache:
            self._cache["star"] = _solve_psd(self.S, self.B, self.spec.ridge)
        return self._cache["star"]

    def resolvent_matrix(self, lam):
        lam = float(lam)
        if lam == 0.0:
            return self.nu_matrix()
        key = ("res", lam)
        if key not in self._cache:
            z = self.z
            A = lam * self.Mass[:z, :z] + 0.5 * self.S[:z, :z]
            self._cache[key] = -_solve_psd(A, 0.5 * self.R[:z], self.spec.ridge)
        return self._cache[key]

    # in-sample objective values (training set) ----------------------------
    def nu_in_sample(self, p, C=None):
        C = self.nu_matrix() if C is None else C
        z = self.z
        c = C @ p
        return 0.5 * (p @ self.C0 @ p + 2 * c @ self.R[:z] @ p + c @ self.S[:z, :z] @ c) / self.norm

    def star_in_sample(self, q, C=None):
        C = self.star_matrix() if C is None else C
        c = C @ q
        return (-0.5 * c @ self.S @ c + c @ self.B @ q) / self.norm

    # held-out statistics ----------------------------------------------------
    def eval_stats(self, lams=()) -> EvalStats:
        lams = tuple(sorted(set(float(l) for l in lams) | {0.0}))
        key = ("eval", lams)
        if key in self._cache:
            return self._cache[key]
        for k, v in self._cache.items():
            if isinstance(k, tuple) and k[0] == "eval" and set(lams) <= set(k[1]):
                return v
        d, z = self.basis.d, self.z
        C = self.nu_matrix()
        Cs = self.star_matrix()
        CL = {l: self.resolvent_matrix(l) for l in lams}
        Me = len(self.eval)
        E = np.zeros((Me, d, d)); Q = np.zeros_like(E); VW = np.zeros_like(E); WW = np.zeros_like(E)
        A = np.zeros_like(E); Wsum = np.zeros_like(E); EC = np.zeros_like(E)
        G = {l: np.zeros_like(E) for l in lams}
        phi = np.zeros((Me, d))
        I = np.eye(d)
        for s in range(Me):
            a = self.eval.a_inside[s]
            vals, X = self._sample_features(self.eval, s)
            phi[s] = vals[:z] @ C
            if X.shape[0] == 0:
                continue
            X0 = X[:, :, :z]
            Gphi = X0 @ C                      # (n, d, d): column j is grad phi_{e_j}
            V = I + Gphi
            Wg = X @ Cs
            aV = a @ V
            aW = a @ Wg
            Vt = np.swapaxes(V, 1, 2)
            Wt = np.swapaxes(Wg, 1, 2)
            E[s] = np.sum(Vt @ aV, axis=0)
            WaW = np.sum(Wt @ aW, axis=0)
            Wsum[s] = Wg.sum(axis=0)
            Q[s] = Wsum[s] + Wsum[s].T - WaW
            VW[s] = np.sum(Vt @ aW, axis=0)
            WW[s] = WaW
            A[s] = a.sum(axis=0)
            EC[s] = np.sum(np.swapaxes(Gphi, 1, 2) @ (a @ Gphi), axis=0)
            for l in lams:
                G[l][s] = np.sum(a @ (X0 @ CL[l]), axis=0)
        n = self.norm
        st = EvalStats(E / n, Q / n, VW / n, WW / n, A / n, Wsum / n, EC / n,
                       {l: g / n for l, g in G.items()}, phi, self.eval.counts(),
                       self.eval.expected_count, n)
        self._cache[key] = st
        return st


_SYSTEMS: "OrderedDict[tuple, CellSystem]" = OrderedDict()
_MAX_SYSTEMS = 6


def get_system(spec: CellProblemSpec) -> CellSystem:
    key = spec.system_key()
    if key in _SYSTEMS:
        _SYSTEMS.move_to_end(key)
        return _SYSTEMS[key]
    sysm = CellSystem(spec)
    _SYSTEMS[key] = sysm
    while len(_SYSTEMS) > _MAX_SYSTEMS:
        _SYSTEMS.popitem(last=False)
    return sysm


def clear_cache():
    _SYSTEMS.clear()


def _summarize(x, stats: EvalStats, control_variate):
    x = np.asarray(x, dtype=float)
    if control_variate:
        c = stats.counts / stats.norm - stats.control_mean / stats.norm
        vc = np.var(c)
        if vc > 0:
            beta = np.mean((x - x.mean()) * (c - c.mean())) / vc
            x = x - beta * c
    m, se = mean_se(x)
    return float(m), float(se), x


# ---------------------------------------------------------------------------
# solutions

@dataclass
class CellSolution:
    kind: str
    m: int
    direction: np.ndarray
    coef: np.ndarray
    value: float
    se: float
    value_in_sample: float
    bound: str
    corrector: FeatureFunctional
    samples: np.ndarray = field(repr=False)
    M: int = 0
    seed: int = 0
    lam: Optional[float] = None
    spec: Optional[CellProblemSpec] = field(default=None, repr=False)
    system: Optional[CellSystem] = field(default=None, repr=False, compare=False)

    def to_dict(self):
        return {"kind": self.kind, "m": self.m, "direction": np.asarray(self.direction).tolist(),
                "lambda": self.lam, "value": self.value, "se": self.se,
                "value_in_sample": self.value_in_sample, "bound": self.bound,
                "coef": np.asarray(self.coef).tolist(), "M": self.M, "seed": self.seed,
                "spec": self.spec.to_dict() if self.spec else None,
                "corrector": json.loads(self.corrector.to_json())}

    def to_json(self):
        return json.dumps(self.to_dict())


def solve_nu(spec: CellProblemSpec) -> CellSolution:
    """Upper-bound estimate of nu(cube_m, p) = 1/2 p.abar(cube_m) p over l_p + span(zero-boundary features)."""
    sysm = get_system(spec)
    p = spec.direction
    C = sysm.nu_matrix()
    st = sysm.eval_stats()
    x = 0.5 * np.einsum("i,sij,j->s", p, st.E, p)
    val, se, x = _summarize(x, st, spec.control_variate)
    c = C @ p
    return CellSolution("nu", spec.m, p, c, val, se, float(sysm.nu_in_sample(p)), "upper",
                        FeatureFunctional(sysm.basis, c), x, spec.M, spec.seed, None, spec, sysm)


def solve_nu_star(spec: CellProblemSpec) -> CellSolution:
    """Lower-bound estimate of nu*(cube_m, q) = 1/2 q.abar*^{-1} q over interior-measurable features."""
    sysm = get_system(spec)
    q = spec.direction
    Cs = sysm.star_matrix()
    st = sysm.eval_stats()
    x = 0.5 * np.einsum("i,sij,j->s", q, st.Q, q)
    val, se, x = _summarize(x, st, spec.control_variate)
    c = Cs @ q
    return CellSolution("nu_star", spec.m, q, c, val, se, float(sysm.star_in_sample(q)),
                        "lower-restricted", FeatureFunctional(sysm.basis, c), x, spec.M, spec.seed,
                        None, spec, sysm)


def solve_resolvent(spec: CellProblemSpec) -> CellSolution:
    """U_lambda = l_p + sum c_j B_j from (lambda Mass + 1/2 Stiff) c = -1/2 rhs; value is the
    normalized current-correlation value E[(rho|U|)^{-1} int (1/2 p.a p - 1/2 p.a grad U_lambda)]."""
    if spec.lam is None:
        raise ValidationError("resolvent mode needs lambda")
    sysm = get_system(spec)
    p = spec.direction
    C = sysm.resolvent_matrix(spec.lam)
    st = sysm.eval_stats([spec.lam])
    x = -0.5 * np.einsum("i,sij,j->s", p, st.G[float(spec.lam)], p)
    val, se, x = _summarize(x, st, spec.control_variate)
    c = C @ p
    return CellSolution("resolvent", spec.m, p, c, val, se, float("nan"), "n/a",
                        FeatureFunctional(sysm.basis, c, affine=p), x, spec.M, spec.seed,
                        float(spec.lam), spec, sysm)


def slope_check(sol: CellSolution, q_prime):
    """E[(rho|U|)^{-1} int q'.grad u dmu] for the nu* maximizer; equals q'.abar*^{-1} q."""
    st = sol.system.eval_stats()
    x = np.einsum("i,sij,j->s", np.asarray(q_prime, float), st.W, sol.direction)
    m, se = mean_se(x)
    return EstimatorResult(float(m), float(se), len(x))


# ---------------------------------------------------------------------------
# matrices

@dataclass
class AbarEstimate:
    m: int
    abar: np.ndarray
    abar_se: np.ndarray
    abar_star: np.ndarray
    abar_star_se: np.ndarray
    J: np.ndarray = None
    J_se: np.ndarray = None
    bound: dict = field(default_factory=lambda: {"abar": "upper", "abar_star": "upper (restricted nu*)"})
    abar_inf: Optional[np.ndarray] = None
    alpha_hat: Optional[float] = None
    fit_residual: Optional[float] = None
    extrapolation: str = "none"
    history: list = field(default_factory=list, repr=False)

    def to_dict(self):
        f = lambda x: None if x is None else np.asarray(x).tolist()
        return {"m": self.m, "abar": f(self.abar), "abar_se": f(self.abar_se),
                "abar_star": f(self.abar_star), "abar_star_se": f(self.abar_star_se),
                "J": f(self.J), "J_se": f(self.J_se), "bound": self.bound,
                "abar_inf": f(self.abar_inf),
                "alpha_hat": None if self.alpha_hat is None or not np.isfinite(self.alpha_hat) else self.alpha_hat,
                "fit_residual": self.fit_residual, "extrapolation": self.extrapolation}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1)


def _polarize(sols, d):
    """Per-sample matrices from solutions for e_i and e_i + e_j (values are 1/2 p.A p)."""
    by = {}
    for s in sols:
        by[tuple(np.round(s.direction, 12))] = s
    I = np.eye(d)
    Ms = None
    for i in range(d):
        for j in range(i, d):
            key = tuple(I[i]) if i == j else tuple(I[i] + I[j])
            if key not in by or (i != j and (tuple(I[i]) not in by or tuple(I[j]) not in by)):
                raise ValidationError(f"missing direction {key} for polarization")
            if Ms is None:
                Ms = np.zeros((len(by[key].samples), d, d))
            if i == j:
                Ms[:, i, i] = 2 * by[key].samples
            else:
                Ms[:, i, j] = Ms[:, j, i] = by[key].samples - by[tuple(I[i])].samples - by[tuple(I[j])].samples
    return Ms


def _check_consistent(sols):
    keys = {s.spec.system_key() if s.spec else None for s in sols}
    if len(keys) != 1:
        raise ValidationError("solutions do not share model, rho, m and basis")


def assemble_abar(solutions: Sequence[CellSolution]) -> AbarEstimate:
    """abar from nu solutions and abar* from nu* solutions by polarization over e_i, e_i + e_j."""
    nus = [s for s in solutions if s.kind == "nu"]
    stars = [s for s in solutions if s.kind == "nu_star"]
    if not nus or not stars:
        raise ValidationError("need both nu and nu* solutions")
    _check_consistent(nus + stars)
    d = len(nus[0].direction)
    An = _polarize(nus, d)
    Kn = _polarize(stars, d)
    abar, abar_se = mean_se(An)
    K, K_se = mean_se(Kn)
    abar = 0.5 * (abar + abar.T)
    K = 0.5 * (K + K.T)
    astar = np.linalg.inv(K)
    # delta method: d(K^{-1}) = -K^{-1} dK K^{-1}
    lin = -np.einsum("ij,sjk,kl->sil", astar, Kn - K, astar)
    astar_se = lin.std(axis=0, ddof=1) / np.sqrt(len(lin)) if len(lin) > 1 else np.zeros_like(astar)
    est = AbarEstimate(nus[0].m, abar, abar_se, astar, astar_se)
    Js, Jse = [], []
    for i in range(d):
        e = np.eye(d)[i]
        nu_i = [s for s in nus if np.allclose(s.direction, e)][0]
        st_i = [s for s in stars if np.allclose(s.direction, e)][0]
        r = duality_gap_J(nu_i, st_i, astar=astar)
        Js.append(r.value)
        Jse.append(r.se)
    est.J, est.J_se = np.array(Js), np.array(Jse)
    return est


@dataclass
class JResult:
    value: float
    se: float
    quadra: float
    quadra_se: float
    q: np.ndarray


def duality_gap_J(nu_sol: CellSolution, nu_star_sol: CellSolution, astar=None) -> JResult:
    """J = nu(p) + nu*(abar* p) - p.abar* p, and the quadratic form of grad w, w = v - u."""
    if nu_sol.system is not nu_star_sol.system:
        raise ValidationError("J needs nu and nu* solved on one sampled system")
    st = nu_sol.system.eval_stats()
    p = nu_sol.direction
    if astar is None:
        astar = np.linalg.inv(st.Q.mean(axis=0))
    q = astar @ p
    x = (0.5 * np.einsum("i,sij,j->s", p, st.E, p) + 0.5 * np.einsum("i,sij,j->s", q, st.Q, q) - p @ q)
    cv = nu_sol.spec.control_variate if nu_sol.spec else False
    val, se, _ = _summarize(x, st, cv)
    Wq = (st.E - st.VW @ astar - astar @ np.swapaxes(st.VW, 1, 2) + astar @ st.WW @ astar)
    y = 0.5 * np.einsum("i,sij,j->s", p, Wq, p)
    qv, qse, _ = _summarize(y, st, cv)
    return JResult(val, se, qv, qse, q)


def estimate_abar(spec: CellProblemSpec) -> AbarEstimate:
    """Solve nu and nu* for all polarization directions of one cube."""
    d = spec.d
    I = np.eye(d)
    dirs = [I[i] for i in range(d)] + [I[i] + I[j] for i in range(d) for j in range(i + 1, d)]
    sols = []
    for p in dirs:
        sols.append(solve_nu(replace(spec, p=tuple(p))))
        sols.append(solve_nu_star(replace(spec, p=tuple(p))))
    return assemble_abar(sols)


# ---------------------------------------------------------------------------
# extrapolation

def extrapolate_abar(estimates: Sequence[AbarEstimate], k=3.0) -> AbarEstimate:
    """Fit ||abar(m) - abar(m+1)|| ~ 3^{-alpha m} and add the geometric tail."""
    ests = sorted(estimates, key=lambda e: e.m)
    if len(ests) < 3:
        raise ValidationError("extrapolation needs at least three cube sizes")
    last = ests[-1]
    out = replace(last, history=list(ests))
    ms = np.array([e.m for e in ests], dtype=float)
    # monotonicity: p.abar(m)p is nonincreasing in m for every p
    for a, b in zip(ests[:-1], ests[1:]):
        dd = a.abar - b.abar
        se = np.sqrt(a.abar_se ** 2 + b.abar_se ** 2)
        if np.any(np.diag(dd) < -k * np.diag(se) - 1e-12) or np.linalg.eigvalsh(dd).min() < -k * np.max(se) - 1e-12:
            out.extrapolation = "refused: non-monotone beyond noise"
            out.alpha_hat = float("nan")
            return out
    diffs = np.array([np.linalg.norm(a.abar - b.abar) for a, b in zip(ests[:-1], ests[1:])])
    dse = np.array([np.linalg.norm(np.sqrt(a.abar_se ** 2 + b.abar_se ** 2)) for a, b in zip(ests[:-1], ests[1:])])
    sig = diffs > k * dse
    sig &= diffs > 0
    if sig.sum() < 2:
        out.alpha_hat = float("nan")
        out.abar_inf = last.abar.copy()
        out.fit_residual = None
        out.extrapolation = "noise floor: no rate, last value reported"
        return out
    x = ms[:-1][sig]
    y = np.log(diffs[sig])
    slope, icpt = np.polyfit(x, y, 1)
    alpha = -slope / math.log(3.0)
    resid = float(np.sqrt(np.mean((y - (slope * x + icpt)) ** 2)))
    out.alpha_hat = float(alpha)
    out.fit_residual = resid
    if alpha <= 0:
        out.extrapolation = "refused: no decay"
        return out
    r = 3.0 ** (-alpha)
    D = ests[-2].abar - last.abar
    out.abar_inf = last.abar - D * r / (1 - r)
    out.extrapolation = "geometric tail"
    return out


# ---------------------------------------------------------------------------
# independence of correctors on distant cells

def corrector_covariance(spec: CellProblemSpec, n, z, z2, i=0, M=None, seed=1, statistic="value"):
    """Covariance of corrector summaries on cells z + cube(n) and z2 + cube(n) over shared samples.

    statistic "value": phi_{e_i}(tau_{-z} mu); "energy": int |grad phi|^2 over the cell.
    """
    z = np.asarray(z, dtype=float).reshape(spec.d)
    z2 = np.asarray(z2, dtype=float).reshape(spec.d)
    sep = np.max(np.abs(z - z2))
    if 0 < sep <= 3.0 ** n:
        raise ValidationError("cells overlap or touch; need separation > 3^n")
    sol = solve_nu(replace(spec, m=n, p=tuple(np.eye(spec.d)[i])))
    phi = sol.corrector
    lo = np.minimum(z, z2) - 3.0 ** n / 2
    hi = np.maximum(z, z2) + 3.0 ** n / 2
    side = float(np.max(hi - lo))
    big = Domain(spec.d, "box", side, tuple((lo + hi) / 2))
    g = RandomStream(seed).generator()
    M = M or spec.M
    xs, ys = np.empty(M), np.empty(M)
    from .core import sample_poisson, translate_restrict
    for s in range(M):
        mu = sample_poisson(big, spec.rho, g)
        vals = []
        for c in (z, z2):
            loc = translate_restrict(mu, c, phi.domain)
            if statistic == "value":
                vals.append(phi.value(loc))
            else:
                vals.append(float(np.sum(phi.gradient(loc) ** 2)))
        xs[s], ys[s] = vals
    prod = (xs - xs.mean()) * (ys - ys.mean())
    m, se = mean_se(prod)
    return EstimatorResult(float(m) * M / max(M - 1, 1), float(se), M, seed)
