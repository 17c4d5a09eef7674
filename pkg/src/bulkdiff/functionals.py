"""Functionals of configurations with analytic particle gradients.

Every functional exposes ``value(mu)`` and ``gradient(mu)``; the latter
returns one d-vector per point of ``mu`` (zero for points the functional
does not see). ``zero_boundary`` marks membership in H^1_0(U).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import (Configuration, CoefficientModel, Domain, ValidationError, as_generator,
                   sample_poisson, sample_with_collar, truncated_poisson_pmf)
from .kernels.features import feature_eval
from .stats import mean_se


class SectorOverflow(RuntimeError):
    """Configuration has more particles in U than a sector table can hold."""


# ---------------------------------------------------------------------------
# feature basis

class FeatureBasis:
    """Spline bumps and pair features on a box U.

    Columns are ordered in blocks: zero-boundary one-body bumps, zero-boundary
    pair features (partner weighted by the interior partition function chi_U),
    then the boundary-touching one-body bumps and pair features with chi = 1.
    The first ``n_zero`` columns span a subspace of H^1_0(U); the whole basis
    reproduces every affine statistic sum_{x in U} q.x.
    """

    def __init__(self, U: Domain, spacing=0.5, degree=1, pairs=True, radial_spacing=0.25,
                 n_radial=8, radial_degree=1, star_pairs="all"):
        if U.periodic:
            raise ValidationError("feature bases live on boxes")
        ncell = U.side / spacing
        if abs(ncell - round(ncell)) > 1e-9 or round(ncell) < degree + 1:
            raise ValidationError("bump spacing must divide the side into at least degree+1 cells")
        if degree not in (1, 2) or radial_degree not in (1, 2):
            raise ValidationError("spline degrees 1 and 2 are supported")
        self.U = U
        self.d = U.dim
        self.spacing = float(spacing)
        self.degree = int(degree)
        self.ncell = int(round(ncell))
        self.pairs = bool(pairs)
        self.radial_spacing = float(radial_spacing)
        self.radial_degree = int(radial_degree)
        self.n_radial_requested = int(n_radial)
        self.star_pairs = star_pairs
        self._build()

    # layout -------------------------------------------------------------
    def _build(self):
        d, q, n = self.d, self.degree, self.ncell
        nspl = n + q
        grid = np.array(np.meshgrid(*([np.arange(nspl)] * d), indexing="ij")).reshape(d, -1).T
        flat = np.zeros(len(grid), dtype=np.int64)
        for k in range(d):
            flat += grid[:, k] * nspl ** k
        order = np.argsort(flat)
        grid = grid[order]
        j = grid - q
        interior = np.all((j >= 0) & (j <= n - q - 1), axis=1)
        nrl = self.n_radial_requested if self.pairs else 0
        rq = self.radial_degree
        ntypes = max(nrl, 1) * (d + 1)
        types = [(li, c) for li in range(nrl) for c in range(-1, d)]
        odd_ok = lambda li: li >= rq  # radial spline vanishes at r = 0
        col_one = -np.ones(len(grid), dtype=np.int64)
        col_pc = -np.ones((len(grid), ntypes), dtype=np.int64)
        col_p1 = -np.ones((len(grid), ntypes), dtype=np.int64)
        desc = []
        col = 0
        for b in np.nonzero(interior)[0]:
            col_one[b] = col
            desc.append(("one", int(b), -1, -1))
            col += 1
        for b in np.nonzero(interior)[0]:
            for li, c in types:
                if c >= 0 and not odd_ok(li):
                    continue
                col_pc[b, li * (d + 1) + c + 1] = col
                desc.append(("pair-interior", int(b), li, c))
                col += 1
        self.n_zero = col
        for b in np.nonzero(~interior)[0]:
            col_one[b] = col
            desc.append(("one", int(b), -1, -1))
            col += 1
        star_bumps = np.arange(len(grid)) if self.star_pairs == "all" else np.nonzero(~interior)[0]
        for b in star_bumps:
            for li, c in types:
                if c >= 0 and not odd_ok(li):
                    continue
                col_p1[b, li * (d + 1) + c + 1] = col
                desc.append(("pair", int(b), li, c))
                col += 1
        self.nf = col
        self.col_one, self.col_pc, self.col_p1 = col_one, col_pc, col_p1
        self.n_radial = nrl
        self.lo = np.asarray(self.U.lower, dtype=float)
        self.hb = self.spacing
        self.descriptors = desc
        self.bump_index = grid - q

    @property
    def zero_columns(self):
        return np.arange(self.n_zero)

    @property
    def r_max(self):
        return self.n_radial * self.radial_spacing

    def spec(self):
        return {"U": {"dim": self.d, "side": self.U.side, "center": list(self.U.center)},
                "spacing": self.spacing, "degree": self.degree, "pairs": self.pairs,
                "radial_spacing": self.radial_spacing, "n_radial": self.n_radial_requested,
                "radial_degree": self.radial_degree, "star_pairs": self.star_pairs}

    @classmethod
    def from_spec(cls, spec):
        U = Domain(spec["U"]["dim"], "box", spec["U"]["side"], tuple(spec["U"]["center"]))
        kw = {k: v for k, v in spec.items() if k != "U"}
        return cls(U, **kw)

    def translated(self, z):
        """Same basis on U + z."""
        spec = self.spec()
        spec["U"]["center"] = list(np.asarray(self.U.center) + z)
        return FeatureBasis.from_spec(spec)

    # evaluation -----------------------------------------------------------
    def inside(self, mu: Configuration):
        return self.U.contains(mu.points) if mu.n else np.zeros(0, dtype=bool)

    def features(self, pts_inside, want_grad=True):
        """Values (nf,) and gradients (n, d, nf) for points known to lie in U."""
        return feature_eval(np.asarray(pts_inside, dtype=float).reshape(-1, self.d), self, want_grad)

    def __repr__(self):
        return (f"FeatureBasis(side={self.U.side}, spacing={self.spacing}, degree={self.degree}, "
                f"pairs={self.pairs}, nf={self.nf}, n_zero={self.n_zero})")


# ---------------------------------------------------------------------------
# functionals

class Functional:
    zero_boundary = False
    domain: Optional[Domain] = None

    def value(self, mu):
        raise NotImplementedError

    def gradient(self, mu):
        raise NotImplementedError

    def __call__(self, mu):
        return self.value(mu)


class FeatureFunctional(Functional):
    """sum_j c_j B_j + optional affine part sum_{x in U} p.x + constant."""

    def __init__(self, basis: FeatureBasis, coef=None, affine=None, constant=0.0):
        self.basis = basis
        self.domain = basis.U
        c = np.zeros(basis.nf) if coef is None else np.asarray(coef, dtype=float)
        if c.shape == (basis.n_zero,):
            c = np.concatenate([c, np.zeros(basis.nf - basis.n_zero)])
        if c.shape != (basis.nf,):
            raise ValidationError("coefficient vector does not match the basis")
        self.coef = c
        self.affine = None if affine is None else np.asarray(affine, dtype=float).reshape(basis.d)
        self.constant = float(constant)

    @property
    def zero_boundary(self):
        return self.affine is None and not np.any(self.coef[self.basis.n_zero:])

    def value(self, mu):
        ins = self.basis.inside(mu)
        pts = mu.points[ins]
        vals, _ = self.basis.features(pts, want_grad=False)
        out = float(vals @ self.coef) + self.constant
        if self.affine is not None:
            out += float(np.sum(pts @ self.affine))
        return out

    def gradient(self, mu):
        ins = self.basis.inside(mu)
        g = np.zeros((mu.n, self.basis.d))
        _, grads = self.basis.features(mu.points[ins], want_grad=True)
        g[ins] = grads @ self.coef
        if self.affine is not None:
            g[ins] += self.affine
        return g

    def to_json(self):
        return json.dumps({"basis": self.basis.spec(),
                           "features": [list(x) for x in self.basis.descriptors],
                           "coef": self.coef.tolist(),
                           "affine": None if self.affine is None else self.affine.tolist(),
                           "constant": self.constant})

    @classmethod
    def from_json(cls, text):
        obj = json.loads(text)
        return cls(FeatureBasis.from_spec(obj["basis"]), obj["coef"], obj["affine"], obj["constant"])


class LinearStatistic(Functional):
    """int g dmu over ``region`` (all points when None), optionally centred by rho int g."""

    def __init__(self, g: Callable, grad_g: Callable, region: Optional[Domain] = None,
                 rho: Optional[float] = None, integral: Optional[float] = None):
        self.g, self.grad_g, self.region = g, grad_g, region
        self.domain = region
        self.shift = 0.0
        if rho is not None:
            if integral is None:
                raise ValidationError("centring needs the integral of g")
            self.shift = rho * integral

    def _mask(self, mu):
        if self.region is None:
            return np.ones(mu.n, dtype=bool)
        return self.region.contains(mu.points) if mu.n else np.zeros(0, dtype=bool)

    def value(self, mu):
        m = self._mask(mu)
        return float(np.sum(self.g(mu.points[m]))) - self.shift

    def gradient(self, mu):
        m = self._mask(mu)
        out = np.zeros((mu.n, mu.dim))
        if m.any():
            out[m] = np.asarray(self.grad_g(mu.points[m])).reshape(-1, mu.dim)
        return out


def affine_statistic(U: Domain, p):
    """l_{p,U}(mu) = sum_{x in U} p.x."""
    p = np.asarray(p, dtype=float).reshape(U.dim)
    return LinearStatistic(lambda x: x @ p, lambda x: np.broadcast_to(p, x.shape), U)


class ScaledSum(Functional):
    """sum_k w_k f_k."""

    def __init__(self, terms, weights):
        self.terms = list(terms)
        self.weights = np.asarray(weights, dtype=float)
        self.domain = self.terms[0].domain if self.terms else None

    @property
    def zero_boundary(self):
        return all(t.zero_boundary for t in self.terms)

    def value(self, mu):
        return float(sum(w * t.value(mu) for t, w in zip(self.terms, self.weights)))

    def gradient(self, mu):
        g = np.zeros((mu.n, mu.dim))
        for t, w in zip(self.terms, self.weights):
            g += w * t.gradient(mu)
        return g


class ZeroFunctional(Functional):
    zero_boundary = True

    def value(self, mu):
        return 0.0

    def gradient(self, mu):
        return np.zeros((mu.n, mu.dim))


def evaluate(f: Functional, mu: Configuration) -> float:
    return f.value(mu)


def particle_gradient(f: Functional, mu: Configuration, x, tol=1e-12) -> np.ndarray:
    """Gradient of f when the particle of mu located at x is displaced."""
    x = np.asarray(x, dtype=float).reshape(mu.dim)
    dist = np.max(np.abs(mu.points - x), axis=1) if mu.n else np.zeros(0)
    hit = np.nonzero(dist <= tol)[0]
    if len(hit) == 0:
        raise ValidationError(f"{x} is not a particle of the configuration")
    return f.gradient(mu)[hit[0]]


def finite_difference_gradient(f: Functional, mu: Configuration, i, h=1e-5):
    """Symmetric finite difference of f in the position of particle i (test helper)."""
    g = np.zeros(mu.dim)
    for k in range(mu.dim):
        e = np.zeros(mu.dim)
        e[k] = h
        up = Configuration(_moved(mu.points, i, e), None)
        dn = Configuration(_moved(mu.points, i, -e), None)
        g[k] = (f.value(up) - f.value(dn)) / (2 * h)
    return g


def _moved(pts, i, e):
    p = pts.copy()
    p[i] = p[i] + e
    return p


# ---------------------------------------------------------------------------
# sample sets and energies

@dataclass
class SampleSet:
    """Frozen Monte Carlo sample of configurations around U, with cached a(mu, x) for x in U."""

    U: Domain
    rho: float
    model: CoefficientModel
    configs: list
    inside: list
    a_inside: list
    max_count: Optional[int] = None
    seed: object = None

    @classmethod
    def draw(cls, U, rho, model, M, rng, max_count=None):
        if M < 1:
            raise ValidationError("sample count must be positive")
        g = as_generator(rng)
        configs, inside, a_in = [], [], []
        for _ in range(M):
            mu, ins = sample_with_collar(U, rho, g, max_count=max_count)
            idx = np.nonzero(ins)[0]
            a = model.field(mu.points, mu.points[idx], skip=idx, add_center=True)
            configs.append(mu)
            inside.append(ins)
            a_in.append(a)
        return cls(U, rho, model, configs, inside, a_in, max_count, getattr(rng, "seed", None))

    def __len__(self):
        return len(self.configs)

    @property
    def norm(self):
        return self.rho * self.U.volume

    @property
    def expected_count(self):
        lam = self.rho * self.U.volume
        if self.max_count is None:
            return lam
        p = truncated_poisson_pmf(lam, self.max_count)
        return float(np.arange(self.max_count + 1) @ p)

    def counts(self):
        return np.array([int(m.sum()) for m in self.inside])


@dataclass
class EnergyEstimate:
    value: float
    se: float
    M: int
    normalized: bool = True

    def within(self, target, k=3.0, atol=1e-12):
        return abs(self.value - target) <= k * self.se + atol


def energy_samples(f, g, samples: SampleSet, normalize=True):
    """Per-sample values of int_U 1/2 grad f . a grad g dmu (optionally / rho|U|)."""
    out = np.empty(len(samples))
    for s, (mu, ins, a) in enumerate(zip(samples.configs, samples.inside, samples.a_inside)):
        gf = f.gradient(mu)[ins]
        gg = gf if g is f else g.gradient(mu)[ins]
        out[s] = 0.5 * np.einsum("ni,nij,nj->", gf, a, gg)
    if normalize:
        out /= samples.norm
    return out


def dirichlet_energy(f, g, model=None, U=None, rho=None, M=None, rng=None, samples=None,
                     normalize=True) -> EnergyEstimate:
    """E[(rho|U|)^{-1} int_U 1/2 grad f . a grad g dmu] with its standard error."""
    if samples is None:
        if not M:
            raise ValidationError("sample count must be positive")
        samples = SampleSet.draw(U, rho, model, M, rng)
    x = energy_samples(f, g, samples, normalize)
    m, se = mean_se(x)
    return EnergyEstimate(float(m), float(se), len(x), normalize)


def dirichlet_gram(basis: FeatureBasis, samples: SampleSet, normalize=True):
    """Full bilinear form E[int 1/2 grad B_i . a grad B_j] over the basis from one sample set."""
    G = np.zeros((basis.nf, basis.nf))
    for mu, ins, a in zip(samples.configs, samples.inside, samples.a_inside):
        _, X = basis.features(mu.points[ins])
        aX = np.einsum("nij,njf->nif", a, X)
        G += X.reshape(-1, basis.nf).T @ aX.reshape(-1, basis.nf)
    G *= 0.5 / len(samples)
    if normalize:
        G /= samples.norm
    return G


@dataclass
class H1Norms:
    l2: float
    h1: float
    h1_normalized: float
    se_l2_sq: float
    se_grad_sq: float


def _plain_samples(U, rho, M, rng):
    if not M:
        raise ValidationError("sample count must be positive")
    g = as_generator(rng)
    return [sample_poisson(U, rho, g) for _ in range(M)]


def h1_norms(f, U: Domain, rho, M, rng) -> H1Norms:
    """L^2, H^1 and scale-normalized H^1 norms of f under the Poisson law on U."""
    f2 = np.empty(M)
    g2 = np.empty(M)
    for s, mu in enumerate(_plain_samples(U, rho, M, rng)):
        f2[s] = f.value(mu) ** 2
        ins = U.contains(mu.points) if mu.n else np.zeros(0, dtype=bool)
        g2[s] = np.sum(f.gradient(mu)[ins] ** 2)
    mf, sf = mean_se(f2)
    mg, sg = mean_se(g2)
    return H1Norms(float(np.sqrt(mf)), float(np.sqrt(mf + mg)),
                   float(np.sqrt(U.volume ** (-2 / U.dim) * mf + mg)), float(sf), float(sg))


def poincare_ratio(f, U: Domain, rho, M, rng) -> float:
    """Var f / (diam(U)^2 E int_U |grad f|^2 dmu); NaN for the degenerate 0/0 case."""
    if not f.zero_boundary:
        raise ValidationError("the Poincare diagnostic needs a zero-boundary functional")
    vals = np.empty(M)
    g2 = np.empty(M)
    for s, mu in enumerate(_plain_samples(U, rho, M, rng)):
        vals[s] = f.value(mu)
        ins = U.contains(mu.points) if mu.n else np.zeros(0, dtype=bool)
        g2[s] = np.sum(f.gradient(mu)[ins] ** 2)
    var = float(np.var(vals, ddof=1)) if M > 1 else 0.0
    energy = float(np.mean(g2))
    if energy == 0.0:
        if var == 0.0:
            return float("nan")
        raise ValidationError("zero gradient energy with nonzero variance")
    return var / (U.diameter ** 2 * energy)
