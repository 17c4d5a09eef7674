"""Configurations, Poisson sampling, geometry and the coefficient catalog."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy import stats

from .kernels.coefficients import coefficient_field

MODEL_KINDS = {"identity": 0, "count-indicator": 1, "smooth-count": 2, "anisotropic-count": 3}
INTERACTION_RADIUS = 1.0


class ValidationError(ValueError):
    """Invalid input to a model or sampler."""


# ---------------------------------------------------------------------------
# geometry

@dataclass(frozen=True)
class Domain:
    """Open box (-side/2, side/2)^d shifted by ``center``, or a torus of the same extent."""

    dim: int
    geometry: str = "box"
    side: float = 1.0
    center: tuple = None

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValidationError(f"dimension must be 1 or 2, got {self.dim}")
        if self.geometry not in ("box", "torus"):
            raise ValidationError(f"geometry must be box or torus, got {self.geometry!r}")
        if not self.side > 0:
            raise ValidationError("side must be positive")
        if self.geometry == "torus" and not self.side > 2 * INTERACTION_RADIUS:
            raise ValidationError("torus side must exceed 2")
        c = (0.0,) * self.dim if self.center is None else tuple(float(v) for v in self.center)
        if len(c) != self.dim:
            raise ValidationError("center has wrong dimension")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "side", float(self.side))

    @classmethod
    def cube(cls, m, dim, center=None):
        """The triadic cube of side 3^m."""
        return cls(dim, "box", 3.0 ** m, center)

    @classmethod
    def torus(cls, side, dim):
        return cls(dim, "torus", side)

    @property
    def periodic(self):
        return self.geometry == "torus"

    @property
    def period(self):
        return self.side if self.periodic else 0.0

    @property
    def lower(self):
        return np.asarray(self.center) - self.side / 2

    @property
    def upper(self):
        return np.asarray(self.center) + self.side / 2

    @property
    def volume(self):
        return self.side ** self.dim

    @property
    def diameter(self):
        return self.side * math.sqrt(self.dim)

    def contains(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.periodic:
            return np.ones(x.shape[0], dtype=bool)
        return np.all((x > self.lower) & (x < self.upper), axis=1)

    def wrap(self, x):
        x = np.asarray(x, dtype=float)
        if not self.periodic:
            return x
        c = np.asarray(self.center)
        return c + (x - c) - self.side * np.floor((x - c) / self.side + 0.5)

    def displacement(self, x, y):
        """y - x, using the minimal image on a torus."""
        s = np.asarray(y, dtype=float) - np.asarray(x, dtype=float)
        if self.periodic:
            s = s - self.side * np.floor(s / self.side + 0.5)
        return s

    def padded(self, pad=INTERACTION_RADIUS):
        if self.periodic:
            return self
        return Domain(self.dim, "box", self.side + 2 * pad, self.center)

    def shifted(self, x):
        return Domain(self.dim, self.geometry, self.side, tuple(np.asarray(self.center) + x))

    def header(self):
        h = f"# d={self.dim} geometry={self.geometry} side={self.side!r}"
        if any(self.center):
            h += " center=" + ",".join(repr(c) for c in self.center)
        return h


def mesoscopic_grid(m, n, dim):
    """Centres z of the subcubes z + cube(n) tiling cube(m), i.e. 3^n Z^d inside cube(m)."""
    if n > m:
        raise ValidationError("mesoscale n must not exceed m")
    k = 3 ** (m - n)
    ticks = 3.0 ** n * (np.arange(k) - (k - 1) / 2)
    mesh = np.meshgrid(*([ticks] * dim), indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=1)


@dataclass(frozen=True)
class Ball:
    center: tuple
    radius: float = INTERACTION_RADIUS

    def contains(self, x):
        x = np.atleast_2d(x)
        return np.sum((x - np.asarray(self.center)) ** 2, axis=1) < self.radius ** 2


Region = Union[None, Domain, Ball]


def _in_region(region, x):
    if region is None:
        return np.ones(len(x), dtype=bool)
    return region.contains(x)


# ---------------------------------------------------------------------------
# configurations

@dataclass(frozen=True)
class Configuration:
    """Finite point multiset. ``domain`` may be None for free-space point sets."""

    points: np.ndarray
    domain: Optional[Domain] = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=float, copy=True)
        dim = self.domain.dim if self.domain is not None else (pts.shape[1] if pts.ndim == 2 else 1)
        pts = pts.reshape(-1, dim)
        if self.domain is not None and not np.all(self.domain.contains(pts)):
            raise ValidationError("configuration has points outside its domain")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def n(self):
        return self.points.shape[0]

    @property
    def dim(self):
        return self.points.shape[1]

    def __len__(self):
        return self.n

    def count_in(self, region):
        return int(np.sum(_in_region(region, self.points)))

    def restrict(self, region):
        return Configuration(self.points[_in_region(region, self.points)], self.domain)

    def add(self, x):
        x = np.asarray(x, dtype=float).reshape(-1, self.dim)
        return Configuration(np.vstack([self.points, x]), self.domain)

    def remove(self, i):
        return Configuration(np.delete(self.points, i, axis=0), self.domain)

    def moved(self, i, x):
        pts = self.points.copy()
        pts[i] = x
        if self.domain is not None:
            pts[i] = self.domain.wrap(pts[i])
        return Configuration(pts, self.domain)

    def sorted(self):
        """Canonical ordering, for permutation-invariant comparisons."""
        order = np.lexsort(self.points.T[::-1])
        return Configuration(self.points[order], self.domain)


def translate_restrict(mu: Configuration, x, region: Region = None) -> Configuration:
    """tau_{-x} mu restricted to ``region``; translations wrap on a torus."""
    x = np.asarray(x, dtype=float).reshape(mu.dim)
    dom = mu.domain
    if dom is not None and dom.periodic:
        pts = dom.displacement(x, mu.points)
        new_dom = Domain(dom.dim, "torus", dom.side)
    else:
        pts = mu.points - x
        new_dom = dom.shifted(-x) if dom is not None else None
    keep = _in_region(region, pts)
    return Configuration(pts[keep], new_dom)


# ---------------------------------------------------------------------------
# coefficient catalog

@dataclass(frozen=True)
class CoefficientModel:
    """Catalog coefficient a°(mu), evaluated on tau_{-x} mu restricted to B_1.

    count-indicator: (1 + (Lambda-1) 1{mu(B_1) >= threshold}) Id.
    smooth-count: same with a soft count (weights ramp to 0 over ``width``) and a
    smoothstep in place of the indicator.
    anisotropic-count: diag entry k equals Lambda when both open half-balls
    {y in B_1: +-y_k > 0} are occupied, else 1.
    """

    kind: str = "identity"
    Lambda: float = 1.0
    threshold: float = 2.0
    width: float = 0.25
    check: bool = field(default=True, compare=False, repr=False)

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValidationError(f"unknown model kind {self.kind!r}")
        if self.check:
            if not self.Lambda >= 1.0:
                raise ValidationError("ellipticity ceiling Lambda must be >= 1")
            if not 0.0 < self.width <= 1.0:
                raise ValidationError("smoothing width must lie in (0, 1]")
            if self.threshold < 0:
                raise ValidationError("threshold must be nonnegative")

    @classmethod
    def unchecked(cls, **kw):
        """Bypass validation; only used to exercise the ellipticity audit."""
        return cls(check=False, **kw)

    @property
    def code(self):
        return MODEL_KINDS[self.kind]

    @property
    def params(self):
        return np.array([self.Lambda, self.threshold, self.width], dtype=float)

    @property
    def is_constant(self):
        return self.kind == "identity" or self.Lambda == 1.0

    def a0(self, rel_points):
        """a°(mu) for mu given by its points relative to the origin."""
        rel = np.atleast_2d(np.asarray(rel_points, dtype=float))
        d = rel.shape[1]
        return coefficient_field(rel, np.zeros((1, d)), self.code, self.params)[0]

    def field(self, pts, X, period=0.0, skip=None, add_center=False):
        return coefficient_field(pts, X, self.code, self.params, period, skip, add_center)

    def to_dict(self):
        return {"kind": self.kind, "Lambda": self.Lambda, "threshold": self.threshold, "width": self.width}


def eval_a(model: CoefficientModel, mu: Configuration, x) -> np.ndarray:
    """a(mu, x) = a°(tau_{-x} mu). x need not be a particle."""
    x = np.asarray(x, dtype=float).reshape(1, mu.dim)
    period = mu.domain.period if mu.domain is not None else 0.0
    return model.field(mu.points, x, period)[0]


def ellipticity_audit(model, n_trials=10_000, dim=1, rng=None, rho=1.5):
    """Check 1 <= xi.a xi <= Lambda and symmetry on random (mu, xi); returns (ok, worst)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    bad = []
    dom = Domain(dim, "box", 2.5)
    for _ in range(n_trials // 50):
        mu = sample_poisson(dom, rho, rng)
        X = rng.uniform(-1, 1, size=(50, dim))
        A = model.field(mu.points, X)
        xi = rng.normal(size=(50, dim))
        xi /= np.linalg.norm(xi, axis=1, keepdims=True)
        q = np.einsum("ni,nij,nj->n", xi, A, xi)
        if np.any(q < 1 - 1e-12) or np.any(q > model.Lambda + 1e-12):
            bad.append(float(q.min()))
        if not np.allclose(A, np.swapaxes(A, 1, 2)):
            bad.append(float("nan"))
    return len(bad) == 0, bad


# ---------------------------------------------------------------------------
# randomness

@dataclass(frozen=True)
class RandomStream:
    """Counter-based (Philox) stream addressed by a seed and a spawn path."""

    seed: int
    stream: tuple = (0,)

    def __post_init__(self):
        s = self.stream if isinstance(self.stream, tuple) else (int(self.stream),)
        object.__setattr__(self, "stream", tuple(int(v) for v in s))
        object.__setattr__(self, "seed", int(self.seed) & (2**64 - 1))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=self.stream)
        return np.random.Generator(np.random.Philox(ss))

    def substream(self, *idx) -> "RandomStream":
        return RandomStream(self.seed, self.stream + tuple(int(i) for i in idx))

    def spawn(self, k):
        return [self.substream(i) for i in range(k)]


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, RandomStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    return RandomStream(int(rng)).generator()


# ---------------------------------------------------------------------------
# sampling

def truncated_poisson_pmf(mean, kmax):
    k = np.arange(kmax + 1)
    p = stats.poisson.pmf(k, mean)
    return p / p.sum()


def _draw_count(rng, mean, max_count):
    if max_count is None:
        return int(rng.poisson(mean))
    p = truncated_poisson_pmf(mean, max_count)
    return int(rng.choice(max_count + 1, p=p))


def sample_poisson(domain: Domain, rho, rng, max_count=None) -> Configuration:
    """Poisson(rho) process on ``domain``; ``max_count`` conditions on the count."""
    if rho < 0:
        raise ValidationError("intensity must be nonnegative")
    g = as_generator(rng)
    k = _draw_count(g, rho * domain.volume, max_count)
    u = g.random((k, domain.dim))
    pts = domain.lower + domain.side * u
    if not domain.periodic:
        # guard the open boundary against a draw of exactly 0
        pts = np.clip(pts, np.nextafter(domain.lower, np.inf), np.nextafter(domain.upper, -np.inf))
    return Configuration(pts, domain)


def palm_sample(domain: Domain, rho, rng) -> Configuration:
    """Poisson sample plus a deterministic atom at the origin (reduced Palm law)."""
    origin = np.zeros((1, domain.dim))
    if not domain.contains(origin)[0]:
        raise ValidationError("origin must lie in the domain")
    mu = sample_poisson(domain, rho, rng)
    return Configuration(np.vstack([origin, mu.points]), domain)


def sample_with_collar(U: Domain, rho, rng, pad=INTERACTION_RADIUS, max_count=None):
    """Sample on U enlarged by ``pad`` so that a(mu, x) is exact for every x in U.

    The count inside U may be conditioned on ``<= max_count``; the collar stays
    an independent Poisson process. Returns (configuration, inside-mask).
    """
    g = as_generator(rng)
    inner = sample_poisson(U, rho, g, max_count)
    outer_dom = U.padded(pad)
    outer = sample_poisson(outer_dom, rho, g)
    keep = ~U.contains(outer.points) if outer.n else np.zeros(0, dtype=bool)
    pts = np.vstack([inner.points, outer.points[keep]])
    inside = np.zeros(pts.shape[0], dtype=bool)
    inside[: inner.n] = True
    return Configuration(pts, outer_dom), inside


# ---------------------------------------------------------------------------
# snapshot I/O

def _parse_header(line):
    out = {}
    for tok in line.lstrip("#").split():
        if "=" in tok:
            k, v = tok.split("=", 1)
            out[k] = v
    return out


def write_snapshot(path, mu: Configuration, time=None):
    dom = mu.domain
    with open(path, "w", encoding="utf-8") as fh:
        if dom is not None:
            fh.write(dom.header() + "\n")
        else:
            fh.write(f"# d={mu.dim} geometry=free side=inf\n")
        if time is not None:
            fh.write(f"# time={time!r}\n")
        for p in mu.points:
            fh.write(" ".join(repr(float(v)) for v in p) + "\n")


def read_snapshot(path):
    """Returns (Configuration, time or None)."""
    meta = {}
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#"):
                meta.update(_parse_header(line))
            elif line.strip():
                rows.append([float(v) for v in line.split()])
    d = int(meta["d"])
    dom = None
    if meta.get("geometry") in ("box", "torus"):
        center = tuple(float(v) for v in meta["center"].split(",")) if "center" in meta else None
        dom = Domain(d, meta["geometry"], float(meta["side"]), center)
    t = float(meta["time"]) if "time" in meta else None
    return Configuration(np.array(rows).reshape(-1, d), dom), t
