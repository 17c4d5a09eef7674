"""Poisson-reversible particle dynamics on the torus and fluctuation-field statistics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .core import (CoefficientModel, Configuration, Domain, RandomStream, ValidationError,
                   as_generator, sample_poisson)
from .homogenized import GridFunction, HeatKernel, apply_homog_semigroup, two_point_prediction
from .kernels.chain import run_sweeps
from .stats import EstimatorResult, batch_means_se

SCHEMES = ("metropolis-gaussian", "plain-euler")


@dataclass(frozen=True)
class ChainParams:
    """One sweep visits every particle once in random order and advances time by ``dt``.

    ``plain-euler`` skips the accept step; it is not reversible and kept only for comparison.
    """

    dt: float
    domain: Domain
    model: CoefficientModel
    rho: float = 1.0
    scheme: str = "metropolis-gaussian"

    def __post_init__(self):
        if not self.dt > 0:
            raise ValidationError("time step must be positive")
        if not self.domain.periodic:
            raise ValidationError("bulk dynamics run on a torus")
        if any(self.domain.center):
            raise ValidationError("torus must be centred at the origin")
        if self.scheme not in SCHEMES:
            raise ValidationError(f"unknown scheme {self.scheme!r}")
        if not self.rho > 0:
            raise ValidationError("intensity must be positive")

    @property
    def metropolis(self):
        return self.scheme == "metropolis-gaussian"

    def n_sweeps(self, t):
        return int(round(t / self.dt))


@dataclass
class Trajectory:
    initial: Configuration
    snapshots: List[tuple] = field(default_factory=list)
    seed: object = None
    accepted: int = 0
    proposed: int = 0

    @property
    def times(self):
        return [t for t, _ in self.snapshots]

    @property
    def acceptance(self):
        return self.accepted / self.proposed if self.proposed else 1.0


def _draws(g: np.random.Generator, k, n, d):
    order = g.permuted(np.tile(np.arange(n, dtype=np.int64), (k, 1)), axis=1)
    return order, g.standard_normal((k, n, d)), g.random((k, n))


def _advance(pts, params: ChainParams, k, g):
    if k <= 0 or pts.shape[0] == 0:
        return 0
    order, z, u = _draws(g, k, pts.shape[0], pts.shape[1])
    m = params.model
    return run_sweeps(pts, params.domain.side, m.code, m.params, params.dt, params.metropolis, order, z, u)


def step(state: Configuration, params: ChainParams, rng) -> Configuration:
    pts = np.array(state.points, dtype=float)
    _advance(pts, params, 1, as_generator(rng))
    return Configuration(pts, params.domain)


def simulate(initial: Configuration, params: ChainParams, times: Sequence[float], rng) -> Trajectory:
    """Snapshots at the sweep boundaries nearest to ``times``."""
    times = [float(t) for t in times]
    if any(t < 0 for t in times) or any(b < a for a, b in zip(times, times[1:])):
        raise ValidationError("times must be sorted and nonnegative")
    g = as_generator(rng)
    pts = np.array(initial.points, dtype=float)
    traj = Trajectory(initial, seed=getattr(rng, "seed", None))
    done = 0
    for t in times:
        k = params.n_sweeps(t) - done
        traj.accepted += _advance(pts, params, k, g)
        traj.proposed += max(k, 0) * pts.shape[0]
        done += max(k, 0)
        traj.snapshots.append((done * params.dt, Configuration(pts.copy(), params.domain)))
    return traj


# ---------------------------------------------------------------------------
# fluctuation fields

def fluctuation_field(mu: Configuration, f: GridFunction, rho, N=1.0):
    """Y^N(f) = N^{-d/2} (sum_i f(X_i/N) - rho N^d int f)."""
    if N < 1:
        raise ValidationError("scale N must be >= 1")
    d = f.d
    s = float(np.sum(f(mu.points / N))) if mu.n else 0.0
    return N ** (-d / 2) * (s - rho * N ** d * f.integral())


def _check_test_function(f: GridFunction, params: ChainParams):
    if not f.periodic or abs(f.side - params.domain.side) > 1e-9 or f.d != params.domain.dim:
        raise ValidationError("test functions must be periodic grids on the simulation torus")


def _replica_block(params: ChainParams, times, tests, R, seed, start=0):
    out = np.empty((R, len(times), len(tests)))
    acc = prop = 0
    base = RandomStream(seed)
    for r in range(R):
        g = base.substream(start + r).generator()
        mu0 = sample_poisson(params.domain, params.rho, g)
        tr = simulate(mu0, params, times, g)
        acc += tr.accepted
        prop += tr.proposed
        for a, (_, mu) in enumerate(tr.snapshots):
            for b, f in enumerate(tests):
                out[r, a, b] = fluctuation_field(mu, f, params.rho)
    return out, acc, prop


def _check_replicas(params, tests, R):
    if R <= 0:
        raise ValidationError("need at least one replica")
    for f in tests:
        _check_test_function(f, params)


def run_replicas(params: ChainParams, times, tests: Sequence[GridFunction], R, seed, start=0):
    """Y_t(f) for every replica, requested time and test function: shape (R, len(times), len(tests)).

    Replica r draws from substream (r,) of ``seed`` and starts from a fresh Poisson sample.
    Also returns the pooled acceptance rate.
    """
    _check_replicas(params, tests, R)
    out, acc, prop = _replica_block(params, times, tests, R, seed, start)
    return out, (acc / prop if prop else 1.0)


def _replica_chunk(args):
    return _replica_block(*args)


def run_replicas_parallel(params: ChainParams, times, tests, R, seed, workers=1):
    """Same output as :func:`run_replicas`, with replica blocks spread over processes.

    Replica r always uses substream r, so the result does not depend on ``workers``.
    """
    if workers <= 1 or R < 2 * workers:
        return run_replicas(params, times, tests, R, seed)
    _check_replicas(params, tests, R)
    from concurrent.futures import ProcessPoolExecutor
    bounds = np.linspace(0, R, workers + 1).astype(int)
    jobs = [(params, times, tests, int(b - a), seed, int(a)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    with ProcessPoolExecutor(workers) as ex:
        parts = list(ex.map(_replica_chunk, jobs))
    Y = np.concatenate([p[0] for p in parts], axis=0)
    acc = sum(p[1] for p in parts)
    prop = sum(p[2] for p in parts)
    return Y, (acc / prop if prop else 1.0)


@dataclass
class CorrelationEstimate:
    t: float
    s: float
    estimate: float
    se: float
    R: int
    prediction: float = float("nan")
    quad_error: float = float("nan")

    @property
    def discrepancy(self):
        return self.estimate - self.prediction

    def within(self, k=3.0):
        return abs(self.discrepancy) <= k * self.se + 1e-12

    def row(self):
        return [self.t, self.s, self.estimate, self.se, self.prediction, self.discrepancy]


def correlation_table(pairs, f: GridFunction, g: GridFunction, params: ChainParams, R, seed,
                      abar=None, workers=1) -> List[CorrelationEstimate]:
    """E[Y_t(f) Y_s(g)] for several (t, s) with common random numbers across pairs."""
    for t, s in pairs:
        if not t >= s >= 0:
            raise ValidationError("need t >= s >= 0")
    times = sorted({float(x) for p in pairs for x in p})
    Y, _ = run_replicas_parallel(params, times, [f, g], R, seed, workers)
    hk = None
    if abar is None and params.model.is_constant:
        abar = np.eye(f.d)
    if abar is not None:
        hk = HeatKernel(np.atleast_2d(abar), f.d)
    out = []
    for t, s in pairs:
        prod = Y[:, times.index(float(t)), 0] * Y[:, times.index(float(s)), 1]
        m, se = batch_means_se(prod)
        est = CorrelationEstimate(float(t), float(s), float(m), float(se), R)
        if hk is not None:
            # realized times sit on sweep boundaries
            dt = params.dt * (params.n_sweeps(t) - params.n_sweeps(s))
            pr = two_point_prediction(f, g, dt, hk, params.rho)
            est.prediction, est.quad_error = pr.value, pr.quad_error
        out.append(est)
    return out


def two_point_estimate(f, g, t, s, params: ChainParams, R, seed, abar=None) -> CorrelationEstimate:
    return correlation_table([(t, s)], f, g, params, R, seed, abar)[0]


@dataclass
class SemigroupDiff:
    t: float
    squared: float
    se: float
    R: int

    @property
    def norm(self):
        return math.sqrt(max(self.squared, 0.0))


def shifted(f: GridFunction, k) -> GridFunction:
    """f translated by k grid nodes along every axis (periodic grids only)."""
    return f.with_values(np.roll(f.values, k, axis=tuple(range(f.d))))


def semigroup_diff(f: GridFunction, t, params: ChainParams, R, seed, abar=None, n_shifts=1) -> SemigroupDiff:
    """||(P_t - Pbar_t) F||^2 for F = Y(f), by polarization:

    <F, P_2t F> + <F, Pbar_2t F> - 2 <Pbar_t F, P_t F>.
    The chain supplies the two P-terms (same replicas), the heat kernel the middle one.
    With ``n_shifts`` > 1 the chain terms are averaged over evenly spaced
    translates of f, which leaves the mean unchanged by translation invariance.
    """
    if not t > 0:
        raise ValidationError("time must be positive")
    if abar is None:
        if not params.model.is_constant:
            raise ValidationError("a homogenized matrix is required for a non-constant model")
        abar = np.eye(f.d)
    hk = HeatKernel(np.atleast_2d(abar), f.d)
    ft = apply_homog_semigroup(f, t, hk)
    # the chain runs on sweep boundaries, so use the realized times
    t1 = params.dt * params.n_sweeps(t)
    t2 = params.dt * params.n_sweeps(2 * t)
    step_ = max(1, f.n // n_shifts)
    tests = []
    for j in range(n_shifts):
        tests += [shifted(f, j * step_), shifted(ft, j * step_)]
    Y, _ = run_replicas(params, [0.0, t1, t2], tests, R, seed)
    x = np.mean(Y[:, 0, 0::2] * Y[:, 2, 0::2] - 2.0 * Y[:, 0, 1::2] * Y[:, 1, 0::2], axis=1)
    m, se = batch_means_se(x)
    homog = params.rho * f.inner(apply_homog_semigroup(f, 2 * t, hk))
    return SemigroupDiff(float(t), float(m + homog), float(se), R)


# ---------------------------------------------------------------------------
# brute-force certificate

def discrete_transition_matrix(model: CoefficientModel, sites=8, side=4.0, dt=0.25, kmax=3):
    """Sweep kernel of the two-particle chain on a ring of ``sites`` points (d = 1).

    Jumps of k sites, |k| <= kmax, are proposed with discrete Gaussian weights of
    variance a dt; the accept step uses the reverse/forward proposal ratio. The
    random-scan sweep is the average of both visiting orders. Returns (K, states).
    """
    if 2 * kmax + 1 > sites:
        raise ValidationError("jump range wraps around the ring")
    h = side / sites
    xs = -side / 2 + h * np.arange(sites)
    states = [(i, j) for i in range(sites) for j in range(sites)]
    index = {s: k for k, s in enumerate(states)}
    ks = np.arange(-kmax, kmax + 1)

    def weights(a):
        w = np.exp(-(ks * h) ** 2 / (2 * a * dt))
        return w / w.sum()

    def a_at(x, other):
        pts = np.array([[other]])
        return model.field(pts, np.array([[x]]), side, add_center=True)[0, 0, 0]

    def single(p):
        K = np.zeros((len(states), len(states)))
        for s in states:
            me, other = s[p], s[1 - p]
            wf = weights(a_at(xs[me], xs[other]))
            for kk, k in enumerate(ks):
                tgt = (me + k) % sites
                wr = weights(a_at(xs[tgt], xs[other]))[kmax - k]
                acc = min(1.0, wr / wf[kk])
                new = list(s)
                new[p] = tgt
                K[index[s], index[tuple(new)]] += wf[kk] * acc
            K[index[s], index[s]] += 1.0 - K[index[s]].sum()
        return K

    K1, K2 = single(0), single(1)
    return 0.5 * (K1 @ K2 + K2 @ K1), states
