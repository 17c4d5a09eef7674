"""Homogenized objects: heat kernel, semigroup on grids, Dirichlet solver, lifts,
two-point predictions and two-scale expansions."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve
from scipy.integrate import trapezoid
from scipy.special import erfc

from .core import Configuration, Domain, ValidationError, mesoscopic_grid, translate_restrict
from .functionals import Functional


class TruncationError(RuntimeError):
    """Heat-kernel mass leaking past the padded window exceeds the tolerance."""


class CenteringError(ValueError):
    """Source term is required to have zero mean."""


# ---------------------------------------------------------------------------
# heat kernel

@dataclass(frozen=True)
class HeatKernel:
    abar: np.ndarray
    d: int = 1

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.abar, dtype=float))
        if a.shape != (self.d, self.d):
            raise ValidationError("abar has wrong shape")
        if not np.allclose(a, a.T) or np.linalg.eigvalsh(a).min() <= 0:
            raise ValidationError("abar must be symmetric positive definite")
        object.__setattr__(self, "abar", a)

    @classmethod
    def identity(cls, d=1):
        return cls(np.eye(d), d)


def heat_kernel(hk: HeatKernel, t, x):
    """Psi_t(x) = (2 pi t)^{-d/2} det(abar)^{-1/2} exp(-x.abar^{-1}x / 2t)."""
    if not t > 0:
        raise ValidationError("time must be positive")
    x = np.asarray(x, dtype=float)
    if hk.d == 1 and (x.ndim == 0 or x.shape[-1] != 1):
        x = x[..., None]
    inv = np.linalg.inv(hk.abar)
    q = np.einsum("...i,ij,...j->...", x, inv, x)
    return (2 * math.pi * t) ** (-hk.d / 2) / math.sqrt(np.linalg.det(hk.abar)) * np.exp(-q / (2 * t))


def gaussian_density(x, cov):
    """N(0, cov) density, used as an analytic oracle."""
    cov = np.atleast_2d(cov)
    d = cov.shape[0]
    x = np.asarray(x, dtype=float)
    if d == 1 and (x.ndim == 0 or x.shape[-1] != 1):
        x = x[..., None]
    q = np.einsum("...i,ij,...j->...", x, np.linalg.inv(cov), x)
    return np.exp(-q / 2) / math.sqrt((2 * math.pi) ** d * np.linalg.det(cov))


# ---------------------------------------------------------------------------
# grid functions

@dataclass
class GridFunction:
    """Nodal values on a uniform grid.

    Box grids carry nodes on both faces (n+1 per axis, side n h); periodic grids
    carry n nodes per axis with period n h. Values are interpolated multilinearly
    and vanish outside a box.
    """

    values: np.ndarray
    lower: np.ndarray
    h: float
    periodic: bool = False
    zero_boundary: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.lower = np.asarray(self.lower, dtype=float).reshape(self.values.ndim)
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("grid values must be finite")
        if self.zero_boundary and not self.periodic:
            v = self.values
            for ax in range(v.ndim):
                sl = [slice(None)] * v.ndim
                sl[ax] = 0
                v[tuple(sl)] = 0.0
                sl[ax] = -1
                v[tuple(sl)] = 0.0

    @property
    def d(self):
        return self.values.ndim

    @property
    def n(self):
        s = self.values.shape[0]
        return s if self.periodic else s - 1

    @property
    def side(self):
        return self.n * self.h

    @property
    def domain(self):
        c = tuple(self.lower + self.side / 2)
        return Domain(self.d, "torus" if self.periodic else "box", self.side, c)

    def axes(self):
        return [self.lower[k] + self.h * np.arange(self.values.shape[k]) for k in range(self.d)]

    def coords(self):
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=1)

    def _weights(self):
        w = np.full(self.values.shape, self.h ** self.d)
        if not self.periodic:
            for ax in range(self.d):
                sl = [slice(None)] * self.d
                sl[ax] = 0
                w[tuple(sl)] /= 2
                sl[ax] = -1
                w[tuple(sl)] /= 2
        return w

    def integral(self):
        """Exact integral of the multilinear interpolant (trapezoid rule)."""
        return float(np.sum(self._weights() * self.values))

    def inner(self, other: "GridFunction"):
        return float(np.sum(self._weights() * self.values * other.values))

    def l2_norm(self):
        return math.sqrt(self.inner(self))

    def l2_norm_interpolant(self):
        """Exact L^2 norm of the multilinear interpolant (separable mass matrix)."""
        v = self.values
        for ax in range(self.d):
            v = np.moveaxis(v, ax, 0)
            if self.periodic:
                mv = (4 * v + np.roll(v, 1, 0) + np.roll(v, -1, 0)) / 6
            else:
                mv = 4 * v
                mv[1:] += v[:-1]
                mv[:-1] += v[1:]
                mv[0] -= 2 * v[0]
                mv[-1] -= 2 * v[-1]
                mv /= 6
            v = np.moveaxis(mv, 0, ax)
        return math.sqrt(max(float(np.sum(v * self.values) * self.h ** self.d), 0.0))

    def _locate(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        u = (x - self.lower) / self.h
        if self.periodic:
            u = np.mod(u, self.n)
            i = np.floor(u).astype(int)
            return i, u - i, np.ones(len(x), dtype=bool)
        inside = np.all((u >= 0) & (u <= self.n), axis=1)
        i = np.clip(np.floor(u).astype(int), 0, self.n - 1)
        return i, u - i, inside

    def _corner(self, i, bits):
        idx = []
        for k in range(self.d):
            j = i[:, k] + bits[k]
            if self.periodic:
                j = np.mod(j, self.n)
            idx.append(j)
        return self.values[tuple(idx)]

    def __call__(self, x):
        i, t, inside = self._locate(x)
        out = np.zeros(len(t))
        for corner in range(2 ** self.d):
            bits = [(corner >> k) & 1 for k in range(self.d)]
            w = np.ones(len(t))
            for k in range(self.d):
                w *= t[:, k] if bits[k] else 1 - t[:, k]
            out += w * self._corner(i, bits)
        return np.where(inside, out, 0.0)

    def gradient(self, x):
        i, t, inside = self._locate(x)
        out = np.zeros((len(t), self.d))
        for corner in range(2 ** self.d):
            bits = [(corner >> k) & 1 for k in range(self.d)]
            vals = self._corner(i, bits)
            for c in range(self.d):
                w = np.full(len(t), (1.0 if bits[c] else -1.0) / self.h)
                for k in range(self.d):
                    if k != c:
                        w *= t[:, k] if bits[k] else 1 - t[:, k]
                out[:, c] += w * vals
        return np.where(inside[:, None], out, 0.0)

    def with_values(self, values, **meta):
        return GridFunction(values, self.lower, self.h, self.periodic, False, {**self.meta, **meta})

    @classmethod
    def from_function(cls, fn, domain: Domain, h, zero_boundary=False):
        n = domain.side / h
        if abs(n - round(n)) > 1e-9:
            raise ValidationError("h must divide the side")
        n = int(round(n))
        npts = n if domain.periodic else n + 1
        lower = domain.lower
        axes = [lower[k] + h * np.arange(npts) for k in range(domain.dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        X = np.stack([g.ravel() for g in mesh], axis=1)
        vals = np.asarray(fn(X), dtype=float).reshape(mesh[0].shape)
        return cls(vals, lower, h, domain.periodic, zero_boundary)

    def to_csv(self, path):
        X = self.coords()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(f"# d={self.d} h={self.h!r} periodic={int(self.periodic)} "
                     f"zero_boundary={int(self.zero_boundary)} shape={'x'.join(map(str, self.values.shape))}\n")
            w = csv.writer(fh)
            w.writerow([f"x{k}" for k in range(self.d)] + ["value"])
            for x, v in zip(X, self.values.ravel()):
                w.writerow([repr(float(c)) for c in x] + [repr(float(v))])

    @classmethod
    def from_csv(cls, path):
        meta = {}
        rows = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.startswith("#"):
                    for tok in line[1:].split():
                        k, v = tok.split("=")
                        meta[k] = v
                    continue
                if line.startswith("x0"):
                    continue
                rows.append([float(v) for v in line.strip().split(",")])
        arr = np.array(rows)
        shape = tuple(int(s) for s in meta["shape"].split("x"))
        d = int(meta["d"])
        return cls(arr[:, d].reshape(shape), arr[0, :d], float(meta["h"]), bool(int(meta["periodic"])),
                   bool(int(meta["zero_boundary"])))


# ---------------------------------------------------------------------------
# semigroup

def _fourier_multiplier(shape, h, abar, t):
    ks = [2 * np.pi * np.fft.fftfreq(n, d=h) for n in shape]
    K = np.meshgrid(*ks, indexing="ij")
    quad = np.zeros(shape)
    for i in range(len(shape)):
        for j in range(len(shape)):
            quad += abar[i, j] * K[i] * K[j]
    return np.exp(-0.5 * t * quad)


def apply_homog_semigroup(g: GridFunction, t, hk: HeatKernel, tol=1e-8) -> GridFunction:
    """Psi_t * g: exact Fourier multiplier on the torus; zero-extension with padding on boxes."""
    if t < 0:
        raise ValidationError("time must be nonnegative")
    if t == 0:
        return g.with_values(g.values.copy(), truncation=0.0)
    if g.periodic:
        F = np.fft.fftn(g.values)
        out = np.real(np.fft.ifftn(F * _fourier_multiplier(g.values.shape, g.h, hk.abar, t)))
        return g.with_values(out, truncation=0.0)
    sd = math.sqrt(np.linalg.eigvalsh(hk.abar).max() * t)
    # pad until the Gaussian tail past the pad is below tol
    pad_len = sd * math.sqrt(2) * 8.0
    while erfc(pad_len / (sd * math.sqrt(2))) > tol:
        pad_len *= 1.5
    npad = int(math.ceil(pad_len / g.h))
    padded = np.pad(g.values, [(npad, npad)] * g.d)
    # extra zero margin so the periodic wrap of the padded field is harmless
    wide = np.pad(padded, [(0, npad)] * g.d)
    F = np.fft.fftn(wide)
    conv = np.real(np.fft.ifftn(F * _fourier_multiplier(wide.shape, g.h, hk.abar, t)))
    sl = tuple(slice(npad, npad + s) for s in g.values.shape)
    truncation = float(erfc(npad * g.h / (sd * math.sqrt(2))))
    if truncation > tol:
        raise TruncationError(f"truncated heat-kernel mass {truncation:.2e} exceeds {tol:.1e}")
    return g.with_values(conv[sl], truncation=truncation)


def gradient_l2(g: GridFunction):
    """Discrete L^2 norm of the gradient (forward differences)."""
    tot = 0.0
    for ax in range(g.d):
        if g.periodic:
            dv = (np.roll(g.values, -1, ax) - g.values) / g.h
        else:
            dv = np.diff(g.values, axis=ax) / g.h
        tot += np.sum(dv ** 2) * g.h ** g.d
    return math.sqrt(tot)


def gradient_bound_constant(g: GridFunction, t, hk: HeatKernel):
    """sqrt(t) ||grad(Psi_t * g)|| / ||g||, the measured constant of the classical gradient bound."""
    gt = apply_homog_semigroup(g, t, hk)
    return math.sqrt(t) * gradient_l2(gt) / g.l2_norm()


# ---------------------------------------------------------------------------
# Dirichlet problem

def _second_diff(n, h):
    m = n - 1
    return sparse.diags([np.ones(m - 1), -2 * np.ones(m), np.ones(m - 1)], [-1, 0, 1]) / h ** 2


def _first_diff(n, h):
    m = n - 1
    return sparse.diags([-np.ones(m - 1), np.ones(m - 1)], [-1, 1]) / (2 * h)


def solve_homog_dirichlet(f: GridFunction, abar, rtol=1e-8) -> GridFunction:
    """Second-order finite differences for -div(abar grad u) = f in the box, u = 0 on the boundary."""
    if f.periodic:
        raise ValidationError("the Dirichlet solver needs a box grid")
    a = np.atleast_2d(np.asarray(abar, dtype=float))
    d, n, h = f.d, f.n, f.h
    inner = tuple(slice(1, -1) for _ in range(d))
    rhs = f.values[inner].ravel()
    if d == 1:
        A = -a[0, 0] * _second_diff(n, h)
    else:
        I = sparse.identity(n - 1)
        Dxx, Dx = _second_diff(n, h), _first_diff(n, h)
        A = -(a[0, 0] * sparse.kron(Dxx, I) + a[1, 1] * sparse.kron(I, Dxx) + 2 * a[0, 1] * sparse.kron(Dx, Dx))
    A = A.tocsc()
    u = spsolve(A, rhs) if rhs.size else rhs
    res = np.linalg.norm(A @ u - rhs)
    src = np.linalg.norm(rhs)
    if src > 0 and res > rtol * src:
        raise ArithmeticError(f"Dirichlet solve residual {res / src:.2e} above tolerance")
    vals = np.zeros_like(f.values)
    vals[inner] = u.reshape((n - 1,) * d)
    out = GridFunction(vals, f.lower, h, False, True)
    out.meta.update({"residual": float(res / src) if src > 0 else 0.0,
                     "h1": gradient_l2(out), "h2": hessian_l2(out), "l2": out.l2_norm()})
    return out


def hessian_l2(g: GridFunction):
    """Discrete L^2 norm of all second derivatives."""
    v, h = g.values, g.h
    tot = 0.0
    for i in range(g.d):
        for j in range(g.d):
            if i == j:
                dd = np.diff(v, 2, axis=i) / h ** 2
            else:
                dd = np.diff(np.diff(v, axis=i), axis=j) / h ** 2
            tot += np.sum(dd ** 2) * h ** g.d
    return math.sqrt(tot)


# ---------------------------------------------------------------------------
# lifts and predictions

class LiftedStatistic(Functional):
    """U(mu) = int g dmu - rho int g dm, with g the multilinear interpolant of a grid."""

    def __init__(self, g: GridFunction, rho):
        self.g = g
        self.rho = float(rho)
        self.domain = g.domain
        self.mean = self.rho * g.integral()

    @property
    def zero_boundary(self):
        return self.g.zero_boundary

    def value(self, mu):
        if mu.n == 0:
            return -self.mean
        return float(np.sum(self.g(mu.points))) - self.mean

    def gradient(self, mu):
        if mu.n == 0:
            return np.zeros((0, self.g.d))
        return self.g.gradient(mu.points)


def lift_linear_statistic(g: GridFunction, rho, require_centered=False, atol=1e-10) -> LiftedStatistic:
    if require_centered and abs(g.integral()) > atol * max(1.0, g.l2_norm()):
        raise CenteringError("source must integrate to zero")
    return LiftedStatistic(g, rho)


def homogenized_lift(f: GridFunction, abar, rho):
    """Solve the homogenized Dirichlet problem for a mean-zero source and lift the solution."""
    if abs(f.integral()) > 1e-10 * max(1.0, f.l2_norm()):
        raise CenteringError("source must integrate to zero")
    ubar = solve_homog_dirichlet(f, abar)
    return ubar, lift_linear_statistic(ubar, rho)


@dataclass
class Prediction:
    dt: float
    value: float
    quad_error: float


def two_point_prediction(f: GridFunction, g: GridFunction, dt, hk: HeatKernel, rho) -> Prediction:
    """rho int int f(x) Psi_dt(x - y) g(y) dx dy (rho int f g for dt = 0)."""
    if dt < 0:
        raise ValidationError("t - s must be nonnegative")
    def _value(ff, gg):
        if dt == 0:
            return rho * ff.inner(gg)
        return rho * ff.inner(apply_homog_semigroup(gg, dt, hk))
    val = _value(f, g)
    # quadrature error from a half-resolution recomputation
    err = float("nan")
    if all(s % 2 == (0 if f.periodic else 1) for s in f.values.shape) and f.values.shape[0] > 8:
        sl = tuple(slice(None, None, 2) for _ in range(f.d))
        fc = GridFunction(f.values[sl], f.lower, 2 * f.h, f.periodic)
        gc = GridFunction(g.values[sl], g.lower, 2 * g.h, g.periodic)
        try:
            err = abs(_value(fc, gc) - val) / 3.0
        except TruncationError:
            pass
    return Prediction(float(dt), float(val), err)


# ---------------------------------------------------------------------------
# two-scale expansion

def cell_average_gradient(u: GridFunction, center, side):
    """Exact average of grad u over the cube center + (-side/2, side/2)^d."""
    c = np.asarray(center, dtype=float).reshape(u.d)
    lo, hi = c - side / 2, c + side / 2
    out = np.zeros(u.d)
    if u.d == 1:
        out[0] = (u(hi[None])[0] - u(lo[None])[0]) / side
        return out
    for k in range(u.d):
        o = 1 - k
        ax = u.axes()[o]
        pts = np.unique(np.concatenate([[lo[o], hi[o]], ax[(ax > lo[o]) & (ax < hi[o])]]))
        P_hi = np.zeros((len(pts), 2))
        P_lo = np.zeros((len(pts), 2))
        P_hi[:, k], P_lo[:, k] = hi[k], lo[k]
        P_hi[:, o] = P_lo[:, o] = pts
        diff = u(P_hi) - u(P_lo)
        out[k] = trapezoid(diff, pts) / side ** 2
    return out


class TwoScaleExpansion(Functional):
    """W = U + sum_i sum_z (d_i u)_{z + cube(n)} phi_{e_i}(tau_{-z} mu)."""

    def __init__(self, lift: LiftedStatistic, n, centers, slopes, correctors):
        self.lift = lift
        self.n = n
        self.centers = np.asarray(centers, dtype=float)
        self.slopes = np.asarray(slopes, dtype=float)
        self.correctors = correctors
        self.domain = lift.domain

    @property
    def zero_boundary(self):
        return self.lift.zero_boundary and all(c.zero_boundary for c in self.correctors.values())

    def _cells(self, mu):
        for z, s in zip(self.centers, self.slopes):
            yield z, s, translate_restrict(mu, z, None)

    def value(self, mu):
        v = self.lift.value(mu)
        for z, s, loc in self._cells(mu):
            for i, phi in self.correctors.items():
                if s[i] != 0.0:
                    v += s[i] * phi.value(loc)
        return float(v)

    def gradient(self, mu):
        g = self.lift.gradient(mu).copy()
        for z, s, loc in self._cells(mu):
            for i, phi in self.correctors.items():
                if s[i] != 0.0:
                    g += s[i] * phi.gradient(loc)
        return g

    def corrector_part(self, mu):
        return self.value(mu) - self.lift.value(mu)


def build_two_scale(u: GridFunction, rho, n, correctors: Dict[int, Functional], m=None) -> TwoScaleExpansion:
    """Assemble W from the lifted u and cell correctors phi_{e_i} living on cube(n) at the origin."""
    d = u.d
    for i in range(d):
        if i not in correctors:
            raise ValidationError(f"missing cell corrector for direction {i}")
    cell = 3.0 ** n
    if u.periodic:
        k = u.side / cell
        if abs(k - round(k)) > 1e-9:
            raise ValidationError("3^n must divide the torus side")
        k = int(round(k))
        ticks = u.lower[0] + cell * (np.arange(k) + 0.5)
        mesh = np.meshgrid(*([ticks] * d), indexing="ij")
        centers = np.stack([g.ravel() for g in mesh], axis=1)
    else:
        if m is None:
            m = int(round(math.log(u.side, 3)))
        if abs(3.0 ** m - u.side) > 1e-9:
            raise ValidationError("box side must be 3^m")
        if n > m:
            raise ValidationError("mesoscale n must not exceed m")
        centers = mesoscopic_grid(m, n, d) + (u.lower + u.side / 2)
    slopes = np.array([cell_average_gradient(u, z, cell) for z in centers])
    return TwoScaleExpansion(lift_linear_statistic(u, rho), n, centers, slopes, correctors)


# ---------------------------------------------------------------------------
# parameter choices

@dataclass(frozen=True)
class ParabolicParameters:
    t: float
    n: int
    tau: float
    beta: Optional[float]


def parabolic_parameters(t, alpha_hat=None) -> ParabolicParameters:
    """tau = t^{3/4}, 3^n ~ t^{1/16}, and the rate exponent beta = min(alpha, 1)/16."""
    if not t > 0:
        raise ValidationError("time must be positive")
    n = max(0, int(round(math.log(t, 3) / 16)))
    beta = None if alpha_hat is None else min(float(alpha_hat), 1.0) / 16
    return ParabolicParameters(float(t), n, t ** 0.75, beta)


def elliptic_mesoscale(m, alpha_hat):
    """n = floor(m / (1 + alpha))."""
    if alpha_hat is None or not np.isfinite(alpha_hat) or alpha_hat < 0:
        raise ValidationError("a finite nonnegative alpha is required")
    return int(math.floor(m / (1 + alpha_hat) + 1e-12))
