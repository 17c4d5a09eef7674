"""Sector-grid representation and brute-force cell-problem oracle (d = 1).

A functional of mu restricted to U = (-L/2, L/2) with at most K particles is a
family of grid functions w_k on U^k. Zero-boundary functionals satisfy the
compatibility rule: w_k equals w_{k-1} of the remaining coordinates as soon as
one coordinate reaches the boundary (w_0 = 0). The oracle minimizes the finite
difference discretization of the cell energy directly over these tables, under
the Poisson law conditioned on mu(U) <= K, with the exterior averaged out
exactly.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import sparse, stats
from scipy.sparse.linalg import cg, spsolve

from .core import CoefficientModel, Configuration, Domain, ValidationError, truncated_poisson_pmf
from .functionals import Functional, SectorOverflow


class SectorGridFunctional(Functional):
    """Multilinear interpolation of the sector tables plus an affine part p * sum x."""

    def __init__(self, U: Domain, h, tables, affine=0.0, compatible=True):
        if U.dim != 1 or U.periodic:
            raise ValidationError("sector grids are one-dimensional boxes")
        n = U.side / h
        if abs(n - round(n)) > 1e-9:
            raise ValidationError("grid spacing must divide the side")
        self.U = self.domain = U
        self.h = float(h)
        self.n = int(round(n))
        self.tables = [np.asarray(t, dtype=float) for t in tables]
        for k, t in enumerate(self.tables, start=1):
            if t.shape != (self.n + 1,) * k:
                raise ValidationError(f"sector {k} table has shape {t.shape}")
        self.K = len(self.tables)
        self.affine = float(affine)
        self.compatible = compatible

    @property
    def zero_boundary(self):
        return self.compatible and self.affine == 0.0

    def _locate(self, x):
        u = (x - self.U.lower[0]) / self.h
        i = np.clip(np.floor(u).astype(int), 0, self.n - 1)
        return i, u - i

    def _interp(self, x, deriv=None):
        k = len(x)
        if k == 0:
            return 0.0
        if k > self.K:
            raise SectorOverflow(f"{k} particles in U, table holds {self.K}")
        T = self.tables[k - 1]
        i, t = self._locate(np.asarray(x, dtype=float))
        out = 0.0
        for corner in range(2 ** k):
            bits = [(corner >> c) & 1 for c in range(k)]
            w = 1.0
            for c in range(k):
                if c == deriv:
                    w *= (1.0 if bits[c] else -1.0) / self.h
                else:
                    w *= t[c] if bits[c] else 1.0 - t[c]
            out += w * T[tuple(i[c] + bits[c] for c in range(k))]
        return out

    def value(self, mu):
        ins = self.U.contains(mu.points) if mu.n else np.zeros(0, dtype=bool)
        x = mu.points[ins, 0]
        return float(self._interp(x) + self.affine * np.sum(x))

    def gradient(self, mu):
        ins = self.U.contains(mu.points) if mu.n else np.zeros(0, dtype=bool)
        x = mu.points[ins, 0]
        g = np.zeros((mu.n, 1))
        idx = np.nonzero(ins)[0]
        for c in range(len(x)):
            g[idx[c], 0] = self._interp(x, deriv=c) + self.affine
        return g

    @classmethod
    def from_functional(cls, f: Functional, U: Domain, K, h):
        """Tabulate f at all node tuples; the affine part of a FeatureFunctional is kept exact."""
        n = int(round(U.side / h))
        nodes = U.lower[0] + h * np.arange(n + 1)
        affine = getattr(f, "affine", None)
        a = 0.0 if affine is None else float(np.ravel(affine)[0])
        tables = []
        for k in range(1, K + 1):
            T = np.empty((n + 1,) * k)
            for J in np.ndindex(*T.shape):
                pts = nodes[list(J)].reshape(-1, 1)
                inside = U.contains(pts)
                mu = Configuration(pts, None)
                T[J] = f.value(mu) - a * np.sum(pts[inside])
            tables.append(T)
        return cls(U, h, tables, a)

    def dump(self, path):
        """Flat float64 binary plus a JSON sidecar."""
        path = Path(path)
        np.concatenate([t.ravel() for t in self.tables]).astype("<f8").tofile(path)
        meta = {"k": self.K, "h": self.h, "U": {"side": self.U.side, "center": list(self.U.center)},
                "affine": self.affine, "compatible": self.compatible,
                "shapes": [list(t.shape) for t in self.tables]}
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=1))

    @classmethod
    def load(cls, path):
        path = Path(path)
        meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        flat = np.fromfile(path, dtype="<f8")
        tables, pos = [], 0
        for shp in meta["shapes"]:
            size = int(np.prod(shp))
            tables.append(flat[pos:pos + size].reshape(shp))
            pos += size
        U = Domain(1, "box", meta["U"]["side"], tuple(meta["U"]["center"]))
        return cls(U, meta["h"], tables, meta["affine"], meta["compatible"])


# ---------------------------------------------------------------------------
# exterior-averaged coefficient

def averaged_coefficient(model: CoefficientModel, rho, x, others, L):
    """E[a(mu, x)] over the exterior Poisson process, given interior points ``others``.

    Supported for the identity and count-indicator models in d = 1.
    """
    x = np.asarray(x, dtype=float)
    if model.kind == "identity" or model.Lambda == 1.0:
        return np.ones_like(x)
    if model.kind != "count-indicator":
        raise ValidationError("the sector oracle supports identity and count-indicator models")
    others = np.asarray(others, dtype=float).reshape(x.shape[0], -1)
    c_int = 1 + np.sum(np.abs(others - x[:, None]) < 1.0, axis=1)
    outside = np.maximum(0.0, x + 1 - L / 2) + np.maximum(0.0, -L / 2 - (x - 1))
    need = model.threshold - c_int
    # P(C_ext >= need), C_ext ~ Poisson(rho * outside)
    prob = np.where(need <= 0, 1.0, stats.poisson.sf(np.ceil(need) - 1, rho * outside))
    return 1.0 + (model.Lambda - 1.0) * prob


def _edges(k, n, h, L, model, rho):
    """Edges of the k-dimensional node grid with quadrature weight and coefficient."""
    shape = (n + 1,) * k
    nodes = -L / 2 + h * np.arange(n + 1)
    tw = np.full(n + 1, h)
    tw[[0, -1]] = h / 2
    out = []
    for c in range(k):
        lo_shape = list(shape)
        lo_shape[c] = n
        J = np.array(np.unravel_index(np.arange(int(np.prod(lo_shape))), lo_shape))
        Jhi = J.copy()
        Jhi[c] += 1
        w = np.full(J.shape[1], h)
        for o in range(k):
            if o != c:
                w *= tw[J[o]]
        w /= L ** k
        x = nodes[J[c]] + h / 2
        others = np.stack([nodes[J[o]] for o in range(k) if o != c], axis=1) if k > 1 else np.zeros((len(x), 0))
        a = averaged_coefficient(model, rho, x, others, L)
        out.append((np.ravel_multi_index(J, shape), np.ravel_multi_index(Jhi, shape), w, a))
    lo = np.concatenate([e[0] for e in out])
    hi = np.concatenate([e[1] for e in out])
    return lo, hi, np.concatenate([e[2] for e in out]), np.concatenate([e[3] for e in out])


def _solve_spd(A, b):
    if A.shape[0] <= 60_000:
        return spsolve(A.tocsc(), b)
    M = sparse.diags(1.0 / A.diagonal())
    x, info = cg(A.tocsr(), b, rtol=1e-12, atol=0.0, M=M, maxiter=20_000)
    if info != 0:
        raise RuntimeError("sector oracle: conjugate gradient did not converge")
    return x


def _compat_map(k, n, offsets):
    """Map every node of sector k to an unknown (interior node of some sector) or -1."""
    shape = (n + 1,) * k
    J = np.array(np.unravel_index(np.arange((n + 1) ** k), shape))
    interior = (J >= 1) & (J <= n - 1)
    out = -np.ones(J.shape[1], dtype=np.int64)
    nint = interior.sum(axis=0)
    for j in range(1, k + 1):
        sel = np.nonzero(nint == j)[0]
        if len(sel) == 0:
            continue
        sub = J[:, sel]
        msk = interior[:, sel]
        # interior coordinates in their original order
        coords = sub.T[msk.T].reshape(len(sel), j).T - 1
        out[sel] = offsets[j] + np.ravel_multi_index(coords, (n - 1,) * j)
    return out


@dataclass
class SectorOracleResult:
    value: float
    functional: SectorGridFunctional
    weights: np.ndarray
    sector_values: np.ndarray
    h: float
    K: int
    mode: str


def solve_sector_cell(model: CoefficientModel, rho, side, K=2, h=1 / 64, p=1.0, mode="nu"):
    """Brute-force d = 1 cell problem for the Poisson law on (-side/2, side/2) conditioned on mu(U) <= K.

    mode "nu": minimize E[(rho|U|)^{-1} int 1/2 a (p + dw)^2] over compatible zero-boundary tables.
    mode "nu_star": maximize E[(rho|U|)^{-1} int (-1/2 a du^2 + p du)] over free tables.
    Returns the normalized value and the optimizer as a SectorGridFunctional.
    """
    L = float(side)
    n = int(round(L / h))
    if abs(n * h - L) > 1e-9:
        raise ValidationError("h must divide the side")
    U = Domain(1, "box", L)
    pi = truncated_poisson_pmf(rho * L, K)
    norm = rho * L
    edges = [_edges(k, n, h, L, model, rho) for k in range(1, K + 1)]
    if mode == "nu":
        offsets = np.zeros(K + 2, dtype=np.int64)
        for j in range(1, K + 1):
            offsets[j + 1] = offsets[j] + (n - 1) ** j
        nunk = int(offsets[K + 1])
        rows, cols, vals, wa, = [], [], [], []
        e0 = 0
        maps = []
        for k in range(1, K + 1):
            lo, hi, w, a = edges[k - 1]
            mp = _compat_map(k, n, offsets)
            maps.append(mp)
            ne = len(lo)
            r = np.arange(ne) + e0
            for idx, sgn in ((hi, 1.0 / h), (lo, -1.0 / h)):
                u = mp[idx]
                ok = u >= 0
                rows.append(r[ok])
                cols.append(u[ok])
                vals.append(np.full(ok.sum(), sgn))
            wa.append(pi[k] * w * a / norm)
            e0 += ne
        D = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                              shape=(e0, nunk))
        c = np.concatenate(wa)
        A = (D.T @ sparse.diags(c) @ D).tocsc()
        z = _solve_spd(A, -p * (D.T @ c))
        grad = p + D @ z
        per_edge = 0.5 * c * grad ** 2
        tables = [np.where(mp >= 0, z[np.maximum(mp, 0)], 0.0).reshape((n + 1,) * k)
                  for k, mp in enumerate(maps, start=1)]
        affine = p
        compatible = True
    elif mode == "nu_star":
        tables, per_edge_parts = [], []
        for k in range(1, K + 1):
            lo, hi, w, a = edges[k - 1]
            nn = (n + 1) ** k
            ne = len(lo)
            D = sparse.csr_matrix((np.concatenate([np.full(ne, 1 / h), np.full(ne, -1 / h)]),
                                   (np.concatenate([np.arange(ne)] * 2), np.concatenate([hi, lo]))),
                                  shape=(ne, nn))
            c = pi[k] * w * a / norm
            A = (D.T @ sparse.diags(c) @ D).tocsc()
            rhs = p * (D.T @ (pi[k] * w / norm))
            # pin node 0: the maximizer is defined up to a constant per sector
            u = np.zeros(nn)
            u[1:] = _solve_spd(A[1:, 1:], rhs[1:])
            du = D @ u
            per_edge_parts.append((-0.5 * c * du ** 2) + p * (pi[k] * w / norm) * du)
            tables.append(u.reshape((n + 1,) * k))
        per_edge = np.concatenate(per_edge_parts)
        affine = 0.0
        compatible = False
    else:
        raise ValidationError(f"unknown mode {mode!r}")
    counts = np.cumsum([0] + [len(e[0]) for e in edges])
    sector_values = np.array([per_edge[counts[i]:counts[i + 1]].sum() for i in range(K)])
    value = float(per_edge.sum())
    f = SectorGridFunctional(U, h, tables, affine, compatible)
    return SectorOracleResult(value, f, pi, sector_values, h, K, mode)


def sector_pairing(v: SectorGridFunctional, model, rho, p=1.0, normalize=False):
    """E[int_U -1/2 p a dv dmu] under the truncated law, by the oracle's edge quadrature."""
    L, n, h = v.U.side, v.n, v.h
    pi = truncated_poisson_pmf(rho * L, v.K)
    total = 0.0
    for k in range(1, v.K + 1):
        lo, hi, w, a = _edges(k, n, h, L, model, rho)
        T = v.tables[k - 1].ravel()
        dv = (T[hi] - T[lo]) / h + v.affine
        total += pi[k] * np.sum(w * (-0.5 * p * a * dv))
    return total / (rho * L) if normalize else total
