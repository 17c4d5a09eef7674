"""Evaluation of the catalog coefficient fields at query points.

Model encoding shared by all kernels: ``kind`` is 0 identity, 1 count-indicator,
2 smooth-count, 3 anisotropic-count; ``params = [Lambda, threshold, width]``.
Periodic wrapping is applied when ``L > 0``.
"""
import math

import numpy as np

from .._accel import njit, use_numba


@njit
def _smoothstep(u):
    if u <= 0.0:
        return 0.0
    if u >= 1.0:
        return 1.0
    return u * u * (3.0 - 2.0 * u)


@njit
def _eta(r, w):
    # soft count weight: 1 inside B_{1-w}, 0 outside B_1
    if r >= 1.0:
        return 0.0
    if r <= 1.0 - w:
        return 1.0
    return _smoothstep((1.0 - r) / w)


@njit
def a_point_nb(pts, n, x, skip, add_center, L, kind, params, out):
    """Fill ``out`` with a(mu, x), mu = pts[:n] minus index ``skip``.

    When ``add_center`` is set an extra atom at x itself is counted.
    """
    d = pts.shape[1]
    for r in range(d):
        for c in range(d):
            out[r, c] = 0.0
    if kind == 0:
        for r in range(d):
            out[r, r] = 1.0
        return
    lam = params[0]
    thr = params[1]
    w = params[2]
    cnt = 1.0 if add_center else 0.0
    plus = np.zeros(d)
    minus = np.zeros(d)
    disp = np.empty(d)
    for j in range(n):
        if j == skip:
            continue
        r2 = 0.0
        for k in range(d):
            s = pts[j, k] - x[k]
            if L > 0.0:
                s -= L * math.floor(s / L + 0.5)
            disp[k] = s
            r2 += s * s
        if r2 >= 1.0:
            continue
        if kind == 1:
            cnt += 1.0
        elif kind == 2:
            cnt += _eta(math.sqrt(r2), w)
        else:
            for k in range(d):
                if disp[k] > 0.0:
                    plus[k] = 1.0
                elif disp[k] < 0.0:
                    minus[k] = 1.0
    if kind == 1:
        val = lam if cnt >= thr else 1.0
        for r in range(d):
            out[r, r] = val
    elif kind == 2:
        val = 1.0 + (lam - 1.0) * _smoothstep(cnt - (thr - 1.0))
        for r in range(d):
            out[r, r] = val
    else:
        for r in range(d):
            out[r, r] = 1.0 + (lam - 1.0) * plus[r] * minus[r]


@njit
def _field_nb(pts, X, skip, add_center, L, kind, params):
    nq = X.shape[0]
    d = pts.shape[1]
    out = np.empty((nq, d, d))
    for q in range(nq):
        a_point_nb(pts, pts.shape[0], X[q], skip[q], add_center, L, kind, params, out[q])
    return out


def _field_np(pts, X, skip, add_center, L, kind, params):
    nq, d = X.shape
    out = np.zeros((nq, d, d))
    idx = np.arange(d)
    if kind == 0 or nq == 0:
        out[:, idx, idx] = 1.0
        return out
    lam, thr, w = params
    disp = pts[None, :, :] - X[:, None, :]
    if L > 0:
        disp -= L * np.floor(disp / L + 0.5)
    r2 = np.sum(disp**2, axis=2)
    near = r2 < 1.0
    if pts.shape[0]:
        near[np.arange(nq)[skip >= 0], skip[skip >= 0]] = False
    base = 1.0 if add_center else 0.0
    if kind == 1:
        cnt = base + near.sum(axis=1)
        val = np.where(cnt >= thr, lam, 1.0)
        out[:, idx, idx] = val[:, None]
    elif kind == 2:
        r = np.sqrt(r2)
        u = np.clip((1.0 - r) / w, 0.0, 1.0)
        eta = np.where(r <= 1.0 - w, 1.0, u * u * (3 - 2 * u))
        cnt = base + np.sum(np.where(near, eta, 0.0), axis=1)
        u = np.clip(cnt - (thr - 1.0), 0.0, 1.0)
        val = 1.0 + (lam - 1.0) * u * u * (3 - 2 * u)
        out[:, idx, idx] = val[:, None]
    else:
        nd = near[:, :, None]
        plus = np.any(nd & (disp > 0), axis=1)
        minus = np.any(nd & (disp < 0), axis=1)
        out[:, idx, idx] = 1.0 + (lam - 1.0) * (plus & minus)
    return out


def coefficient_field(pts, X, kind, params, L=0.0, skip=None, add_center=False):
    """Matrices a(mu, x) for every row x of ``X``; returns shape (nq, d, d)."""
    pts = np.ascontiguousarray(pts, dtype=float)
    X = np.ascontiguousarray(X, dtype=float)
    if skip is None:
        skip = np.full(X.shape[0], -1, dtype=np.int64)
    skip = np.ascontiguousarray(skip, dtype=np.int64)
    params = np.asarray(params, dtype=float)
    if use_numba():
        return _field_nb(pts, X, skip, bool(add_center), float(L), int(kind), params)
    return _field_np(pts, X, skip, bool(add_center), float(L), int(kind), params)


def particle_field(pts, idx, kind, params, L=0.0):
    """a(mu, X_i) at particles ``idx`` of ``pts`` (the particle counts as the centre)."""
    pts = np.asarray(pts, dtype=float)
    idx = np.asarray(idx, dtype=np.int64)
    return coefficient_field(pts, pts[idx], kind, params, L, skip=idx, add_center=True)
