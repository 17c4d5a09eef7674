"""Random-scan Metropolis sweeps with configuration-dependent Gaussian proposals.

All randomness is drawn by the caller so that both backends consume identical
numbers: ``order`` (sweeps, n) visiting order, ``z`` (sweeps, n, d) standard
normals and ``u`` (sweeps, n) uniforms for the accept step.
"""
import math

import numpy as np

from .._accel import njit, use_numba
from .coefficients import a_point_nb, _field_np


@njit
def _chol2(a, out):
    d = a.shape[0]
    if d == 1:
        out[0, 0] = math.sqrt(a[0, 0])
        return
    l00 = math.sqrt(a[0, 0])
    out[0, 0] = l00
    out[0, 1] = 0.0
    out[1, 0] = a[1, 0] / l00
    out[1, 1] = math.sqrt(a[1, 1] - out[1, 0] * out[1, 0])


@njit
def _logq(a, s, dt):
    # log N(s; 0, a dt) up to the constant shared by both directions
    d = a.shape[0]
    if d == 1:
        det = a[0, 0]
        quad = s[0] * s[0] / a[0, 0]
    else:
        det = a[0, 0] * a[1, 1] - a[0, 1] * a[1, 0]
        quad = (a[1, 1] * s[0] * s[0] - 2.0 * a[0, 1] * s[0] * s[1] + a[0, 0] * s[1] * s[1]) / det
    return -0.5 * math.log(det) - 0.5 * quad / dt


@njit
def _sweeps_nb(pts, L, kind, params, dt, metropolis, order, z, u):
    n, d = pts.shape
    ax = np.empty((d, d))
    ay = np.empty((d, d))
    ch = np.empty((d, d))
    s = np.empty(d)
    y = np.empty(d)
    acc = 0
    for sw in range(order.shape[0]):
        for k in range(n):
            i = order[sw, k]
            a_point_nb(pts, n, pts[i], i, True, L, kind, params, ax)
            _chol2(ax, ch)
            sdt = math.sqrt(dt)
            for r in range(d):
                v = 0.0
                for c in range(r + 1):
                    v += ch[r, c] * z[sw, k, c]
                s[r] = sdt * v
                y[r] = pts[i, r] + s[r]
                y[r] -= L * math.floor(y[r] / L + 0.5)
            ok = True
            if metropolis and kind != 0:
                a_point_nb(pts, n, y, i, True, L, kind, params, ay)
                lr = _logq(ay, s, dt) - _logq(ax, s, dt)
                ok = lr >= 0.0 or u[sw, k] < math.exp(lr)
            if ok:
                acc += 1
                for r in range(d):
                    pts[i, r] = y[r]
    return acc


def _a_np(pts, x, i, L, kind, params):
    return _field_np(pts, x[None, :], np.array([i]), True, L, kind, params)[0]


def _logq_np(a, s, dt):
    return -0.5 * math.log(np.linalg.det(a)) - 0.5 * float(s @ np.linalg.solve(a, s)) / dt


def _sweeps_np(pts, L, kind, params, dt, metropolis, order, z, u):
    n, d = pts.shape
    acc = 0
    sdt = math.sqrt(dt)
    for sw in range(order.shape[0]):
        for k in range(n):
            i = order[sw, k]
            ax = _a_np(pts, pts[i], i, L, kind, params)
            s = sdt * (np.linalg.cholesky(ax) @ z[sw, k])
            y = pts[i] + s
            y = y - L * np.floor(y / L + 0.5)
            ok = True
            if metropolis and kind != 0:
                ay = _a_np(pts, y, i, L, kind, params)
                lr = _logq_np(ay, s, dt) - _logq_np(ax, s, dt)
                ok = lr >= 0.0 or u[sw, k] < math.exp(lr)
            if ok:
                acc += 1
                pts[i] = y
    return acc


def run_sweeps(pts, L, kind, params, dt, metropolis, order, z, u):
    """Advance ``pts`` in place through ``len(order)`` sweeps; returns accepted moves."""
    args = (np.ascontiguousarray(order, dtype=np.int64), np.ascontiguousarray(z, dtype=float),
            np.ascontiguousarray(u, dtype=float))
    params = np.asarray(params, dtype=float)
    if use_numba():
        return int(_sweeps_nb(pts, float(L), int(kind), params, float(dt), bool(metropolis), *args))
    return int(_sweeps_np(pts, float(L), int(kind), params, float(dt), bool(metropolis), *args))
