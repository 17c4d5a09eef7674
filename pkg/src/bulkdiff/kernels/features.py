"""Feature values and particle gradients for the spline/pair feature basis.

A basis over a cube U is described by flat integer tables:

* one-body features  sum_{x in U} B_b(x)
* pair features      sum_{x != y in U} B_b(x) kappa_t(y - x) chi(y)

where B_b is a tensor-product cardinal B-spline of degree ``q`` on a grid of
spacing ``hb`` starting at ``lo``, kappa_t is a radial spline (even) or a
radial spline times s_k/|s| (odd), and chi is either the interior partition
function of U (vanishing on the boundary) or 1. ``col_one[b]``, ``col_pc[b, t]``
and ``col_p1[b, t]`` give the feature column, or -1 when the feature is absent.
Kernel type t encodes (radial index l, component c) as t = l*(d+1) + c + 1,
with c = -1 for even kernels.
"""
import math

import numpy as np

from .._accel import njit, use_numba


@njit
def _card(q, t):
    # cardinal B-spline of degree q on [0, q+1] and its derivative
    if t < 0.0 or t >= q + 1.0:
        return 0.0, 0.0
    if q == 1:
        if t < 1.0:
            return t, 1.0
        return 2.0 - t, -1.0
    if t < 1.0:
        return 0.5 * t * t, t
    if t < 2.0:
        return 0.5 * (-2.0 * t * t + 6.0 * t - 3.0), -2.0 * t + 3.0
    return 0.5 * (3.0 - t) ** 2, -(3.0 - t)


def _card_np(q, t):
    v = np.zeros_like(t)
    dv = np.zeros_like(t)
    if q == 1:
        a = (t >= 0) & (t < 1)
        b = (t >= 1) & (t < 2)
        v[a] = t[a]
        dv[a] = 1.0
        v[b] = 2.0 - t[b]
        dv[b] = -1.0
        return v, dv
    a = (t >= 0) & (t < 1)
    b = (t >= 1) & (t < 2)
    c = (t >= 2) & (t < 3)
    v[a] = 0.5 * t[a] ** 2
    dv[a] = t[a]
    v[b] = 0.5 * (-2 * t[b] ** 2 + 6 * t[b] - 3)
    dv[b] = -2 * t[b] + 3
    v[c] = 0.5 * (3 - t[c]) ** 2
    dv[c] = -(3 - t[c])
    return v, dv


@njit
def _features_nb(pts, lo, hb, ncell, q, col_one, col_pc, col_p1, rq, rdelta, nrl, nf, want_grad):
    ni, d = pts.shape
    nspl = ncell + q
    nb = (q + 1) ** d
    rmax = nrl * rdelta
    bidx = np.empty((ni, nb), dtype=np.int64)
    bval = np.empty((ni, nb))
    bgrad = np.empty((ni, nb, d))
    chi = np.empty(ni)
    chig = np.empty((ni, d))
    jj = np.empty((d, q + 1), dtype=np.int64)
    vv = np.empty((d, q + 1))
    dd = np.empty((d, q + 1))
    S = np.empty(d)
    dS = np.empty(d)
    for a in range(ni):
        for k in range(d):
            u = (pts[a, k] - lo[k]) / hb
            base = int(math.floor(u))
            if base > ncell - 1:
                base = ncell - 1
            S[k] = 0.0
            dS[k] = 0.0
            for c in range(q + 1):
                j = base - q + c
                v, dv = _card(q, u - j)
                jj[k, c] = j + q
                vv[k, c] = v
                dd[k, c] = dv / hb
                if j >= 0 and j <= ncell - q - 1:
                    S[k] += v
                    dS[k] += dv / hb
        chi[a] = 1.0
        for k in range(d):
            chi[a] *= S[k]
        for k in range(d):
            g = dS[k]
            for l in range(d):
                if l != k:
                    g *= S[l]
            chig[a, k] = g
        for combo in range(nb):
            rem = combo
            flat = 0
            mult = 1
            val = 1.0
            for k in range(d):
                c = rem % (q + 1)
                rem //= q + 1
                flat += jj[k, c] * mult
                mult *= nspl
                val *= vv[k, c]
            bidx[a, combo] = flat
            bval[a, combo] = val
            for k in range(d):
                rem = combo
                g = 1.0
                for l in range(d):
                    c = rem % (q + 1)
                    rem //= q + 1
                    g *= dd[l, c] if l == k else vv[l, c]
                bgrad[a, combo, k] = g
    vals = np.zeros(nf)
    grads = np.zeros((ni, d, nf)) if want_grad else np.zeros((0, d, nf))
    for a in range(ni):
        for b in range(nb):
            col = col_one[bidx[a, b]]
            if col >= 0:
                vals[col] += bval[a, b]
                if want_grad:
                    for k in range(d):
                        grads[a, k, col] += bgrad[a, b, k]
    if nrl == 0:
        return vals, grads
    ntmax = (rq + 1) * (d + 1)
    tt = np.empty(ntmax, dtype=np.int64)
    kap = np.empty(ntmax)
    kg = np.empty((ntmax, d))
    s = np.empty(d)
    for a in range(ni):
        for e in range(ni):
            if a == e:
                continue
            r2 = 0.0
            for k in range(d):
                s[k] = pts[e, k] - pts[a, k]
                r2 += s[k] * s[k]
            if r2 >= rmax * rmax:
                continue
            r = math.sqrt(r2)
            # coincident points: the direction is undefined, only the even part survives
            ir = 1.0 / r if r > 0.0 else 0.0
            u = r / rdelta
            base = int(math.floor(u))
            nt = 0
            for c in range(rq + 1):
                l = base - rq + c
                R, dR = _card(rq, u - l)
                if R == 0.0 and dR == 0.0:
                    continue
                dR /= rdelta
                li = l + rq
                if li < 0 or li >= nrl:
                    continue
                tt[nt] = li * (d + 1)
                kap[nt] = R
                for k in range(d):
                    kg[nt, k] = dR * s[k] * ir
                nt += 1
                for comp in range(d):
                    tt[nt] = li * (d + 1) + comp + 1
                    sc = s[comp] * ir
                    kap[nt] = sc * R
                    for k in range(d):
                        dsc = ((1.0 if k == comp else 0.0) - sc * s[k] * ir) * ir
                        kg[nt, k] = dsc * R + sc * dR * s[k] * ir
                    nt += 1
            for ti in range(nt):
                t = tt[ti]
                for b in range(nb):
                    B = bidx[a, b]
                    phi = bval[a, b]
                    col = col_pc[B, t]
                    if col >= 0:
                        vals[col] += phi * kap[ti] * chi[e]
                        if want_grad:
                            for k in range(d):
                                grads[a, k, col] += bgrad[a, b, k] * kap[ti] * chi[e] - phi * kg[ti, k] * chi[e]
                                grads[e, k, col] += phi * (kg[ti, k] * chi[e] + kap[ti] * chig[e, k])
                    col = col_p1[B, t]
                    if col >= 0:
                        vals[col] += phi * kap[ti]
                        if want_grad:
                            for k in range(d):
                                grads[a, k, col] += bgrad[a, b, k] * kap[ti] - phi * kg[ti, k]
                                grads[e, k, col] += phi * kg[ti, k]
    return vals, grads


def _features_np(pts, lo, hb, ncell, q, col_one, col_pc, col_p1, rq, rdelta, nrl, nf, want_grad):
    ni, d = pts.shape
    nspl = ncell + q
    vals = np.zeros(nf)
    grads = np.zeros((ni if want_grad else 0, d, nf))
    if ni == 0:
        return vals, grads
    # per-dimension local splines, shape (ni, d, q+1)
    u = (pts - lo) / hb
    base = np.minimum(np.floor(u).astype(np.int64), ncell - 1)
    j = base[:, :, None] - q + np.arange(q + 1)
    v, dv = _card_np(q, u[:, :, None] - j)
    dv = dv / hb
    interior = (j >= 0) & (j <= ncell - q - 1)
    S = np.sum(v * interior, axis=2)
    dS = np.sum(dv * interior, axis=2)
    chi = np.prod(S, axis=1)
    chig = np.empty((ni, d))
    for k in range(d):
        chig[:, k] = dS[:, k] * np.prod(np.delete(S, k, axis=1), axis=1)
    # tensor combos
    combos = np.array([[(c // (q + 1) ** k) % (q + 1) for k in range(d)] for c in range((q + 1) ** d)])
    nb = combos.shape[0]
    bidx = np.zeros((ni, nb), dtype=np.int64)
    bval = np.ones((ni, nb))
    bgrad = np.ones((ni, nb, d))
    for k in range(d):
        ck = combos[:, k]
        bidx += (j[:, k, ck] + q) * nspl ** k
        bval *= v[:, k, ck]
        for l in range(d):
            bgrad[:, :, l] *= dv[:, k, ck] if l == k else v[:, k, ck]
    cols = col_one[bidx]
    m = cols >= 0
    np.add.at(vals, cols[m], bval[m])
    if want_grad:
        aa = np.broadcast_to(np.arange(ni)[:, None], cols.shape)[m]
        for k in range(d):
            np.add.at(grads[:, k, :], (aa, cols[m]), bgrad[:, :, k][m])
    if nrl == 0 or ni < 2:
        return vals, grads
    rmax = nrl * rdelta
    ia, ie = np.nonzero(~np.eye(ni, dtype=bool))
    s = pts[ie] - pts[ia]
    r = np.sqrt(np.sum(s * s, axis=1))
    keep = r < rmax
    ia, ie, s, r = ia[keep], ie[keep], s[keep], r[keep]
    if len(r) == 0:
        return vals, grads
    P = len(r)
    ur = r / rdelta
    l = np.floor(ur).astype(np.int64)[:, None] - rq + np.arange(rq + 1)
    R, dR = _card_np(rq, ur[:, None] - l)
    dR = dR / rdelta
    li = l + rq
    valid = (li >= 0) & (li < nrl)
    R = np.where(valid, R, 0.0)
    dR = np.where(valid, dR, 0.0)
    li = np.where(valid, li, 0)
    ir = np.divide(1.0, r, out=np.zeros_like(r), where=r > 0)
    sh = s * ir[:, None]
    # kernel types: (P, rq+1, d+1)
    tt = li[:, :, None] * (d + 1) + np.arange(d + 1)
    kap = np.empty((P, rq + 1, d + 1))
    kg = np.empty((P, rq + 1, d + 1, d))
    kap[:, :, 0] = R
    kg[:, :, 0, :] = dR[:, :, None] * sh[:, None, :]
    eye = np.eye(d)
    for c in range(d):
        sc = sh[:, c]
        kap[:, :, c + 1] = sc[:, None] * R
        dsc = (eye[c][None, :] - sc[:, None] * sh) * ir[:, None]
        kg[:, :, c + 1, :] = dsc[:, None, :] * R[:, :, None] + (sc[:, None] * dR)[:, :, None] * sh[:, None, :]
    valid3 = np.broadcast_to(valid[:, :, None], kap.shape)
    for table, use_chi in ((col_pc, True), (col_p1, False)):
        # (P, nb, rq+1, d+1)
        cols = table[bidx[ia][:, :, None, None], tt[:, None, :, :]]
        m = (cols >= 0) & valid3[:, None, :, :]
        if not m.any():
            continue
        ce = chi[ie] if use_chi else np.ones(P)
        cge = chig[ie] if use_chi else np.zeros((P, d))
        phi = bval[ia][:, :, None, None]
        kv = kap[:, None, :, :]
        contrib = phi * kv * ce[:, None, None, None]
        np.add.at(vals, cols[m], contrib[m])
        if want_grad:
            pa = np.broadcast_to(ia[:, None, None, None], cols.shape)[m]
            pe = np.broadcast_to(ie[:, None, None, None], cols.shape)[m]
            for k in range(d):
                ga = (bgrad[ia][:, :, k][:, :, None, None] * kv - phi * kg[:, None, :, :, k]) * ce[:, None, None, None]
                ge = phi * (kg[:, None, :, :, k] * ce[:, None, None, None] + kv * cge[:, k][:, None, None, None])
                np.add.at(grads[:, k, :], (pa, cols[m]), ga[m])
                np.add.at(grads[:, k, :], (pe, cols[m]), ge[m])
    return vals, grads


def feature_eval(pts, layout, want_grad=True):
    """Feature values (nf,) and gradients (n, d, nf) for points already inside U."""
    pts = np.ascontiguousarray(pts, dtype=float)
    args = (pts, layout.lo, layout.hb, layout.ncell, layout.degree, layout.col_one, layout.col_pc,
            layout.col_p1, layout.radial_degree, layout.radial_spacing, layout.n_radial, layout.nf, want_grad)
    if use_numba():
        return _features_nb(*args)
    return _features_np(*args)
