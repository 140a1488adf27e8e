# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled per-sample kernels; same contract as ``_numpy``."""

import numpy as np

from libc.math cimport sqrt, floor, atan2, rint

cdef double SENTINEL = 1e30
cdef double TINY = 1e-12


cdef inline void qmul(const double* a, const double* b, double* out) noexcept nogil:
    # (s1 s2 - v1.v2, s1 v2 + s2 v1 - v1 x v2)
    out[0] = a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3]
    out[1] = a[0] * b[1] + b[0] * a[1] - (a[2] * b[3] - a[3] * b[2])
    out[2] = a[0] * b[2] + b[0] * a[2] - (a[3] * b[1] - a[1] * b[3])
    out[3] = a[0] * b[3] + b[0] * a[3] - (a[1] * b[2] - a[2] * b[1])


cdef inline int wrap(int p, int n) noexcept nogil:
    p = p % n
    if p < 0:
        p += n
    return p


cdef inline int clampi(int p, int n) noexcept nogil:
    if p < 0:
        return 0
    if p > n - 1:
        return n - 1
    return p


cdef inline double interp(const double[:, :, ::1] img, int na, int nb,
                          double y1, double y2, bint periodic,
                          double* Q, double* dQ1, double* dQ2) noexcept nogil:
    """Fill Q, dQ/dy1, dQ/dy2; return |Q| (nearest-node fallback if degenerate)."""
    cdef bint c1 = 0, c2 = 0
    cdef double f1, f2, r1, r2, fl1, fl2, nq, q00, q10, q01, q11
    cdef int x0, x1, y0, yy1, c
    if not periodic:
        # constant extension beyond the outermost sample nodes
        if y1 < 0.5:
            y1 = 0.5
            c1 = 1
        elif y1 > na - 0.5:
            y1 = na - 0.5
            c1 = 1
        if y2 < 0.5:
            y2 = 0.5
            c2 = 1
        elif y2 > nb - 0.5:
            y2 = nb - 0.5
            c2 = 1
    f1 = y1 - 0.5
    f2 = y2 - 0.5
    fl1 = floor(f1)
    fl2 = floor(f2)
    r1 = f1 - fl1
    r2 = f2 - fl2
    x0 = <int>fl1
    y0 = <int>fl2
    if periodic:
        x1 = wrap(x0 + 1, na)
        yy1 = wrap(y0 + 1, nb)
        x0 = wrap(x0, na)
        y0 = wrap(y0, nb)
    else:
        x1 = clampi(x0 + 1, na)
        yy1 = clampi(y0 + 1, nb)
        x0 = clampi(x0, na)
        y0 = clampi(y0, nb)
    nq = 0.0
    for c in range(4):
        q00 = img[x0, y0, c]
        q10 = img[x1, y0, c]
        q01 = img[x0, yy1, c]
        q11 = img[x1, yy1, c]
        Q[c] = (1 - r1) * (1 - r2) * q00 + r1 * (1 - r2) * q10 + (1 - r1) * r2 * q01 + r1 * r2 * q11
        dQ1[c] = 0.0 if c1 else (1 - r2) * (q10 - q00) + r2 * (q11 - q01)
        dQ2[c] = 0.0 if c2 else (1 - r1) * (q01 - q00) + r1 * (q11 - q10)
        nq += Q[c] * Q[c]
    nq = sqrt(nq)
    if nq < TINY:
        x0 = <int>rint(f1)
        y0 = <int>rint(f2)
        if periodic:
            x0 = wrap(x0, na)
            y0 = wrap(y0, nb)
        else:
            x0 = clampi(x0, na)
            y0 = clampi(y0, nb)
        nq = 0.0
        for c in range(4):
            Q[c] = img[x0, y0, c]
            dQ1[c] = 0.0
            dQ2[c] = 0.0
        nq = 1.0
    return nq


cdef void _data(const double[:, :, :, :, ::1] i1s, const double[:, :, ::1] img,
                const double[:, :, ::1] u, const double[:, :, :, ::1] z, double s,
                const double[:, ::1] sym, bint periodic, bint rotate, bint want_grad,
                const unsigned char[:, ::1] mask, bint use_mask,
                const double[:, :, :, :, ::1] pre, bint use_pre,
                double[:, ::1] D, double[:, :, ::1] gu, double[:, :, :, ::1] gz) noexcept nogil:
    cdef int A = i1s.shape[0], B = i1s.shape[1], m = i1s.shape[2]
    cdef int na = img.shape[0], nb = img.shape[1], nS = sym.shape[0]
    cdef bint want_gu = want_grad and not use_pre
    cdef int i, j, k, l, e, best, c
    cdef double inv = 1.0 / (m * m)
    cdef double t1, t2, w00, w10, w01, w11, y1, y2, nQ, acc
    cdef double zx00, zx01, zx10, zx11, N, Dn, rho, sg, ha, hb, nab, cs, sn
    cdef double cmax, dot, nt, gth, rho2, gN, gD, gqq, gy1, gy2
    cdef double Q[4]
    cdef double dQ1[4]
    cdef double dQ2[4]
    cdef double qh[4]
    cdef double P[4]
    cdef double q1c[4]
    cdef double r[4]
    cdef double p[4]
    cdef double tang[4]
    cdef double gP[4]
    cdef double gq[4]
    cdef double dP[4]
    cdef double gQ[4]
    cdef double q1[4]
    for i in range(A):
        for j in range(B):
            acc = 0.0
            if use_mask and not mask[i, j]:
                D[i, j] = 0.0
                continue
            for k in range(m):
                t1 = (2.0 * k + 1.0) / (2.0 * m)
                for l in range(m):
                    t2 = (2.0 * l + 1.0) / (2.0 * m)
                    w00 = (1 - t1) * (1 - t2)
                    w10 = t1 * (1 - t2)
                    w01 = (1 - t1) * t2
                    w11 = t1 * t2
                    if use_pre:
                        for c in range(4):
                            qh[c] = pre[i, j, k, l, c]
                        nQ = 1.0
                    else:
                        y1 = s * (i + t1) + (w00 * u[i, j, 0] + w10 * u[i + 1, j, 0]
                                             + w01 * u[i, j + 1, 0] + w11 * u[i + 1, j + 1, 0])
                        y2 = s * (j + t2) + (w00 * u[i, j, 1] + w10 * u[i + 1, j, 1]
                                             + w01 * u[i, j + 1, 1] + w11 * u[i + 1, j + 1, 1])
                        nQ = interp(img, na, nb, y1, y2, periodic, Q, dQ1, dQ2)
                        for c in range(4):
                            qh[c] = Q[c] / nQ
                    if rotate:
                        zx00 = z[i, j, 0, 0] * (1 - t2) + z[i, j, 1, 0] * t2
                        zx10 = z[i, j, 0, 1] * (1 - t2) + z[i, j, 1, 1] * t2
                        zx01 = z[i, j, 2, 0] * (1 - t1) + z[i, j, 3, 0] * t1
                        zx11 = z[i, j, 2, 1] * (1 - t1) + z[i, j, 3, 1] * t1
                        N = zx10 - zx01
                        Dn = 2.0 + zx00 + zx11
                        rho = sqrt(N * N + Dn * Dn)
                        if Dn >= 0:
                            ha = rho + Dn
                            hb = N
                        else:
                            sg = 1.0 if N >= 0 else -1.0
                            ha = sg * N
                            hb = sg * (rho - Dn)
                        nab = sqrt(ha * ha + hb * hb)
                        if nab < TINY:
                            cs = 1.0
                            sn = 0.0
                        else:
                            cs = ha / nab
                            sn = hb / nab
                        P[0] = cs * qh[0] + sn * qh[3]
                        P[1] = cs * qh[1] - sn * qh[2]
                        P[2] = cs * qh[2] + sn * qh[1]
                        P[3] = cs * qh[3] - sn * qh[0]
                    else:
                        for c in range(4):
                            P[c] = qh[c]
                    for c in range(4):
                        q1[c] = i1s[i, j, k, l, c]
                    q1c[0] = q1[0]
                    q1c[1] = -q1[1]
                    q1c[2] = -q1[2]
                    q1c[3] = -q1[3]
                    qmul(q1c, P, r)
                    best = 0
                    cmax = -2.0
                    for e in range(nS):
                        dot = sym[e, 0] * r[0] + sym[e, 1] * r[1] + sym[e, 2] * r[2] + sym[e, 3] * r[3]
                        if dot > cmax:
                            cmax = dot
                            best = e
                    qmul(q1, &sym[best, 0], p)
                    nt = 0.0
                    for c in range(4):
                        tang[c] = p[c] - cmax * P[c]
                        nt += tang[c] * tang[c]
                    nt = sqrt(nt)
                    acc += atan2(nt, cmax)
                    if not want_grad:
                        continue
                    if nt > TINY:
                        for c in range(4):
                            gP[c] = -tang[c] / nt * inv
                    else:
                        continue
                    if rotate:
                        dP[0] = 0.5 * (-sn * qh[0] + cs * qh[3])
                        dP[1] = 0.5 * (-sn * qh[1] - cs * qh[2])
                        dP[2] = 0.5 * (-sn * qh[2] + cs * qh[1])
                        dP[3] = 0.5 * (-sn * qh[3] - cs * qh[0])
                        gth = gP[0] * dP[0] + gP[1] * dP[1] + gP[2] * dP[2] + gP[3] * dP[3]
                        gq[0] = cs * gP[0] - sn * gP[3]
                        gq[1] = cs * gP[1] + sn * gP[2]
                        gq[2] = cs * gP[2] - sn * gP[1]
                        gq[3] = cs * gP[3] + sn * gP[0]
                        rho2 = N * N + Dn * Dn
                        if rho2 > TINY:
                            gN = gth * Dn / rho2
                            gD = -gth * N / rho2
                            gz[i, j, 0, 0] += gD * (1 - t2)
                            gz[i, j, 1, 0] += gD * t2
                            gz[i, j, 0, 1] += gN * (1 - t2)
                            gz[i, j, 1, 1] += gN * t2
                            gz[i, j, 2, 0] += -gN * (1 - t1)
                            gz[i, j, 3, 0] += -gN * t1
                            gz[i, j, 2, 1] += gD * (1 - t1)
                            gz[i, j, 3, 1] += gD * t1
                    else:
                        for c in range(4):
                            gq[c] = gP[c]
                    if not want_gu:
                        continue
                    gqq = gq[0] * qh[0] + gq[1] * qh[1] + gq[2] * qh[2] + gq[3] * qh[3]
                    gy1 = 0.0
                    gy2 = 0.0
                    for c in range(4):
                        gQ[c] = (gq[c] - gqq * qh[c]) / nQ
                        gy1 += gQ[c] * dQ1[c]
                        gy2 += gQ[c] * dQ2[c]
                    gu[i, j, 0] += gy1 * w00
                    gu[i, j, 1] += gy2 * w00
                    gu[i + 1, j, 0] += gy1 * w10
                    gu[i + 1, j, 1] += gy2 * w10
                    gu[i, j + 1, 0] += gy1 * w01
                    gu[i, j + 1, 1] += gy2 * w01
                    gu[i + 1, j + 1, 0] += gy1 * w11
                    gu[i + 1, j + 1, 1] += gy2 * w11
            D[i, j] = acc * inv


_EMPTY5 = np.zeros((1, 1, 1, 1, 1))
_EMPTY3 = np.zeros((1, 1, 1))
_NOMASK = np.ones((1, 1), dtype=np.uint8)


def _run_data(i1s, img, u, z, double s, sym, bint periodic, bint rotate, bint want_grad, mask, pre):
    cdef const double[:, :, :, :, ::1] i1v = np.ascontiguousarray(i1s, dtype=np.float64)
    cdef const double[:, :, ::1] imv = np.ascontiguousarray(img if pre is None else _EMPTY3, dtype=np.float64)
    cdef const double[:, :, ::1] uv = np.ascontiguousarray(u if pre is None else _EMPTY3, dtype=np.float64)
    cdef const double[:, :, :, ::1] zv = np.ascontiguousarray(z, dtype=np.float64)
    cdef const double[:, ::1] sv = np.ascontiguousarray(sym, dtype=np.float64)
    cdef const unsigned char[:, ::1] mv = _NOMASK if mask is None else np.ascontiguousarray(mask, dtype=np.uint8)
    cdef const double[:, :, :, :, ::1] pv = _EMPTY5 if pre is None else np.ascontiguousarray(pre, dtype=np.float64)
    cdef bint use_mask = mask is not None
    cdef bint use_pre = pre is not None
    D = np.empty((i1v.shape[0], i1v.shape[1]))
    gu = np.zeros(np.shape(u) if want_grad and pre is None else (1, 1, 1))
    gz = np.zeros(np.shape(z) if want_grad else (1, 1, 1, 1))
    cdef double[:, ::1] Dv = D
    cdef double[:, :, ::1] guv = gu
    cdef double[:, :, :, ::1] gzv = gz
    with nogil:
        _data(i1v, imv, uv, zv, s, sv, periodic, rotate, want_grad, mv, use_mask, pv, use_pre, Dv, guv, gzv)
    return D, gu, gz


def data_cells(i1s, img, u, z, s, sym, periodic=False, rotate=True, mask=None):
    """Per-cell mean of the sampled orientation distances, (A, B); cells outside ``mask`` are 0."""
    return _run_data(i1s, img, u, z, s, sym, periodic, rotate, False, mask, None)[0]


def data_grad(i1s, img, u, z, s, sym, periodic=False, rotate=True):
    """Per-cell data values and the gradient of their sum w.r.t. ``u`` and ``z``."""
    return _run_data(i1s, img, u, z, s, sym, periodic, rotate, True, None, None)


def data_cells_pre(i1s, qh, z, sym, rotate=True, mask=None):
    """As :func:`data_cells` with the warped target samples ``qh`` precomputed."""
    return _run_data(i1s, None, None, z, 1.0, sym, False, rotate, False, mask, qh)[0]


def data_grad_pre(i1s, qh, z, sym, rotate=True):
    """Per-cell data values and their ``z`` gradient for precomputed target samples."""
    D, _, gz = _run_data(i1s, None, None, z, 1.0, sym, False, rotate, True, None, qh)
    return D, gz


def target_samples(img, u, double s, int m, bint periodic=False):
    """Normalized target quaternions ``I2(x + u(x))`` at the cell samples, (A, B, m, m, 4)."""
    cdef const double[:, :, ::1] imv = np.ascontiguousarray(img, dtype=np.float64)
    cdef const double[:, :, ::1] uv = np.ascontiguousarray(u, dtype=np.float64)
    cdef int A = uv.shape[0] - 1, B = uv.shape[1] - 1
    cdef int na = imv.shape[0], nb = imv.shape[1]
    out = np.empty((A, B, m, m, 4))
    cdef double[:, :, :, :, ::1] ov = out
    cdef int i, j, k, l, c
    cdef double t1, t2, y1, y2, nQ
    cdef double Q[4]
    cdef double dQ1[4]
    cdef double dQ2[4]
    with nogil:
        for i in range(A):
            for j in range(B):
                for k in range(m):
                    t1 = (2.0 * k + 1.0) / (2.0 * m)
                    for l in range(m):
                        t2 = (2.0 * l + 1.0) / (2.0 * m)
                        y1 = s * (i + t1) + ((1 - t1) * (1 - t2) * uv[i, j, 0] + t1 * (1 - t2) * uv[i + 1, j, 0]
                                             + (1 - t1) * t2 * uv[i, j + 1, 0] + t1 * t2 * uv[i + 1, j + 1, 0])
                        y2 = s * (j + t2) + ((1 - t1) * (1 - t2) * uv[i, j, 1] + t1 * (1 - t2) * uv[i + 1, j, 1]
                                             + (1 - t1) * t2 * uv[i, j + 1, 1] + t1 * t2 * uv[i + 1, j + 1, 1])
                        nQ = interp(imv, na, nb, y1, y2, periodic, Q, dQ1, dQ2)
                        for c in range(4):
                            ov[i, j, k, l, c] = Q[c] / nQ
    return out


cdef int _zreg(const double[:, :, :, ::1] z, const double[:, :, :, ::1] w, int m, bint want_grad,
               double[:, ::1] tv1, double[:, ::1] bar, double[:, :, :, ::1] gzt,
               double[:, :, :, ::1] gwt, double[:, :, :, ::1] gzb) noexcept nogil:
    cdef int A = z.shape[0], B = z.shape[1]
    cdef int i, j, k, l, ninf = 0
    cdef double inv = 1.0 / (m * m)
    cdef double t1, t2, zx00, zx01, zx10, zx11, d00, d01, d10, d11, n, a, d, det, fp
    cdef double acc_t, acc_b
    cdef double g00, g01, g10, g11
    for i in range(A):
        for j in range(B):
            acc_t = 0.0
            acc_b = 0.0
            for k in range(m):
                t1 = (2.0 * k + 1.0) / (2.0 * m)
                for l in range(m):
                    t2 = (2.0 * l + 1.0) / (2.0 * m)
                    zx00 = z[i, j, 0, 0] * (1 - t2) + z[i, j, 1, 0] * t2
                    zx10 = z[i, j, 0, 1] * (1 - t2) + z[i, j, 1, 1] * t2
                    zx01 = z[i, j, 2, 0] * (1 - t1) + z[i, j, 3, 0] * t1
                    zx11 = z[i, j, 2, 1] * (1 - t1) + z[i, j, 3, 1] * t1
                    d00 = zx00 - w[i, j, 0, 0]
                    d01 = zx01 - w[i, j, 0, 1]
                    d10 = zx10 - w[i, j, 1, 0]
                    d11 = zx11 - w[i, j, 1, 1]
                    n = sqrt(d00 * d00 + d01 * d01 + d10 * d10 + d11 * d11)
                    acc_t += n
                    a = 1.0 + zx00
                    d = 1.0 + zx11
                    det = a * d - zx01 * zx10
                    if det > 0:
                        acc_b += 1.0 / det + det
                    else:
                        acc_b += SENTINEL
                        ninf += 1
                    if not want_grad:
                        continue
                    if n > TINY:
                        g00 = d00 / n * inv
                        g01 = d01 / n * inv
                        g10 = d10 / n * inv
                        g11 = d11 / n * inv
                        gzt[i, j, 0, 0] += g00 * (1 - t2)
                        gzt[i, j, 1, 0] += g00 * t2
                        gzt[i, j, 0, 1] += g10 * (1 - t2)
                        gzt[i, j, 1, 1] += g10 * t2
                        gzt[i, j, 2, 0] += g01 * (1 - t1)
                        gzt[i, j, 3, 0] += g01 * t1
                        gzt[i, j, 2, 1] += g11 * (1 - t1)
                        gzt[i, j, 3, 1] += g11 * t1
                        gwt[i, j, 0, 0] -= g00
                        gwt[i, j, 0, 1] -= g01
                        gwt[i, j, 1, 0] -= g10
                        gwt[i, j, 1, 1] -= g11
                    if det > 0:
                        fp = (1.0 - 1.0 / (det * det)) * inv
                        g00 = fp * d
                        g11 = fp * a
                        g01 = -fp * zx10
                        g10 = -fp * zx01
                        gzb[i, j, 0, 0] += g00 * (1 - t2)
                        gzb[i, j, 1, 0] += g00 * t2
                        gzb[i, j, 0, 1] += g10 * (1 - t2)
                        gzb[i, j, 1, 1] += g10 * t2
                        gzb[i, j, 2, 0] += g01 * (1 - t1)
                        gzb[i, j, 3, 0] += g01 * t1
                        gzb[i, j, 2, 1] += g11 * (1 - t1)
                        gzb[i, j, 3, 1] += g11 * t1
            tv1[i, j] = acc_t * inv
            bar[i, j] = acc_b * inv
    return ninf


def _run_zreg(z, w, int m, bint want_grad):
    cdef const double[:, :, :, ::1] zv = np.ascontiguousarray(z, dtype=np.float64)
    cdef const double[:, :, :, ::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    tv1 = np.empty((zv.shape[0], zv.shape[1]))
    bar = np.empty((zv.shape[0], zv.shape[1]))
    gzt = np.zeros(np.shape(z) if want_grad else (1, 1, 1, 1))
    gwt = np.zeros(np.shape(w) if want_grad else (1, 1, 1, 1))
    gzb = np.zeros(np.shape(z) if want_grad else (1, 1, 1, 1))
    cdef double[:, ::1] tv = tv1
    cdef double[:, ::1] bv = bar
    cdef double[:, :, :, ::1] a = gzt
    cdef double[:, :, :, ::1] b = gwt
    cdef double[:, :, :, ::1] c = gzb
    cdef int ninf
    with nogil:
        ninf = _zreg(zv, wv, m, want_grad, tv, bv, a, b, c)
    return tv1, bar, ninf, gzt, gwt, gzb


def zreg_cells(z, w, m):
    """Per-cell TV1 (mean ``||z(x) - w||_F``) and barrier (mean ``f(det(I + z(x)))``)."""
    return _run_zreg(z, w, m, False)[:3]


def zreg_grad(z, w, m):
    """As :func:`zreg_cells` plus gradients of the per-cell sums."""
    return _run_zreg(z, w, m, True)
