"""Vectorized numpy implementation of the per-sample kernels.

Array layout shared with the compiled backend (all float64):

``i1s``  (A, B, m, m, 4)  reference image at the cell sample points
``img``  (na, nb, 4)      target image samples at nodes ``(p + 1/2, q + 1/2)``
``u``    (A+1, B+1, 2)    displacement coefficients at nodes ``s (i, j)``
``z``    (A, B, 4, 2)     finite-difference coefficients ``z[.., kappa, comp]``
``w``    (A, B, 2, 2)     piecewise-constant tensor field
``sym``  (nS, 4)          symmetry quaternions, closed under negation
"""

import numpy as np

SENTINEL = 1e30
_TINY = 1e-12


def sample_offsets(m):
    return (2.0 * np.arange(m) + 1.0) / (2.0 * m)


def _sample_zx(z, t):
    """z(x) at the sample points, (A, B, m, m, 2, 2)."""
    t1 = t[:, None]
    t2 = t[None, :]
    A, B = z.shape[:2]
    m = t.size
    zx = np.empty((A, B, m, m, 2, 2))
    for c in range(2):
        zx[..., c, 0] = z[:, :, 0, c, None, None] * (1 - t2) + z[:, :, 1, c, None, None] * t2
        zx[..., c, 1] = z[:, :, 2, c, None, None] * (1 - t1) + z[:, :, 3, c, None, None] * t1
    return zx


def _zx_adjoint(g, t):
    """Pull a per-sample gradient w.r.t. z(x) back onto the coefficients."""
    t1 = t[:, None]
    t2 = t[None, :]
    A, B = g.shape[:2]
    gz = np.empty((A, B, 4, 2))
    for c in range(2):
        gz[:, :, 0, c] = np.sum(g[..., c, 0] * (1 - t2), axis=(2, 3))
        gz[:, :, 1, c] = np.sum(g[..., c, 0] * t2, axis=(2, 3))
        gz[:, :, 2, c] = np.sum(g[..., c, 1] * (1 - t1), axis=(2, 3))
        gz[:, :, 3, c] = np.sum(g[..., c, 1] * t1, axis=(2, 3))
    return gz


def _node_weights(t):
    t1 = t[:, None]
    t2 = t[None, :]
    return ((1 - t1) * (1 - t2), t1 * (1 - t2), (1 - t1) * t2, t1 * t2)


def _sample_u(u, t):
    w00, w10, w01, w11 = (w[None, None, :, :, None] for w in _node_weights(t))
    return (
        u[:-1, :-1, None, None] * w00
        + u[1:, :-1, None, None] * w10
        + u[:-1, 1:, None, None] * w01
        + u[1:, 1:, None, None] * w11
    )


def _node_adjoint(g, t, shape):
    """Scatter per-sample gradients w.r.t. u(x) onto the node coefficients."""
    out = np.zeros(shape)
    for w, (di, dj) in zip(_node_weights(t), ((0, 0), (1, 0), (0, 1), (1, 1))):
        contrib = np.einsum("abklc,kl->abc", g, w)
        out[di : di + contrib.shape[0], dj : dj + contrib.shape[1]] += contrib
    return out


def _interp(img, y, periodic):
    """Bilinear image value and spatial derivatives at points ``y``."""
    na, nb = img.shape[:2]
    y = np.array(y, dtype=float)
    if periodic:
        clamped = np.zeros(y.shape, dtype=bool)
    else:
        # constant extension beyond the outermost sample nodes
        hi = np.array([na - 0.5, nb - 0.5])
        clamped = (y < 0.5) | (y > hi)
        y = np.clip(y, 0.5, hi)
    f = y - 0.5
    p = np.floor(f)
    r = f - p
    p0 = p.astype(np.intp)
    p1 = p0 + 1
    if periodic:
        p0x, p1x = p0[..., 0] % na, p1[..., 0] % na
        p0y, p1y = p0[..., 1] % nb, p1[..., 1] % nb
    else:
        p0x, p1x = np.clip(p0[..., 0], 0, na - 1), np.clip(p1[..., 0], 0, na - 1)
        p0y, p1y = np.clip(p0[..., 1], 0, nb - 1), np.clip(p1[..., 1], 0, nb - 1)
    q00 = img[p0x, p0y]
    q10 = img[p1x, p0y]
    q01 = img[p0x, p1y]
    q11 = img[p1x, p1y]
    r1 = r[..., 0, None]
    r2 = r[..., 1, None]
    Q = (1 - r1) * (1 - r2) * q00 + r1 * (1 - r2) * q10 + (1 - r1) * r2 * q01 + r1 * r2 * q11
    dQ1 = (1 - r2) * (q10 - q00) + r2 * (q11 - q01)
    dQ2 = (1 - r1) * (q01 - q00) + r1 * (q11 - q10)
    dQ1 = np.where(clamped[..., 0, None], 0.0, dQ1)
    dQ2 = np.where(clamped[..., 1, None], 0.0, dQ2)
    nQ = np.linalg.norm(Q, axis=-1)
    bad = nQ < _TINY
    if np.any(bad):
        ix = np.rint(f[..., 0]).astype(np.intp)
        iy = np.rint(f[..., 1]).astype(np.intp)
        if periodic:
            ix, iy = ix % na, iy % nb
        else:
            ix, iy = np.clip(ix, 0, na - 1), np.clip(iy, 0, nb - 1)
        Q = np.where(bad[..., None], img[ix, iy], Q)
        dQ1 = np.where(bad[..., None], 0.0, dQ1)
        dQ2 = np.where(bad[..., None], 0.0, dQ2)
        nQ = np.where(bad, 1.0, nQ)
    return Q, nQ, dQ1, dQ2


def _half_angle(zx):
    """(cos, sin) of half the polar angle of I + z(x), plus atan2 pieces."""
    N = zx[..., 1, 0] - zx[..., 0, 1]
    Dn = 2.0 + zx[..., 0, 0] + zx[..., 1, 1]
    rho = np.hypot(N, Dn)
    sg = np.where(N >= 0, 1.0, -1.0)
    a = np.where(Dn >= 0, rho + Dn, sg * N)
    b = np.where(Dn >= 0, N, sg * (rho - Dn))
    nab = np.hypot(a, b)
    deg = nab < _TINY
    nab = np.where(deg, 1.0, nab)
    c = np.where(deg, 1.0, a / nab)
    sn = np.where(deg, 0.0, b / nab)
    return c, sn, N, Dn


def _rotate(c, sn, q):
    """conj(q(e3, theta)) ⊙ q for broadcastable c, sn."""
    b0, b1, b2, b3 = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack(
        [c * b0 + sn * b3, c * b1 - sn * b2, c * b2 + sn * b1, c * b3 - sn * b0], axis=-1
    )


def _rotate_T(c, sn, g):
    g0, g1, g2, g3 = g[..., 0], g[..., 1], g[..., 2], g[..., 3]
    return np.stack(
        [c * g0 - sn * g3, c * g1 + sn * g2, c * g2 - sn * g1, c * g3 + sn * g0], axis=-1
    )


def _qmul(a, b):
    s1, v1 = a[..., 0], a[..., 1:]
    s2, v2 = b[..., 0], b[..., 1:]
    s = s1 * s2 - np.sum(v1 * v2, axis=-1)
    v = s1[..., None] * v2 + s2[..., None] * v1 - np.cross(v1, v2)
    return np.concatenate([s[..., None], v], axis=-1)


def _conj(a):
    return a * np.array([1.0, -1.0, -1.0, -1.0])


def _target(img, u, s, t, periodic):
    A, B = u.shape[0] - 1, u.shape[1] - 1
    ii = np.arange(A)[:, None, None, None]
    jj = np.arange(B)[None, :, None, None]
    x1 = s * (ii + t[None, None, :, None])
    x2 = s * (jj + t[None, None, None, :])
    X = np.stack(np.broadcast_arrays(x1, x2), axis=-1)
    return _interp(img, X + _sample_u(u, t), periodic)


def _data(i1s, img, u, z, s, sym, periodic, rotate, want_grad, pre=None):
    m = i1s.shape[2]
    t = sample_offsets(m)
    if pre is None:
        Q, nQ, dQ1, dQ2 = _target(img, u, s, t, periodic)
        qh = Q / nQ[..., None]
    else:
        qh = pre
    if rotate:
        zx = _sample_zx(z, t)
        c, sn, N, Dn = _half_angle(zx)
        P = _rotate(c, sn, qh)
    else:
        P = qh
    r = _qmul(_conj(i1s), P)
    dots = r @ sym.T
    best = np.argmax(dots, axis=-1)
    cmax = np.take_along_axis(dots, best[..., None], axis=-1)[..., 0]
    p = _qmul(i1s, sym[best])
    tang = p - cmax[..., None] * P
    nt = np.linalg.norm(tang, axis=-1)
    dist = np.arctan2(nt, cmax)
    D = dist.mean(axis=(2, 3))
    if not want_grad:
        return D
    inv = 1.0 / (m * m)
    gP = np.where(nt[..., None] > _TINY, -tang / np.where(nt > _TINY, nt, 1.0)[..., None], 0.0)
    gP *= inv
    if rotate:
        # dP/dtheta with d(c, sn)/dtheta = (-sn/2, c/2)
        b0, b1, b2, b3 = qh[..., 0], qh[..., 1], qh[..., 2], qh[..., 3]
        dP = 0.5 * np.stack(
            [-sn * b0 + c * b3, -sn * b1 - c * b2, -sn * b2 + c * b1, -sn * b3 - c * b0], axis=-1
        )
        gth = np.sum(gP * dP, axis=-1)
        gq = _rotate_T(c, sn, gP)
        rho2 = N * N + Dn * Dn
        okr = rho2 > _TINY
        rho2 = np.where(okr, rho2, 1.0)
        gN = np.where(okr, gth * Dn / rho2, 0.0)
        gD = np.where(okr, -gth * N / rho2, 0.0)
        gzx = np.empty(gN.shape + (2, 2))
        gzx[..., 0, 0] = gD
        gzx[..., 1, 1] = gD
        gzx[..., 1, 0] = gN
        gzx[..., 0, 1] = -gN
        gz = _zx_adjoint(gzx, t)
    else:
        gq = gP
        gz = np.zeros(z.shape)
    if pre is not None:
        return D, gz
    gQ = (gq - np.sum(gq * qh, axis=-1, keepdims=True) * qh) / nQ[..., None]
    gy = np.stack([np.sum(gQ * dQ1, axis=-1), np.sum(gQ * dQ2, axis=-1)], axis=-1)
    gu = _node_adjoint(gy, t, u.shape)
    return D, gu, gz


def _masked(D, mask):
    return D if mask is None else np.where(np.asarray(mask, dtype=bool), D, 0.0)


def data_cells(i1s, img, u, z, s, sym, periodic=False, rotate=True, mask=None):
    """Per-cell mean of the sampled orientation distances, (A, B); cells outside ``mask`` are 0."""
    return _masked(_data(i1s, img, u, z, float(s), sym, periodic, rotate, False), mask)


def data_grad(i1s, img, u, z, s, sym, periodic=False, rotate=True):
    """Per-cell data values and the gradient of their sum w.r.t. ``u`` and ``z``."""
    return _data(i1s, img, u, z, float(s), sym, periodic, rotate, True)


def data_cells_pre(i1s, qh, z, sym, rotate=True, mask=None):
    """As :func:`data_cells` with the warped target samples ``qh`` precomputed."""
    return _masked(_data(i1s, None, None, z, 1.0, sym, False, rotate, False, pre=qh), mask)


def data_grad_pre(i1s, qh, z, sym, rotate=True):
    """Per-cell data values and their ``z`` gradient for precomputed target samples."""
    return _data(i1s, None, None, z, 1.0, sym, False, rotate, True, pre=qh)


def target_samples(img, u, s, m, periodic=False):
    """Normalized target quaternions ``I2(x + u(x))`` at the cell samples, (A, B, m, m, 4)."""
    Q, nQ, _, _ = _target(img, u, float(s), sample_offsets(int(m)), periodic)
    return Q / nQ[..., None]


def _zreg(z, w, m, want_grad):
    t = sample_offsets(m)
    zx = _sample_zx(z, t)
    diff = zx - w[:, :, None, None]
    n = np.sqrt(np.sum(diff * diff, axis=(-2, -1)))
    tv1 = n.mean(axis=(2, 3))
    a = 1.0 + zx[..., 0, 0]
    d = 1.0 + zx[..., 1, 1]
    b = zx[..., 0, 1]
    c = zx[..., 1, 0]
    det = a * d - b * c
    feas = det > 0
    safe = np.where(feas, det, 1.0)
    f = np.where(feas, 1.0 / safe + safe, SENTINEL)
    bar = f.mean(axis=(2, 3))
    ninf = int(np.count_nonzero(~feas))
    if not want_grad:
        return tv1, bar, ninf
    inv = 1.0 / (m * m)
    ok = n > _TINY
    G = np.where(ok[..., None, None], diff / np.where(ok, n, 1.0)[..., None, None], 0.0) * inv
    gz_tv1 = _zx_adjoint(G, t)
    gw_tv1 = -G.sum(axis=(2, 3))
    fp = np.where(feas, 1.0 - 1.0 / (safe * safe), 0.0) * inv
    Gb = np.empty(zx.shape)
    Gb[..., 0, 0] = fp * d
    Gb[..., 1, 1] = fp * a
    Gb[..., 0, 1] = -fp * c
    Gb[..., 1, 0] = -fp * b
    gz_bar = _zx_adjoint(Gb, t)
    return tv1, bar, ninf, gz_tv1, gw_tv1, gz_bar


def zreg_cells(z, w, m):
    """Per-cell TV1 (mean ``||z(x) - w||_F``) and barrier (mean ``f(det(I + z(x)))``)."""
    return _zreg(z, w, int(m), False)


def zreg_grad(z, w, m):
    """As :func:`zreg_cells` plus gradients of the per-cell sums."""
    return _zreg(z, w, int(m), True)
