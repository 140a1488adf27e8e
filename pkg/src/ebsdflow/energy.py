"""Discrete energy, constraint residuals and the augmented Lagrangian.

The discrete energy at scale ``s`` is

    E_s = s^2 * sum_cells ( D + alpha1 TV1 + alpha2 TV2 + beta F )

and the augmented Lagrangian adds ``mu/2 * H`` with

    H = sum ||h + lam_h/mu||^2 + sum ||g + lam_g/mu||^2 (+ sum ||c + lam_c/mu||^2)

where ``h`` ties ``z`` to the node differences of ``u``, ``g`` ties ``omega``
to the forward differences of ``w`` and, for the TV2 variant only, ``c``
ties ``w`` to ``z`` at the cell centre.

Array layout (A x B cells):

    u      (A+1, B+1, 2)     w      (A, B, 2, 2)      z      (A, B, 4, 2)
    omega  (A, B, 2, 2, 2)   lam_h  (A, B, 4, 2)      lam_g  (A, B, 2, 2, 2)
    lam_c  (A, B, 2, 2)

Matrices are indexed ``[component, direction]`` so that ``z(x)[c, d]``
approximates ``du_c/dx_d``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from .field import OrientationImage, SampleGrid, eval_image
from .kernels import _numpy as _knp

__all__ = [
    "SplitVariables",
    "DualVariables",
    "EnergyParams",
    "EnergyBreakdown",
    "GradientUndefinedError",
    "barrier_f",
    "polar_angle",
    "data_term",
    "tv1_term",
    "tv2_term",
    "barrier_term",
    "node_differences",
    "residual_h",
    "residual_g",
    "residual_c",
    "node_sum",
    "Energy",
]

SENTINEL = kernels.SENTINEL


class GradientUndefinedError(ValueError):
    """The barrier is infinite at the evaluation point."""


@dataclass
class SplitVariables:
    """Splitting variables ``z`` (A, B, 4, 2) and ``omega`` (A, B, 2, 2, 2)."""

    z: np.ndarray
    omega: np.ndarray

    @classmethod
    def zeros(cls, A: int, B: int) -> "SplitVariables":
        return cls(np.zeros((A, B, 4, 2)), np.zeros((A, B, 2, 2, 2)))


@dataclass
class DualVariables:
    """Multipliers for ``h``, ``g`` and (TV2 only) the centre coupling ``c``."""

    lam_h: np.ndarray
    lam_g: np.ndarray
    lam_c: np.ndarray | None = None

    @classmethod
    def zeros(cls, A: int, B: int, coupled: bool = False) -> "DualVariables":
        return cls(np.zeros((A, B, 4, 2)), np.zeros((A, B, 2, 2, 2)), np.zeros((A, B, 2, 2)) if coupled else None)


@dataclass(frozen=True)
class EnergyParams:
    """Model weights.

    For ``variant="TV2"`` the first-order weight is forced to zero and the
    centre coupling constraint is switched on.
    """

    alpha1: float = 0.1
    alpha2: float = 0.5
    beta: float = 0.1
    mu: float = 1.0
    m: int = 2
    variant: str = "TGV"

    def __post_init__(self):
        if self.variant not in ("TGV", "TV2"):
            raise ValueError(f"variant must be 'TGV' or 'TV2', got {self.variant!r}")
        if self.variant == "TV2":
            object.__setattr__(self, "alpha1", 0.0)
        for name in ("alpha1", "alpha2", "beta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not self.mu > 0:
            raise ValueError("mu must be positive")
        if int(self.m) != self.m or self.m < 2:
            raise ValueError("sampling size m must be an integer >= 2")
        if self.variant == "TGV" and not (self.alpha1 > 0 and self.alpha2 > 0):
            raise ValueError("TGV requires alpha1 > 0 and alpha2 > 0")
        if self.variant == "TV2" and not self.alpha2 > 0:
            raise ValueError("TV2 requires alpha2 > 0")

    @property
    def coupled(self) -> bool:
        return self.variant == "TV2"

    def with_(self, **kw) -> "EnergyParams":
        return replace(self, **kw)


@dataclass(frozen=True)
class EnergyBreakdown:
    """Scaled energy terms; ``total`` is the augmented Lagrangian."""

    data: float
    tv1: float
    tv2: float
    barrier: float
    penalty: float
    energy: float
    total: float
    n_infeasible: int = 0

    @property
    def feasible(self) -> bool:
        return self.n_infeasible == 0


def barrier_f(x):
    """``1/x + x`` for ``x > 0`` and ``+inf`` otherwise."""
    x = np.asarray(x, dtype=float)
    pos = x > 0
    safe = np.where(pos, x, 1.0)
    out = np.where(pos, 1.0 / safe + safe, np.inf)
    return float(out) if out.ndim == 0 else out


def polar_angle(z, return_flag: bool = False):
    """Rotation angle of the polar factor of ``I + z`` for ``z`` of shape (..., 2, 2).

    Uses the quadrant-correct arctangent of ``(z21 - z12) / (z11 + z22 + 2)``.
    A zero denominator gives ``+-pi/2`` by the sign of the numerator (0 when
    the numerator vanishes too) and sets the degenerate flag.
    """
    z = np.asarray(z, dtype=float)
    num = z[..., 1, 0] - z[..., 0, 1]
    den = z[..., 0, 0] + z[..., 1, 1] + 2.0
    theta = np.arctan2(num, den)
    flag = den == 0
    if np.ndim(theta) == 0:
        theta, flag = float(theta), bool(flag)
    return (theta, flag) if return_flag else theta


def node_differences(u, s) -> np.ndarray:
    """The four scaled node differences of each cell, (A, B, 4, 2)."""
    u = np.asarray(u, dtype=float)
    A, B = u.shape[0] - 1, u.shape[1] - 1
    d1 = (u[1:] - u[:-1]) / s
    d2 = (u[:, 1:] - u[:, :-1]) / s
    out = np.empty((A, B, 4, 2))
    out[:, :, 0] = d1[:, :-1]
    out[:, :, 1] = d1[:, 1:]
    out[:, :, 2] = d2[:-1]
    out[:, :, 3] = d2[1:]
    return out


def residual_h(u, z, s) -> np.ndarray:
    """``h_k = z_k - (node difference)/s`` for the four differences, (A, B, 4, 2)."""
    return np.asarray(z, dtype=float) - node_differences(u, s)


def _cell_sq(r) -> np.ndarray:
    """Squared norm over the trailing (4, 2) axes."""
    r = r.reshape(r.shape[:2] + (8,))
    return np.einsum("abk,abk->ab", r, r)


def _h_adjoint(r, s) -> np.ndarray:
    """Gradient w.r.t. ``u`` of ``sum <r, h(u, z)>``."""
    A, B = r.shape[:2]
    g = np.zeros((A + 1, B + 1, 2))
    g[1:, :-1] -= r[:, :, 0] / s
    g[:-1, :-1] += r[:, :, 0] / s
    g[1:, 1:] -= r[:, :, 1] / s
    g[:-1, 1:] += r[:, :, 1] / s
    g[:-1, 1:] -= r[:, :, 2] / s
    g[:-1, :-1] += r[:, :, 2] / s
    g[1:, 1:] -= r[:, :, 3] / s
    g[1:, :-1] += r[:, :, 3] / s
    return g


def residual_g(w, omega) -> np.ndarray:
    """``g_k = omega_k - (forward difference of w)``; just ``omega_k`` on the last row/column."""
    w = np.asarray(w, dtype=float)
    g = np.array(omega, dtype=float, copy=True)
    g[:-1, :, 0] -= w[1:] - w[:-1]
    g[:, :-1, 1] -= w[:, 1:] - w[:, :-1]
    return g


def _g_adjoint(r) -> np.ndarray:
    """Gradient w.r.t. ``w`` of ``sum <r, g(w, omega)>``."""
    gw = np.zeros(r.shape[:2] + (2, 2))
    gw[1:] -= r[:-1, :, 0]
    gw[:-1] += r[:-1, :, 0]
    gw[:, 1:] -= r[:, :-1, 1]
    gw[:, :-1] += r[:, :-1, 1]
    return gw


def forward_differences(w) -> np.ndarray:
    """``omega`` making ``g`` vanish: forward differences, zero on the last row/column."""
    w = np.asarray(w, dtype=float)
    om = np.zeros(w.shape[:2] + (2, 2, 2))
    om[:-1, :, 0] = w[1:] - w[:-1]
    om[:, :-1, 1] = w[:, 1:] - w[:, :-1]
    return om


def cell_centre(z) -> np.ndarray:
    """``z(x)`` at the cell centres, (A, B, 2, 2); equals the cell average."""
    z = np.asarray(z, dtype=float)
    out = np.empty(z.shape[:2] + (2, 2))
    out[..., :, 0] = 0.5 * (z[:, :, 0] + z[:, :, 1])
    out[..., :, 1] = 0.5 * (z[:, :, 2] + z[:, :, 3])
    return out


def _centre_adjoint(r) -> np.ndarray:
    gz = np.empty(r.shape[:2] + (4, 2))
    gz[:, :, 0] = gz[:, :, 1] = 0.5 * r[..., :, 0]
    gz[:, :, 2] = gz[:, :, 3] = 0.5 * r[..., :, 1]
    return gz


def residual_c(z, w) -> np.ndarray:
    """TV2 coupling ``z(cell centre) - w``, (A, B, 2, 2)."""
    return cell_centre(z) - np.asarray(w, dtype=float)


def node_sum(cells) -> np.ndarray:
    """Sum per-cell values onto the (up to four) adjacent nodes, (A+1, B+1)."""
    A, B = cells.shape[:2]
    out = np.zeros((A + 1, B + 1) + cells.shape[2:])
    out[:-1, :-1] += cells
    out[1:, :-1] += cells
    out[:-1, 1:] += cells
    out[1:, 1:] += cells
    return out


def _sq(r, axes):
    return np.sum(r * r, axis=axes)


# ---------------------------------------------------------------------------
# per-cell evaluators on plain arrays


def data_term(i1s, img2, u, z, s, group, periodic=False, rotate=True) -> np.ndarray:
    """Per-cell data term, (A, B)."""
    sym = group.elements if hasattr(group, "elements") else np.asarray(group)
    return kernels.data_cells(i1s, img2, u, z, float(s), sym, periodic, rotate)


def tv1_term(z, w, m) -> np.ndarray:
    """Per-cell mean of ``||z(x) - w||_F`` over the samples, (A, B)."""
    return kernels.zreg_cells(z, w, m)[0]


def tv2_term(omega, s) -> np.ndarray:
    """Per-cell ``(||omega_1||_F^2 + ||omega_2||_F^2)^(1/2) / s``, (A, B)."""
    return np.sqrt(_sq(np.asarray(omega, dtype=float), (2, 3, 4))) / s


def barrier_term(z, m) -> tuple[np.ndarray, int]:
    """Per-cell mean of ``f(det(I + z(x)))`` (sentinel for infeasible samples) and infeasible count."""
    _, bar, ninf = kernels.zreg_cells(z, np.zeros(np.shape(z)[:2] + (2, 2)), m)
    return bar, ninf


class Energy:
    """Augmented Lagrangian of one level together with its block gradients.

    Parameters
    ----------
    I1, I2 : OrientationImage
        Reference and target images, sharing one symmetry group.
    s : float
        Cell size in pixels; must divide the width and height of ``I1``.
    params : EnergyParams
    rotate : bool
        Rotation-aware data term when true, naive transport otherwise.
    surrogate_target : ndarray, optional
        Switches to the convex quadratic surrogate used for verification:
        data ``mean 1/2 ||u(x) - T(x)||^2`` with ``T`` given at the samples
        (A, B, m, m, 2), squared TV1, squared TV2 and no barrier.
    """

    def __init__(self, I1: OrientationImage | None, I2: OrientationImage | None, s: float,
                 params: EnergyParams, rotate: bool = True, surrogate_target=None, shape=None):
        self.params = params
        self.s = float(s)
        self.m = int(params.m)
        self.rotate = bool(rotate)
        self.surrogate = surrogate_target is not None
        if self.surrogate:
            self.target = np.asarray(surrogate_target, dtype=float)
            self.A, self.B = self.target.shape[:2]
            return
        if I1.group.name != I2.group.name:
            raise ValueError("images must share one symmetry group")
        a, b = I1.width, I1.height
        A, B = a / s, b / s
        if abs(A - round(A)) > 1e-9 or abs(B - round(B)) > 1e-9:
            raise ValueError(f"scale {s} does not divide the image size {a} x {b}")
        self.A, self.B = int(round(A)), int(round(B))
        pts = SampleGrid(self.m).points(self.s, self.A, self.B)
        self.i1s = np.ascontiguousarray(eval_image(I1, pts, project=False))
        self.img2 = np.ascontiguousarray(I2.data)
        self.periodic = I2.periodic
        self.sym = np.ascontiguousarray(I1.group.elements)

    # -- raw terms -----------------------------------------------------------

    def data_cells(self, u, z, mask=None) -> np.ndarray:
        if self.surrogate:
            r = _knp._sample_u(u, _knp.sample_offsets(self.m)) - self.target
            return 0.5 * np.mean(np.sum(r * r, axis=-1), axis=(2, 3))
        return kernels.data_cells(self.i1s, self.img2, u, z, self.s, self.sym, self.periodic, self.rotate, mask)

    def data_grad(self, u, z):
        """Per-cell data and the gradient of their (unscaled) sum in ``u`` and ``z``."""
        if self.surrogate:
            t = _knp.sample_offsets(self.m)
            r = _knp._sample_u(u, t) - self.target
            D = 0.5 * np.mean(np.sum(r * r, axis=-1), axis=(2, 3))
            gu = _knp._node_adjoint(r / (self.m * self.m), t, np.shape(u))
            return D, gu, np.zeros(np.shape(z))
        return kernels.data_grad(self.i1s, self.img2, u, z, self.s, self.sym, self.periodic, self.rotate)

    def warped_target(self, u):
        """Warped target samples for a fixed ``u`` (``None`` for the surrogate)."""
        if self.surrogate:
            return None
        return kernels.target_samples(self.img2, u, self.s, self.m, self.periodic)

    def data_cells_pre(self, pre, u, z, mask=None):
        if pre is None:
            return self.data_cells(u, z, mask)
        return kernels.data_cells_pre(self.i1s, pre, z, self.sym, self.rotate, mask)

    def data_grad_pre(self, pre, u, z):
        """``(D, gz)`` for a fixed ``u`` whose target samples are ``pre``."""
        if pre is None:
            D, _, gz = self.data_grad(u, z)
            return D, gz
        return kernels.data_grad_pre(self.i1s, pre, z, self.sym, self.rotate)

    def zreg_cells(self, z, w):
        if self.surrogate:
            t = _knp.sample_offsets(self.m)
            d = _knp._sample_zx(z, t) - w[:, :, None, None]
            return np.mean(_sq(d, (-2, -1)), axis=(2, 3)), np.zeros(self.shape), 0
        return kernels.zreg_cells(z, w, self.m)

    def zreg_grad(self, z, w):
        if self.surrogate:
            t = _knp.sample_offsets(self.m)
            d = _knp._sample_zx(z, t) - w[:, :, None, None]
            G = 2.0 * d / (self.m * self.m)
            tv1 = np.mean(_sq(d, (-2, -1)), axis=(2, 3))
            return tv1, np.zeros(self.shape), 0, _knp._zx_adjoint(G, t), -G.sum(axis=(2, 3)), np.zeros(np.shape(z))
        return kernels.zreg_grad(z, w, self.m)

    def tv2_cells(self, omega) -> np.ndarray:
        if self.surrogate:
            return _sq(omega, (2, 3, 4)) / self.s
        return tv2_term(omega, self.s)

    @property
    def shape(self) -> tuple[int, int]:
        return self.A, self.B

    # -- full objective --------------------------------------------------------

    def penalty_cells(self, state, mu=None) -> np.ndarray:
        """Per-cell ``H`` contributions (without the ``mu/2`` factor)."""
        mu = self.params.mu if mu is None else mu
        H = _sq(residual_h(state.u, state.z, self.s) + state.lam_h / mu, (2, 3))
        H = H + _sq(residual_g(state.w, state.omega) + state.lam_g / mu, (2, 3, 4))
        if self.params.coupled:
            H = H + _sq(residual_c(state.z, state.w) + state.lam_c / mu, (2, 3))
        return H

    def breakdown(self, state) -> EnergyBreakdown:
        """All terms of the augmented Lagrangian at ``state``."""
        p = self.params
        s2 = self.s * self.s
        D = self.data_cells(state.u, state.z)
        tv1, bar, ninf = self.zreg_cells(state.z, state.w)
        tv2 = self.tv2_cells(state.omega)
        H = self.penalty_cells(state)
        data, t1, t2 = s2 * D.sum(), s2 * tv1.sum(), s2 * tv2.sum()
        barrier = s2 * bar.sum()
        energy = data + p.alpha1 * t1 + p.alpha2 * t2 + p.beta * barrier
        Hs = H.sum()
        return EnergyBreakdown(float(data), float(t1), float(t2), float(barrier), float(Hs),
                               float(energy), float(energy + 0.5 * p.mu * Hs), int(ninf))

    def augmented_lagrangian(self, state) -> float:
        return self.breakdown(state).total

    # -- gradients -------------------------------------------------------------

    def grad_u(self, state, data=None):
        """``dL/du`` (A+1, B+1, 2); ``data`` may pass a precomputed ``data_grad`` result."""
        mu = self.params.mu
        D, gu, _ = self.data_grad(state.u, state.z) if data is None else data
        r = residual_h(state.u, state.z, self.s) + state.lam_h / mu
        return self.s ** 2 * gu + mu * _h_adjoint(r, self.s)

    def grad_w(self, state, zreg=None):
        p = self.params
        mu = p.mu
        G = mu * _g_adjoint(residual_g(state.w, state.omega) + state.lam_g / mu)
        if p.alpha1 > 0:
            zr = self.zreg_grad(state.z, state.w) if zreg is None else zreg
            G = G + self.s ** 2 * p.alpha1 * zr[4]
        if p.coupled:
            G = G - mu * (residual_c(state.z, state.w) + state.lam_c / mu)
        return G

    def grad_z_parts(self, state, data=None, zreg=None):
        """``(grad, perp)`` with ``perp = dL/dz`` of the data term alone."""
        p = self.params
        mu = p.mu
        s2 = self.s ** 2
        _, _, gz_d = self.data_grad(state.u, state.z) if data is None else data
        zr = self.zreg_grad(state.z, state.w) if zreg is None else zreg
        perp = s2 * gz_d
        G = perp + s2 * (p.alpha1 * zr[3] + p.beta * zr[5])
        G = G + mu * (residual_h(state.u, state.z, self.s) + state.lam_h / mu)
        if p.coupled:
            G = G + mu * _centre_adjoint(residual_c(state.z, state.w) + state.lam_c / mu)
        return G, perp

    def grad_omega(self, state):
        p = self.params
        mu = p.mu
        om = state.omega
        if self.surrogate:
            reg = 2.0 * om / self.s
        else:
            n = np.sqrt(_sq(om, (2, 3, 4)))[..., None, None, None]
            reg = np.where(n > 1e-12, om / np.where(n > 1e-12, n, 1.0), 0.0) / self.s
        return self.s ** 2 * p.alpha2 * reg + mu * (residual_g(state.w, om) + state.lam_g / mu)

    def grad_block(self, block: str, state, split: bool = False):
        """Gradient of ``L_mu`` with respect to one block.

        ``block`` is one of ``"u"``, ``"w"``, ``"z"``, ``"omega"``.  For ``"z"``
        with ``split=True`` returns ``(grad, perp, par)`` where ``perp`` is the
        data-term gradient and ``par`` the component of ``grad`` orthogonal to
        it, per cell (``par = grad`` in cells with vanishing ``perp``).
        """
        if not self.surrogate:
            _, ninf = barrier_term(state.z, self.m)
            if ninf and self.params.beta > 0:
                raise GradientUndefinedError(f"barrier infinite at {ninf} samples")
        if block == "u":
            return self.grad_u(state)
        if block == "w":
            return self.grad_w(state)
        if block == "omega":
            return self.grad_omega(state)
        if block == "z":
            G, perp = self.grad_z_parts(state)
            return (G, perp, parallel_part(G, perp)) if split else G
        raise ValueError(f"unknown block {block!r}")

    # -- local objectives for the block minimizers -----------------------------

    def u_cells(self, u, state, mask=None, shift=None) -> np.ndarray:
        """Cell terms of ``L_mu`` that depend on ``u`` (only trusted inside ``mask``).

        ``shift`` may pass the fixed ``z + lam_h/mu``.
        """
        return self.u_cells_from(self.data_cells(u, state.z, mask), u, state, shift)

    def u_cells_from(self, D, u, state, shift=None) -> np.ndarray:
        mu = self.params.mu
        if shift is None:
            shift = state.z + state.lam_h / mu
        return self.s ** 2 * D + 0.5 * mu * _cell_sq(shift - node_differences(u, self.s))

    def w_local(self, w, state, tv1=None) -> np.ndarray:
        """Per cell: all terms of ``L_mu`` touching ``w_ij`` given that neighbours are held.

        Summing this over one checkerboard colour counts every ``w``-dependent
        term exactly once.
        """
        p = self.params
        mu = p.mu
        if tv1 is None:
            tv1 = self.zreg_cells(state.z, w)[0] if p.alpha1 > 0 else 0.0
        G = residual_g(w, state.omega) + state.lam_g / mu
        own = _sq(G, (3, 4))  # (A, B, 2)
        V = own[..., 0] + own[..., 1]
        V[1:] += own[:-1, :, 0]
        V[:, 1:] += own[:, :-1, 1]
        if p.coupled:
            V = V + _sq(residual_c(state.z, w) + state.lam_c / mu, (2, 3))
        return self.s ** 2 * p.alpha1 * tv1 + 0.5 * mu * V

    def z_cells(self, z, state, pre=None, mask=None, shift=None):
        """Per-cell terms of ``L_mu`` depending on ``z`` (each cell independent).

        ``shift`` may pass the fixed ``(node differences)/s - lam_h/mu``.
        """
        D = self.data_cells_pre(pre, state.u, z, mask)
        tv1, bar, _ = self.zreg_cells(z, state.w)
        return self.z_cells_from(D, tv1, bar, z, state, shift)

    def z_cells_from(self, D, tv1, bar, z, state, shift=None):
        p = self.params
        mu = p.mu
        if shift is None:
            shift = node_differences(state.u, self.s) - state.lam_h / mu
        V = self.s ** 2 * (D + p.alpha1 * tv1 + p.beta * bar)
        V = V + 0.5 * mu * _cell_sq(z - shift)
        if p.coupled:
            V = V + 0.5 * mu * _sq(residual_c(z, state.w) + state.lam_c / mu, (2, 3))
        return V

    def omega_prox(self, state) -> np.ndarray:
        """Exact minimizer of ``L_mu`` over ``omega`` (grouped soft shrinkage per cell)."""
        p = self.params
        mu = p.mu
        y = state.omega - (residual_g(state.w, state.omega) + state.lam_g / mu)
        if self.surrogate:
            return mu * y / (mu + 2.0 * p.alpha2 * self.s)
        return grouped_shrinkage(y, mu, p.alpha2 * self.s)


def parallel_part(G, perp) -> np.ndarray:
    """Per-cell projection of ``G`` onto the complement of ``perp`` (``G`` where ``perp`` vanishes)."""
    pp = _sq(perp, (2, 3))
    gp = np.sum(G * perp, axis=(2, 3))
    ok = pp > 1e-24
    coef = np.where(ok, gp / np.where(ok, pp, 1.0), 0.0)
    return G - coef[..., None, None] * perp


def grouped_shrinkage(y, mu: float, threshold: float) -> np.ndarray:
    """Minimizer of ``mu/2 ||x - y||^2 + threshold ||x||`` per cell (last three axes grouped)."""
    y = np.asarray(y, dtype=float)
    n = mu * np.sqrt(_sq(y, (-3, -2, -1)))[..., None, None, None]
    keep = n > threshold
    return np.where(keep, y * (1.0 - threshold / np.where(keep, n, 1.0)), 0.0)
