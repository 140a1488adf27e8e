"""ADMM with line-searched block descent and a coarse-to-fine driver."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .energy import (
    DualVariables,
    Energy,
    EnergyBreakdown,
    EnergyParams,
    SplitVariables,
    cell_centre,
    forward_differences,
    node_sum,
    parallel_part,
    residual_c,
    residual_g,
    node_differences,
    residual_h,
)
from .field import DisplacementField, OrientationImage, TensorField, prolongate

__all__ = [
    "FlowState",
    "LineSearchConfig",
    "LevelSpec",
    "SolverConfig",
    "ConvergenceTrace",
    "SolveResult",
    "MonotonicityError",
    "line_search",
    "line_search_batch",
    "minimize_u",
    "minimize_w",
    "minimize_z",
    "minimize_omega",
    "admm_step",
    "reinitialize",
    "default_levels",
    "solve_level",
    "solve_multilevel",
]

log = logging.getLogger(__name__)


class MonotonicityError(AssertionError):
    """A block minimizer increased the augmented Lagrangian."""


@dataclass
class FlowState:
    """Primal and dual variables of one level (solver-owned, mutable arrays)."""

    u: np.ndarray
    w: np.ndarray
    z: np.ndarray
    omega: np.ndarray
    lam_h: np.ndarray
    lam_g: np.ndarray
    lam_c: np.ndarray | None
    s: float
    level: int = 0

    @classmethod
    def zeros(cls, A: int, B: int, s: float, coupled: bool = False, level: int = 0) -> "FlowState":
        sp = SplitVariables.zeros(A, B)
        du = DualVariables.zeros(A, B, coupled)
        return cls(np.zeros((A + 1, B + 1, 2)), np.zeros((A, B, 2, 2)), sp.z, sp.omega,
                   du.lam_h, du.lam_g, du.lam_c, float(s), level)

    @property
    def shape(self) -> tuple[int, int]:
        return self.w.shape[0], self.w.shape[1]

    @property
    def displacement(self) -> DisplacementField:
        return DisplacementField(self.s, self.u.copy())

    @property
    def tensor(self) -> TensorField:
        return TensorField(self.s, self.w.copy())

    @property
    def split(self) -> SplitVariables:
        return SplitVariables(self.z, self.omega)

    @property
    def dual(self) -> DualVariables:
        return DualVariables(self.lam_h, self.lam_g, self.lam_c)

    def copy(self) -> "FlowState":
        return FlowState(self.u.copy(), self.w.copy(), self.z.copy(), self.omega.copy(), self.lam_h.copy(),
                         self.lam_g.copy(), None if self.lam_c is None else self.lam_c.copy(), self.s, self.level)


@dataclass(frozen=True)
class LineSearchConfig:
    """Quadratic-interpolation line search settings.

    ``h_rel`` sets the stencil offset ``h = h_rel (1 + ||x||_inf)`` measured in
    the variable space; ``max_step`` caps ``tau ||d||_inf`` (``None`` means
    "use the block default": one cell for ``u``, 1 for ``w`` and ``z``).
    """

    r_max: int = 10
    h_rel: float = 1e-3
    sigma: float = 0.5
    max_step: float | None = None

    def __post_init__(self):
        if not 0 < self.sigma < 1:
            raise ValueError("sigma must lie in (0, 1)")
        if self.r_max < 1:
            raise ValueError("r_max must be positive")


@dataclass(frozen=True)
class LevelSpec:
    s: float
    m: int
    iterations: int
    mu: float


@dataclass(frozen=True)
class SolverConfig:
    params: EnergyParams = EnergyParams()
    levels: tuple[LevelSpec, ...] = ()
    line_search: LineSearchConfig = LineSearchConfig()
    k_max: int = 5
    rotate: bool = True
    check_monotone: bool = False

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(self.levels))
        for a, b in zip(self.levels, self.levels[1:]):
            if abs(b.s * 2 - a.s) > 1e-12:
                raise ValueError("consecutive levels must halve the scale")
            if b.m != max(a.m // 2, 2):
                raise ValueError("sampling sizes must follow m_next = max(m/2, 2)")


@dataclass
class ConvergenceTrace:
    """Per-iteration diagnostics of one solve."""

    level: list[int] = field(default_factory=list)
    breakdown: list[EnergyBreakdown] = field(default_factory=list)
    h_inf: list[float] = field(default_factory=list)
    g_inf: list[float] = field(default_factory=list)
    failures: list[int] = field(default_factory=list)
    accepted: list[int] = field(default_factory=list)
    # L_mu before/after every primal block call (recorded when monotonicity checks are on)
    block_values: list[tuple[str, float, float]] = field(default_factory=list)

    def __len__(self):
        return len(self.breakdown)

    def rows(self):
        for k, b in enumerate(self.breakdown):
            yield (k, self.level[k], b.data, b.tv1, b.tv2, b.barrier, b.penalty, self.h_inf[k], self.g_inf[k],
                   b.total)


@dataclass
class _Counter:
    accepted: int = 0
    failed: int = 0


# ---------------------------------------------------------------------------
# line search


def line_search(f: Callable[[np.ndarray], float], x, d, cfg: LineSearchConfig = LineSearchConfig(),
                max_step: float | None = None, fx: float | None = None) -> float:
    """Quadratic-interpolation line search along ``d`` from ``x``.

    Fits ``q(t) = a t^2/2 + b t + c`` through ``f`` at ``x - h d, x, x + h d``,
    starts from ``tau = min(|b|/|a|, cap)`` and backtracks by ``sigma`` until
    ``f`` strictly decreases; returns 0 if that does not happen within
    ``r_max`` trials or if ``a == 0``.
    """
    x = np.asarray(x, dtype=float)
    d = np.asarray(d, dtype=float)
    f0 = f(x) if fx is None else fx
    tau = line_search_batch(lambda t, active: np.array([f(x + t[0] * d)]), np.array([f0]),
                            np.array([np.max(np.abs(d), initial=0.0)]),
                            np.array([np.max(np.abs(x), initial=0.0)]), cfg, max_step)
    return float(tau[0])


def line_search_batch(phi, f0, dnorm, xnorm, cfg: LineSearchConfig, max_step=None, counter=None):
    """Independent line searches for ``G`` decoupled groups at once.

    Parameters
    ----------
    phi : callable
        ``phi(tau, active)`` with ``tau`` of shape ``(G,)`` returns the ``G``
        group objectives at the trial point ``x + tau_g d_g``; only entries
        flagged in the boolean ``active`` are used.
    f0 : ndarray (G,)
        Objectives at ``tau = 0``.
    dnorm, xnorm : ndarray (G,)
        ``||d_g||_inf`` and ``||x_g||_inf``; groups with ``dnorm == 0`` are
        stationary and keep ``tau = 0``.
    """
    if max_step is None:
        max_step = cfg.max_step
    cap = np.inf if max_step is None else max_step
    live = dnorm > 0
    tau = np.zeros_like(f0)
    if not np.any(live):
        return tau
    dn = np.where(live, dnorm, 1.0)
    h = np.where(live, cfg.h_rel * (1.0 + xnorm) / dn, 0.0)
    fm = phi(-h, live)
    fp = phi(h, live)
    hh = np.where(live, h, 1.0)
    a = (fm - 2.0 * f0 + fp) / (hh * hh)
    b = (fm - fp) / (2.0 * hh)
    # curvature indistinguishable from rounding in the stencil values counts as a == 0
    noise = 8.0 * np.finfo(float).eps * (np.abs(fm) + np.abs(f0) + np.abs(fp))
    ok_a = live & (np.abs(fm - 2.0 * f0 + fp) > noise) & np.isfinite(a) & np.isfinite(b)
    t0 = np.where(ok_a, np.minimum(np.abs(b) / np.where(ok_a, np.abs(a), 1.0), cap / dn), 0.0)
    active = ok_a & (t0 > 0)
    accepted = np.zeros_like(active)
    t = t0
    for _ in range(cfg.r_max):
        if not np.any(active):
            break
        ft = phi(np.where(active, t, 0.0), active)
        good = active & (ft < f0)
        accepted |= good
        active &= ~good
        t = np.where(active, cfg.sigma * t, t)
    tau = np.where(accepted, t, 0.0)
    if counter is not None:
        counter.accepted += int(np.count_nonzero(accepted))
        counter.failed += int(np.count_nonzero(live & ~accepted))
    return tau


# ---------------------------------------------------------------------------
# block minimizers


def _check(cfg, trace, name, before, energy, state):
    if not cfg.check_monotone:
        return
    after = energy.augmented_lagrangian(state)
    if trace is not None:
        trace.block_values.append((name, before, after))
    if after > before + 1e-12 * max(1.0, abs(before)):
        raise MonotonicityError(f"{name}-block increased L_mu from {before!r} to {after!r}")


def _before(cfg, trace, energy, state):
    return energy.augmented_lagrangian(state) if cfg.check_monotone else None


def minimize_u(state: FlowState, energy: Energy, cfg: SolverConfig, counter=None, trace=None) -> FlowState:
    """Parity-decoupled steepest descent in ``u``.

    Each sweep visits the four node classes ``(i mod 2, j mod 2)``; the four
    cells around a node touch no other node of its class, so every node runs
    its own line search on the sum of its adjacent cell terms.
    """
    before = _before(cfg, trace, energy, state)
    A, B = state.shape
    ii, jj = np.meshgrid(np.arange(A + 1), np.arange(B + 1), indexing="ij")
    cap = cfg.line_search.max_step if cfg.line_search.max_step is not None else state.s
    shift = state.z + state.lam_h / energy.params.mu
    for _ in range(cfg.k_max):
        for l1 in (0, 1):
            for l2 in (0, 1):
                mask = (ii % 2 == l1) & (jj % 2 == l2)
                data = energy.data_grad(state.u, state.z)
                g = energy.grad_u(state, data=data)
                d = np.where(mask[..., None], -g, 0.0)
                u0 = state.u
                f0 = node_sum(energy.u_cells_from(data[0], u0, state, shift))[mask]
                dsel = d[mask]

                def phi(t, active, d=d, mask=mask, u0=u0):
                    tt = np.zeros(mask.shape)
                    tt[mask] = t
                    nm = np.zeros(mask.shape, dtype=bool)
                    nm[mask] = active
                    cm = nm[:-1, :-1] | nm[1:, :-1] | nm[:-1, 1:] | nm[1:, 1:]
                    ut = u0 + tt[..., None] * d
                    return node_sum(energy.u_cells(ut, state, cm, shift))[mask]

                tau = line_search_batch(phi, f0, np.max(np.abs(dsel), axis=-1),
                                        np.max(np.abs(u0[mask]), axis=-1), cfg.line_search, cap, counter)
                tt = np.zeros(mask.shape)
                tt[mask] = tau
                state.u = u0 + tt[..., None] * d
    _check(cfg, trace, "u", before, energy, state)
    return state


def minimize_w(state: FlowState, energy: Energy, cfg: SolverConfig, counter=None, trace=None) -> FlowState:
    """Checkerboard-decoupled steepest descent in ``w``."""
    before = _before(cfg, trace, energy, state)
    A, B = state.shape
    ii, jj = np.meshgrid(np.arange(A), np.arange(B), indexing="ij")
    cap = cfg.line_search.max_step if cfg.line_search.max_step is not None else 1.0
    use_tv1 = energy.params.alpha1 > 0
    for _ in range(cfg.k_max):
        for p in (0, 1):
            mask = (ii + jj) % 2 == p
            zr = energy.zreg_grad(state.z, state.w) if use_tv1 else None
            g = energy.grad_w(state, zreg=zr)
            d = np.where(mask[..., None, None], -g, 0.0)
            w0 = state.w
            f0 = energy.w_local(w0, state, tv1=zr[0] if use_tv1 else 0.0)[mask]

            def phi(t, active, d=d, mask=mask, w0=w0):
                tt = np.zeros(mask.shape)
                tt[mask] = t
                return energy.w_local(w0 + tt[..., None, None] * d, state)[mask]

            dsel = d[mask].reshape(-1, 4)
            tau = line_search_batch(phi, f0, np.max(np.abs(dsel), axis=-1),
                                    np.max(np.abs(w0[mask].reshape(-1, 4)), axis=-1), cfg.line_search, cap, counter)
            tt = np.zeros(mask.shape)
            tt[mask] = tau
            state.w = w0 + tt[..., None, None] * d
    _check(cfg, trace, "w", before, energy, state)
    return state


def minimize_z(state: FlowState, energy: Energy, cfg: SolverConfig, counter=None, trace=None) -> FlowState:
    """Per-cell descent in ``z`` alternating the data-term and the projected directions."""
    before = _before(cfg, trace, energy, state)
    cap = cfg.line_search.max_step if cfg.line_search.max_step is not None else 1.0
    pre = energy.warped_target(state.u)
    shift = node_differences(state.u, state.s) - state.lam_h / energy.params.mu
    A, B = state.shape
    for _ in range(cfg.k_max):
        for kind in ("perp", "par"):
            D, gz = energy.data_grad_pre(pre, state.u, state.z)
            zr = energy.zreg_grad(state.z, state.w)
            G, perp = energy.grad_z_parts(state, data=(D, None, gz), zreg=zr)
            d = -perp if kind == "perp" else -parallel_part(G, perp)
            z0 = state.z
            f0 = energy.z_cells_from(D, zr[0], zr[1], z0, state, shift).ravel()

            def phi(t, active, d=d, z0=z0):
                zt = z0 + t.reshape(A, B)[..., None, None] * d
                return energy.z_cells(zt, state, pre, active.reshape(A, B), shift).ravel()

            tau = line_search_batch(phi, f0, np.max(np.abs(d.reshape(A * B, 8)), axis=-1),
                                    np.max(np.abs(z0.reshape(A * B, 8)), axis=-1), cfg.line_search, cap, counter)
            state.z = z0 + tau.reshape(A, B)[..., None, None] * d
    _check(cfg, trace, "z", before, energy, state)
    return state


def minimize_omega(state: FlowState, energy: Energy, cfg: SolverConfig | None = None, trace=None) -> FlowState:
    """Closed-form ``omega`` update (grouped soft shrinkage)."""
    state.omega = energy.omega_prox(state)
    return state


def admm_step(state: FlowState, energy: Energy, cfg: SolverConfig, trace: ConvergenceTrace | None = None,
              counter: _Counter | None = None) -> FlowState:
    """One ADMM iteration: (u, w) block, (z, omega) block, dual ascent."""
    c = _Counter() if counter is None else counter
    a0, f0 = c.accepted, c.failed
    minimize_u(state, energy, cfg, c, trace)
    minimize_w(state, energy, cfg, c, trace)
    minimize_z(state, energy, cfg, c, trace)
    before = _before(cfg, trace, energy, state)
    minimize_omega(state, energy, cfg)
    _check(cfg, trace, "omega", before, energy, state)
    mu = energy.params.mu
    h = residual_h(state.u, state.z, state.s)
    g = residual_g(state.w, state.omega)
    state.lam_h = state.lam_h + mu * h
    state.lam_g = state.lam_g + mu * g
    if state.lam_c is not None:
        state.lam_c = state.lam_c + mu * residual_c(state.z, state.w)
    if trace is not None:
        trace.level.append(state.level)
        trace.breakdown.append(energy.breakdown(state))
        trace.h_inf.append(float(np.max(np.abs(h), initial=0.0)))
        trace.g_inf.append(float(np.max(np.abs(g), initial=0.0)))
        trace.accepted.append(c.accepted - a0)
        trace.failures.append(c.failed - f0)
    return state


# ---------------------------------------------------------------------------
# multilevel driver


def reinitialize(u: DisplacementField, coupled: bool, level: int) -> FlowState:
    """Feasible warm start from a displacement: ``h = 0``, ``g = 0``, zero duals."""
    A, B = u.shape
    st = FlowState.zeros(A, B, u.s, coupled, level)
    st.u = u.coeffs.copy()
    st.z = u.differences()
    st.w = cell_centre(st.z)
    st.omega = forward_differences(st.w)
    return st


def default_levels(a: int, b: int, base_iterations: int = 1000, mu0: float = 1.0, s_min: float = 1.0,
                   s0: float | None = None) -> tuple[LevelSpec, ...]:
    """Coarse-to-fine schedule.

    The coarsest scale is the largest power of two not exceeding
    ``max(a, b)/4`` that divides both sides (unless ``s0`` is given), the
    coarsest sampling size satisfies ``s0 m0 ~ max(a, b)``, and level ``l``
    gets ``(l + 1) * base_iterations`` iterations with ``mu_l = mu0 2^l``.
    """
    n = max(a, b)
    if s0 is None:
        s0 = 1.0
        while s0 * 2 <= n / 4 and a % (s0 * 2) == 0 and b % (s0 * 2) == 0:
            s0 *= 2
    if a % s0 or b % s0:
        raise ValueError(f"coarsest scale {s0} must divide {a} x {b}")
    m = max(int(round(n / s0)), 2)
    levels = []
    s, l = float(s0), 0
    while s >= s_min - 1e-12:
        levels.append(LevelSpec(s, m, (l + 1) * base_iterations, mu0 * 2.0 ** l))
        s /= 2
        m = max(m // 2, 2)
        l += 1
    return tuple(levels)


@dataclass
class SolveResult:
    u: DisplacementField
    state: FlowState
    trace: ConvergenceTrace
    snapshots: list[FlowState]
    failed_levels: list[int]

    @property
    def numerical_failure(self) -> bool:
        return bool(self.failed_levels)


def solve_level(I1, I2, spec: LevelSpec, cfg: SolverConfig, state: FlowState | None = None,
                trace: ConvergenceTrace | None = None, level: int = 0):
    """Run ``spec.iterations`` ADMM steps at one scale; returns ``(state, energy, counter)``."""
    params = cfg.params.with_(m=spec.m, mu=spec.mu)
    energy = Energy(I1, I2, spec.s, params, rotate=cfg.rotate)
    if state is None:
        state = FlowState.zeros(energy.A, energy.B, spec.s, params.coupled, level)
    counter = _Counter()
    for _ in range(spec.iterations):
        admm_step(state, energy, cfg, trace, counter)
    return state, energy, counter


def solve_multilevel(I1: OrientationImage, I2: OrientationImage, cfg: SolverConfig,
                     init: DisplacementField | None = None, callback=None) -> SolveResult:
    """Coarse-to-fine ADMM; returns the finest displacement with trace and snapshots."""
    if I1.group.name != I2.group.name:
        raise ValueError("images must share one symmetry group")
    if not cfg.levels:
        raise ValueError("solver config has no levels")
    a, b = I1.width, I1.height
    for spec in cfg.levels:
        if a % spec.s or b % spec.s:
            raise ValueError(f"scale {spec.s} does not divide the image size {a} x {b}")
    trace = ConvergenceTrace()
    snapshots: list[FlowState] = []
    failed: list[int] = []
    coupled = cfg.params.coupled
    state = None
    for l, spec in enumerate(cfg.levels):
        if state is None:
            if init is not None:
                state = reinitialize(init, coupled, l)
            else:
                A, B = int(a // spec.s), int(b // spec.s)
                state = FlowState.zeros(A, B, spec.s, coupled, l)
        else:
            state = reinitialize(prolongate(state.displacement, spec.s), coupled, l)
        state, energy, counter = solve_level(I1, I2, spec, cfg, state, trace, l)
        if counter.failed > 0 and counter.accepted == 0:
            failed.append(l)
        log.info("level %d (s=%g, m=%d, %d iterations): L=%.6g accepted=%d failed=%d", l, spec.s, spec.m,
                 spec.iterations, energy.augmented_lagrangian(state), counter.accepted, counter.failed)
        snapshots.append(state.copy())
        if callback is not None:
            callback(l, state, energy)
    return SolveResult(state.displacement, state, trace, snapshots, failed)
