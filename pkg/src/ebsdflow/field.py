"""Quaternion-valued images, multiscale displacement and tensor fields, warping.

Geometry follows one convention throughout: the first array index is the
``x1`` (horizontal) coordinate and the second is ``x2``.  An image of width
``a`` and height ``b`` stores ``(a+1) x (b+1)`` samples located at the nodes
``(i + 1/2, j + 1/2)``; a field at scale ``s`` has ``(a/s + 1) x (b/s + 1)``
nodes at ``s (i, j)`` and ``(a/s) x (b/s)`` half-open cells
``[s i, s(i+1)) x [s j, s(j+1))``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import _numpy as _k
from .orientation import SymmetryGroup, get_group, minimal_angle_representative

__all__ = [
    "OrientationImage",
    "DisplacementField",
    "TensorField",
    "SampleGrid",
    "DegenerateInterpolationError",
    "bilinear_basis",
    "eval_image",
    "eval_displacement",
    "grad_displacement",
    "warp_rotation_aware",
    "prolongate",
]


class DegenerateInterpolationError(ValueError):
    """Raised when the weighted quaternion sum nearly cancels."""


def bilinear_basis(x) -> np.ndarray | float:
    """Tent function ``(1-|x1|)(1-|x2|)`` on ``[-1, 1]^2``, zero outside."""
    x = np.asarray(x, dtype=float)
    a1 = np.abs(x[..., 0])
    a2 = np.abs(x[..., 1])
    val = np.where((a1 <= 1) & (a2 <= 1), (1 - a1) * (1 - a2), 0.0)
    return float(val) if val.ndim == 0 else val


@dataclass(frozen=True, eq=False)
class OrientationImage:
    """Grid of orientation classes with a bilinear interpolant.

    Parameters
    ----------
    data : ndarray, shape (a+1, b+1, 4)
        Quaternion samples; normalized and reduced to minimal-angle
        representatives on construction.
    group : SymmetryGroup or str
    boundary : {"clamp", "periodic"}
        Extension used when evaluating outside the sample hull.
    """

    data: np.ndarray
    group: SymmetryGroup
    boundary: str = "clamp"

    def __post_init__(self):
        g = get_group(self.group) if isinstance(self.group, str) else self.group
        q = np.array(self.data, dtype=float)
        if q.ndim != 3 or q.shape[2] != 4 or q.shape[0] < 2 or q.shape[1] < 2:
            raise ValueError(f"image data must have shape (a+1, b+1, 4) with a, b >= 1; got {q.shape}")
        if self.boundary not in ("clamp", "periodic"):
            raise ValueError(f"unknown boundary mode {self.boundary!r}")
        n = np.linalg.norm(q, axis=-1, keepdims=True)
        if np.any(n < 1e-12):
            raise ValueError("image contains zero quaternions")
        # samples that are already unit length are kept bit-for-bit, which
        # makes construction idempotent
        q = np.where(np.abs(n - 1.0) <= 4 * np.finfo(float).eps, q, q / n)
        q = minimal_angle_representative(q, g)
        q.setflags(write=False)
        object.__setattr__(self, "data", q)
        object.__setattr__(self, "group", g)

    @property
    def width(self) -> int:
        return self.data.shape[0] - 1

    @property
    def height(self) -> int:
        return self.data.shape[1] - 1

    @property
    def periodic(self) -> bool:
        return self.boundary == "periodic"

    def with_boundary(self, boundary: str) -> "OrientationImage":
        return OrientationImage(self.data, self.group, boundary)

    def eval(self, x, project: bool = True, strict: bool = True) -> np.ndarray:
        """Interpolated orientation at points ``x`` (..., 2)."""
        return eval_image(self, x, project=project, strict=strict)


def eval_image(img: OrientationImage, x, project: bool = True, strict: bool = False) -> np.ndarray:
    """Evaluate the image interpolant at points ``x`` of shape (..., 2).

    With ``strict=True`` a near-cancelling weighted sum raises
    :class:`DegenerateInterpolationError`; otherwise the nearest node value is
    used.
    """
    x = np.asarray(x, dtype=float)
    data = img.data
    if strict:
        y = x.copy()
        if not img.periodic:
            y = np.clip(y, 0.5, [data.shape[0] - 0.5, data.shape[1] - 0.5])
        f = y - 0.5
        p = np.floor(f)
        r = f - p
        p0 = p.astype(np.intp)
        na, nb = data.shape[:2]
        if img.periodic:
            ix0, ix1 = p0[..., 0] % na, (p0[..., 0] + 1) % na
            iy0, iy1 = p0[..., 1] % nb, (p0[..., 1] + 1) % nb
        else:
            ix0, ix1 = np.clip(p0[..., 0], 0, na - 1), np.clip(p0[..., 0] + 1, 0, na - 1)
            iy0, iy1 = np.clip(p0[..., 1], 0, nb - 1), np.clip(p0[..., 1] + 1, 0, nb - 1)
        r1, r2 = r[..., 0, None], r[..., 1, None]
        Q = (
            (1 - r1) * (1 - r2) * data[ix0, iy0]
            + r1 * (1 - r2) * data[ix1, iy0]
            + (1 - r1) * r2 * data[ix0, iy1]
            + r1 * r2 * data[ix1, iy1]
        )
        if np.any(np.linalg.norm(Q, axis=-1) < 1e-12):
            raise DegenerateInterpolationError("weighted quaternion sum has norm below 1e-12")
    Q, nQ, _, _ = _k._interp(data, x, img.periodic)
    q = Q / nQ[..., None]
    if project:
        q = minimal_angle_representative(q, img.group)
    return q


@dataclass(frozen=True)
class SampleGrid:
    """Per-cell sampling points ``s (i + (2k+1)/(2m), j + (2l+1)/(2m))``."""

    m: int

    def __post_init__(self):
        if int(self.m) != self.m or self.m < 2:
            raise ValueError(f"sampling size m must be an integer >= 2, got {self.m!r}")

    @property
    def offsets(self) -> np.ndarray:
        return _k.sample_offsets(self.m)

    def points(self, s: float, A: int, B: int) -> np.ndarray:
        """Sample points, shape (A, B, m, m, 2)."""
        t = self.offsets
        x1 = s * (np.arange(A)[:, None, None, None] + t[None, None, :, None])
        x2 = s * (np.arange(B)[None, :, None, None] + t[None, None, None, :])
        return np.stack(np.broadcast_arrays(x1, x2), axis=-1)


def _cell_coords(x, s, A, B):
    """Half-open cell index and local coordinates for points ``x`` (..., 2)."""
    x = np.asarray(x, dtype=float)
    f = x / s
    i = np.clip(np.floor(f[..., 0]).astype(np.intp), 0, A - 1)
    j = np.clip(np.floor(f[..., 1]).astype(np.intp), 0, B - 1)
    return i, j, f[..., 0] - i, f[..., 1] - j


@dataclass(frozen=True, eq=False)
class DisplacementField:
    """Bilinear field ``u_s(x) = sum u_ij B(x/s - (i, j))`` with node coefficients."""

    s: float
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=float)
        if c.ndim != 3 or c.shape[2] != 2 or min(c.shape[:2]) < 2:
            raise ValueError(f"displacement coefficients must have shape (A+1, B+1, 2); got {c.shape}")
        if not self.s > 0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "coeffs", c)

    @property
    def shape(self) -> tuple[int, int]:
        """Number of cells ``(A, B)``."""
        return self.coeffs.shape[0] - 1, self.coeffs.shape[1] - 1

    @classmethod
    def zeros(cls, s: float, a: int, b: int) -> "DisplacementField":
        A, B = _cells(a, b, s)
        return cls(s, np.zeros((A + 1, B + 1, 2)))

    @classmethod
    def from_function(cls, fn, s: float, a: int, b: int) -> "DisplacementField":
        """Interpolate ``fn`` (vectorized over (..., 2) points) at the nodes."""
        A, B = _cells(a, b, s)
        nodes = s * np.stack(np.meshgrid(np.arange(A + 1), np.arange(B + 1), indexing="ij"), axis=-1)
        return cls(s, np.asarray(fn(nodes.astype(float)), dtype=float))

    def eval(self, x) -> np.ndarray:
        return eval_displacement(self, x)

    def grad(self, x) -> np.ndarray:
        return grad_displacement(self, x)

    def differences(self) -> np.ndarray:
        """Finite-difference coefficients ``z`` that make every ``h`` vanish, (A, B, 4, 2)."""
        u, s = self.coeffs, self.s
        z = np.empty((u.shape[0] - 1, u.shape[1] - 1, 4, 2))
        z[:, :, 0] = (u[1:, :-1] - u[:-1, :-1]) / s
        z[:, :, 1] = (u[1:, 1:] - u[:-1, 1:]) / s
        z[:, :, 2] = (u[:-1, 1:] - u[:-1, :-1]) / s
        z[:, :, 3] = (u[1:, 1:] - u[1:, :-1]) / s
        return z


def _cells(a, b, s):
    A, B = a / s, b / s
    if abs(A - round(A)) > 1e-9 or abs(B - round(B)) > 1e-9:
        raise ValueError(f"scale {s} does not divide the domain {a} x {b}")
    return int(round(A)), int(round(B))


@dataclass(frozen=True, eq=False)
class TensorField:
    """Piecewise-constant 2x2 matrices on the cells at scale ``s``."""

    s: float
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=float)
        if c.ndim != 4 or c.shape[2:] != (2, 2):
            raise ValueError(f"tensor coefficients must have shape (A, B, 2, 2); got {c.shape}")
        object.__setattr__(self, "coeffs", c)

    def eval(self, x) -> np.ndarray:
        A, B = self.coeffs.shape[:2]
        i, j, _, _ = _cell_coords(x, self.s, A, B)
        return self.coeffs[i, j]


def eval_displacement(u: DisplacementField, x) -> np.ndarray:
    """``u_s(x)``; points outside the node hull use the nearest cell's bilinear form."""
    A, B = u.shape
    i, j, t1, t2 = _cell_coords(x, u.s, A, B)
    c = u.coeffs
    t1 = t1[..., None]
    t2 = t2[..., None]
    return (
        c[i, j] * (1 - t1) * (1 - t2)
        + c[i + 1, j] * t1 * (1 - t2)
        + c[i, j + 1] * (1 - t1) * t2
        + c[i + 1, j + 1] * t1 * t2
    )


def _zx_at(z, s, x):
    """Piecewise-bilinear gradient reconstruction ``z_s(x)`` at points ``x``."""
    A, B = z.shape[:2]
    i, j, t1, t2 = _cell_coords(x, s, A, B)
    zc = z[i, j]
    out = np.empty(np.shape(t1) + (2, 2))
    out[..., :, 0] = zc[..., 0, :] * (1 - t2)[..., None] + zc[..., 1, :] * t2[..., None]
    out[..., :, 1] = zc[..., 2, :] * (1 - t1)[..., None] + zc[..., 3, :] * t1[..., None]
    return out


def grad_displacement(u: DisplacementField, x) -> np.ndarray:
    """Jacobian ``du_c/dx_d`` at points ``x``, shape (..., 2, 2) indexed ``[c, d]``."""
    return _zx_at(u.differences(), u.s, x)


def warp_rotation_aware(img2: OrientationImage, u: DisplacementField, z=None, naive: bool = False,
                        points=None):
    """Back-transform ``img2`` onto the source nodes.

    Evaluates ``conj(q(e3, theta)) ⊙ I2(x + u(x))`` at the image nodes
    ``(i + 1/2, j + 1/2)`` of a source image with the same cell layout as
    ``u`` (or at explicit ``points``), where ``theta`` is the polar angle of
    ``I + z(x)``.  ``z`` defaults to the finite differences of ``u``.  With
    ``naive=True`` the quaternion factor is omitted.

    Returns
    -------
    image : OrientationImage or ndarray
        An image when evaluating at the nodes, otherwise the raw quaternions.
    n_infeasible : int
        Number of evaluation points with ``det(I + z(x)) <= 0``.
    """
    if points is None:
        a = int(round(u.shape[0] * u.s))
        b = int(round(u.shape[1] * u.s))
        nodes = np.stack(np.meshgrid(np.arange(a + 1), np.arange(b + 1), indexing="ij"), axis=-1) + 0.5
        x = nodes.astype(float)
    else:
        x = np.asarray(points, dtype=float)
    y = x + eval_displacement(u, x)
    Q, nQ, _, _ = _k._interp(img2.data, y, img2.periodic)
    q = Q / nQ[..., None]
    zarr = u.differences() if z is None else np.asarray(z, dtype=float)
    zx = _zx_at(zarr, u.s, x)
    det = (1 + zx[..., 0, 0]) * (1 + zx[..., 1, 1]) - zx[..., 0, 1] * zx[..., 1, 0]
    n_inf = int(np.count_nonzero(det <= 0))
    if not naive:
        c, sn, _, _ = _k._half_angle(zx)
        q = _k._rotate(c, sn, q)
    if points is None:
        return OrientationImage(q, img2.group, img2.boundary), n_inf
    return q, n_inf


def prolongate(u_coarse: DisplacementField, s_new: float) -> DisplacementField:
    """Resample a coarse field on the grid with half the scale (same interpolant)."""
    if abs(s_new * 2 - u_coarse.s) > 1e-12 * u_coarse.s:
        raise ValueError(f"prolongation requires s_new = s/2; got s = {u_coarse.s}, s_new = {s_new}")
    A, B = u_coarse.shape
    c = u_coarse.coeffs
    fine = np.empty((2 * A + 1, 2 * B + 1, 2))
    fine[::2, ::2] = c
    fine[1::2, ::2] = 0.5 * (c[:-1] + c[1:])
    fine[::2, 1::2] = 0.5 * (c[:, :-1] + c[:, 1:])
    fine[1::2, 1::2] = 0.25 * (c[:-1, :-1] + c[1:, :-1] + c[:-1, 1:] + c[1:, 1:])
    return DisplacementField(s_new, fine)
