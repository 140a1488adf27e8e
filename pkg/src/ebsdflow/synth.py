"""Synthetic orientation-map pairs with known ground-truth transformations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field import DisplacementField, OrientationImage, eval_displacement, eval_image, grad_displacement
from .kernels import _numpy as _k
from .orientation import AxisAngle, from_axis_angle, get_group, hamilton

__all__ = [
    "SyntheticInstance",
    "SQUARE_ORIENTATION",
    "node_points",
    "make_rotated_square",
    "make_tearing_square",
    "make_grain_image",
    "shear_field",
    "apply_ground_truth",
]

SQUARE_ORIENTATION = np.array([0.0, 1.0 / np.sqrt(2.0), 1.0 / np.sqrt(2.0), 0.0])
IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


@dataclass
class SyntheticInstance:
    """Reference image, deformed image and the transformation relating them.

    ``u_true`` is the displacement with ``I1(x) ~ R(x)^T I2(x + u(x))``;
    ``theta_true`` (optional) gives the true polar angle at points.
    ``square`` is ``(lo, hi)`` of the reference square when there is one.
    """

    I1: OrientationImage
    I2: OrientationImage
    u_true: DisplacementField
    name: str
    square: tuple[np.ndarray, np.ndarray] | None = None
    theta_true: object = None


def node_points(a: int, b: int) -> np.ndarray:
    """Image sample locations ``(i + 1/2, j + 1/2)``, shape (a+1, b+1, 2)."""
    ii, jj = np.meshgrid(np.arange(a + 1), np.arange(b + 1), indexing="ij")
    return np.stack([ii + 0.5, jj + 0.5], axis=-1)


def _rot(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


def _qz(angle):
    return from_axis_angle(AxisAngle((0.0, 0.0, 1.0), angle)).array


def _in_box(p, lo, hi):
    return np.all((p >= lo) & (p < hi), axis=-1)


def make_rotated_square(size: int = 64, angle: float = np.pi / 6, side: int | None = None,
                        q_square=SQUARE_ORIENTATION, group: str = "trivial") -> SyntheticInstance:
    """Centered square on an identity background, rigidly rotated in ``I2``.

    ``I2`` carries ``q(e3, angle) ⊙ q_square`` inside the rotated square and
    the unchanged background elsewhere; the ground truth is the rotation
    about the image centre.
    """
    if size < 32:
        raise ValueError("size must be at least 32")
    side = size // 2 if side is None else side
    c = np.array([size / 2.0, size / 2.0])
    lo, hi = c - side / 2.0, c + side / 2.0
    x = node_points(size, size)
    q_square = np.asarray(q_square, dtype=float)
    d1 = np.where(_in_box(x, lo, hi)[..., None], q_square, IDENTITY)
    R = _rot(angle)
    pre = c + (x - c) @ R  # R^T (x - c)
    rotated = hamilton(_qz(angle), q_square)
    d2 = np.where(_in_box(pre, lo, hi)[..., None], rotated, IDENTITY)
    A = R - np.eye(2)
    u = DisplacementField.from_function(lambda p: (p - c) @ A.T, 1.0, size, size)
    g = get_group(group)
    return SyntheticInstance(OrientationImage(d1, g), OrientationImage(d2, g), u, "rotated_square", (lo, hi),
                             lambda p: np.full(np.shape(p)[:-1], angle))


def make_tearing_square(size: int = 128, angle: float = np.pi / 6, margin: float = 8.0) -> SyntheticInstance:
    """Square whose left half turns by ``-angle`` and right half by ``+angle``.

    Each half rotates rigidly about its own centre; orientations become
    ``q(e3, -+angle) ⊙ (0, 1/sqrt2, 1/sqrt2, 0)``.  Where the rotated halves
    overlap in ``I2`` the left half is drawn on top.  Outside the square the
    ground-truth displacement ramps linearly to zero over ``margin`` pixels.
    """
    if size % 4:
        raise ValueError("size must be a multiple of 4")
    side = size // 2
    c = np.array([size / 2.0, size / 2.0])
    lo, hi = c - side / 2.0, c + side / 2.0
    cl = np.array([c[0] - side / 4.0, c[1]])
    cr = np.array([c[0] + side / 4.0, c[1]])
    left_box = (lo, np.array([c[0], hi[1]]))
    right_box = (np.array([c[0], lo[1]]), hi)
    x = node_points(size, size)
    d1 = np.where(_in_box(x, lo, hi)[..., None], SQUARE_ORIENTATION, IDENTITY)
    RL, RR = _rot(-angle), _rot(angle)
    qL = hamilton(_qz(-angle), SQUARE_ORIENTATION)
    qR = hamilton(_qz(angle), SQUARE_ORIENTATION)
    pre_l = cl + (x - cl) @ RL  # RL^T (x - cl)
    pre_r = cr + (x - cr) @ RR
    in_l = _in_box(pre_l, *left_box)
    in_r = _in_box(pre_r, *right_box) & ~in_l
    d2 = np.where(in_l[..., None], qL, np.where(in_r[..., None], qR, IDENTITY))

    def u_fn(p):
        p = np.asarray(p, dtype=float)
        q = np.clip(p, lo, hi)
        left = q[..., 0] < c[0]
        ul = (q - cl) @ (RL - np.eye(2)).T
        ur = (q - cr) @ (RR - np.eye(2)).T
        uq = np.where(left[..., None], ul, ur)
        dist = np.max(np.abs(p - q), axis=-1)
        ramp = np.clip(1.0 - dist / margin, 0.0, 1.0)
        # inside the square the field is the exact piecewise rotation
        return uq * ramp[..., None]

    u = DisplacementField.from_function(u_fn, 1.0, size, size)
    g = get_group("trivial")

    def theta(p):
        return np.where(np.asarray(p)[..., 0] < c[0], -angle, angle)

    return SyntheticInstance(OrientationImage(d1, g), OrientationImage(d2, g), u, "tearing_square", (lo, hi), theta)


def make_grain_image(size: int = 64, n_grains: int = 12, group: str = "432", seed: int = 0,
                     height: int | None = None) -> OrientationImage:
    """Voronoi grain map with uniformly random grain orientations."""
    rng = np.random.default_rng(seed)
    b = size if height is None else height
    centres = rng.uniform([0, 0], [size, b], size=(n_grains, 2))
    q = rng.normal(size=(n_grains, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    x = node_points(size, b)
    d2 = np.sum((x[:, :, None, :] - centres[None, None]) ** 2, axis=-1)
    return OrientationImage(q[np.argmin(d2, axis=-1)], get_group(group))


def shear_field(size: int, slip: float, s: float = 1.0, height: int | None = None) -> DisplacementField:
    """Simple shear: left border fixed, right border slides down by ``slip`` pixels."""
    b = size if height is None else height
    return DisplacementField.from_function(
        lambda p: np.stack([np.zeros(p.shape[:-1]), -slip * p[..., 0] / size], axis=-1), s, size, b)


def apply_ground_truth(I1: OrientationImage, u_true: DisplacementField, mode: str = "clamped",
                       iterations: int = 50) -> OrientationImage:
    """Forward-transform ``I1`` by ``phi = Id + u``: ``I2(phi(x)) = q(e3, theta(x)) ⊙ I1(x)``.

    ``I2`` is sampled at its nodes by inverting ``phi`` with a fixed-point
    iteration ``x <- y - u(x)``.  In periodic mode image and field continue
    periodically across the boundary.
    """
    if mode not in ("clamped", "periodic"):
        raise ValueError(f"mode must be 'clamped' or 'periodic', got {mode!r}")
    a, b = I1.width, I1.height
    periodic = mode == "periodic"
    period = np.array([a + 1.0, b + 1.0])
    size = np.array([float(a), float(b)])

    def fold(p):
        return np.clip(np.mod(p, period) if periodic else p, 0.0, size)

    y = node_points(a, b)
    x = y.copy()
    for _ in range(iterations):
        x = y - eval_displacement(u_true, fold(x))
    src = I1.with_boundary("periodic" if periodic else "clamp")
    q1 = eval_image(src, np.mod(x, period) if periodic else x, project=False)
    zx = grad_displacement(u_true, fold(x))
    c, sn, _, _ = _k._half_angle(zx)
    # q(e3, theta) ⊙ q = inverse of the back-rotation: swap the sign of sn
    q2 = _k._rotate(c, -sn, q1)
    return OrientationImage(q2, I1.group, "periodic" if periodic else "clamp")
