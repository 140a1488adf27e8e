"""Unit quaternions, crystal symmetry groups and orientation distances.

Quaternions are stored as arrays ``(..., 4)`` ordered ``(s, v1, v2, v3)``.
The :class:`UnitQuaternion` wrapper exists for scalar bookkeeping; every
function here also accepts plain arrays and broadcasts over leading axes.

Product convention
------------------
:func:`hamilton` uses ``(s1 s2 - v1.v2, s1 v2 + s2 v1 - v1 x v2)``.  With this
sign the axis-angle matrix satisfies ``R(q1 ⊙ q2) = R(q2) R(q1)`` and a point
is rotated by ``p -> conj(q) ⊙ (0, p) ⊙ q``.  Equivalently ``q -> R(q).T`` is a
group homomorphism.  Symmetry elements act by right multiplication
``q ⊙ S`` and frame rotations by left multiplication, so all model formulas
are consistent under this single convention.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = [
    "UnitQuaternion",
    "AxisAngle",
    "SymmetryGroup",
    "hamilton",
    "conj",
    "from_axis_angle",
    "to_axis_angle",
    "to_matrix",
    "quat_to_matrix",
    "rotate_points",
    "dist_s3_mod",
    "misorientation_deg",
    "project_s3",
    "minimal_angle_representative",
    "get_group",
]

UNIT_TOL = 1e-12


@dataclass(frozen=True)
class UnitQuaternion:
    """A unit quaternion ``(s, v)``; normalized on construction."""

    s: float
    v: tuple[float, float, float]

    def __post_init__(self):
        q = np.array([self.s, *self.v], dtype=float)
        n = np.linalg.norm(q)
        if not n > 0:
            raise ValueError("cannot build a unit quaternion from the zero vector")
        q /= n
        object.__setattr__(self, "s", float(q[0]))
        object.__setattr__(self, "v", (float(q[1]), float(q[2]), float(q[3])))

    @classmethod
    def from_array(cls, q) -> "UnitQuaternion":
        q = np.asarray(q, dtype=float)
        return cls(q[0], (q[1], q[2], q[3]))

    @property
    def array(self) -> np.ndarray:
        return np.array([self.s, *self.v])

    def __array__(self, dtype=None, copy=None):
        return self.array if dtype is None else self.array.astype(dtype)

    def conj(self) -> "UnitQuaternion":
        return UnitQuaternion(self.s, (-self.v[0], -self.v[1], -self.v[2]))

    def __neg__(self) -> "UnitQuaternion":
        return UnitQuaternion(-self.s, (-self.v[0], -self.v[1], -self.v[2]))


@dataclass(frozen=True)
class AxisAngle:
    """Rotation axis ``r`` (unit 3-vector) and angle ``theta`` in ``[0, 2pi)``."""

    r: tuple[float, float, float]
    theta: float

    def __post_init__(self):
        r = np.asarray(self.r, dtype=float)
        if r.shape != (3,) or abs(np.linalg.norm(r) - 1.0) > 1e-12:
            raise ValueError(f"rotation axis must be a unit 3-vector, got {self.r!r}")
        object.__setattr__(self, "r", tuple(float(c) for c in r))
        object.__setattr__(self, "theta", float(self.theta) % (2 * np.pi))


def _wrap(result, *inputs):
    if all(isinstance(q, UnitQuaternion) for q in inputs):
        return UnitQuaternion.from_array(result)
    return result


def hamilton(q1, q2):
    """Quaternion product ``q1 ⊙ q2`` (broadcasting over leading axes)."""
    a = np.asarray(q1, dtype=float)
    b = np.asarray(q2, dtype=float)
    s1, v1 = a[..., 0], a[..., 1:]
    s2, v2 = b[..., 0], b[..., 1:]
    s = s1 * s2 - np.sum(v1 * v2, axis=-1)
    v = s1[..., None] * v2 + s2[..., None] * v1 - np.cross(v1, v2)
    return _wrap(np.concatenate([s[..., None], v], axis=-1), q1, q2)


def conj(q):
    a = np.asarray(q, dtype=float)
    out = a * np.array([1.0, -1.0, -1.0, -1.0])
    return _wrap(out, q)


def from_axis_angle(a: AxisAngle) -> UnitQuaternion:
    r = np.asarray(a.r)
    half = 0.5 * a.theta
    return UnitQuaternion(np.cos(half), tuple(r * np.sin(half)))


def to_axis_angle(q) -> AxisAngle:
    """Axis-angle form of ``q``; the identity maps to ``(e3, 0)``."""
    a = np.asarray(q, dtype=float)
    a = a / np.linalg.norm(a)
    nv = np.linalg.norm(a[1:])
    if nv < 1e-15:
        return AxisAngle((0.0, 0.0, 1.0), 0.0)
    theta = 2.0 * np.arctan2(nv, a[0])
    return AxisAngle(tuple(a[1:] / nv), theta)


def to_matrix(a: AxisAngle) -> np.ndarray:
    """Rotation matrix ``R(r, theta)`` in the axis-angle form."""
    r1, r2, r3 = a.r
    c, s = np.cos(a.theta), np.sin(a.theta)
    t = 1.0 - c
    return np.array(
        [
            [t * r1 * r1 + c, t * r1 * r2 - r3 * s, t * r1 * r3 + r2 * s],
            [t * r1 * r2 + r3 * s, t * r2 * r2 + c, t * r2 * r3 - r1 * s],
            [t * r1 * r3 - r2 * s, t * r2 * r3 + r1 * s, t * r3 * r3 + c],
        ]
    )


def quat_to_matrix(q) -> np.ndarray:
    """Matrix of the rotation identified with ``q`` (``q(r,θ) ↔ R(r,θ)``)."""
    return to_matrix(to_axis_angle(q))


def rotate_points(q, p) -> np.ndarray:
    """Rotate points ``p`` (..., 3) by ``R(q)`` via ``conj(q) ⊙ (0,p) ⊙ q``."""
    p = np.asarray(p, dtype=float)
    pq = np.concatenate([np.zeros(p.shape[:-1] + (1,)), p], axis=-1)
    qa = np.asarray(q, dtype=float)
    return hamilton(hamilton(conj(qa), pq), qa)[..., 1:]


def _elements(g) -> np.ndarray:
    return g.elements if isinstance(g, SymmetryGroup) else np.asarray(g, dtype=float)


def dist_s3_mod(q1, q2, g) -> np.ndarray | float:
    """Distance on ``S^3 / S``: ``min_S arccos |<q1 ⊙ S, q2>|``.

    Returned in radians without the ``2 sqrt 2`` factor of the SO(3) metric.
    """
    a = np.asarray(q1, dtype=float)
    b = np.asarray(q2, dtype=float)
    elems = _elements(g)
    # <q1 ⊙ S, q2> = <S, conj(q1) ⊙ q2>
    # both argument orders agree mathematically; taking the larger cosine of
    # the two makes the floating-point result exactly symmetric
    c = np.maximum(np.max(np.abs(hamilton(conj(a), b) @ elems.T), axis=-1),
                   np.max(np.abs(hamilton(conj(b), a) @ elems.T), axis=-1))
    d = np.arccos(np.clip(c, 0.0, 1.0))
    return float(d) if np.ndim(d) == 0 else d


def misorientation_deg(q1, q2, g) -> np.ndarray | float:
    """SO(3) rotation angle between the classes, in degrees."""
    return np.degrees(2.0 * np.asarray(dist_s3_mod(q1, q2, g)))


def project_s3(q, g=None):
    """Normalize a nonzero 4-vector; with a group, reduce to the min-angle class member."""
    a = np.asarray(q, dtype=float)
    n = np.linalg.norm(a, axis=-1, keepdims=True)
    if np.any(n <= 0):
        raise ValueError("cannot project the zero vector onto S^3")
    out = a / n
    if g is not None:
        out = minimal_angle_representative(out, g)
    return _wrap(out, q)


def minimal_angle_representative(q, g):
    """Class member ``q ⊙ S`` with the smallest rotation angle.

    Ties (within 1e-12 in the scalar part) resolve to the lexicographically
    smallest ``(s, v1, v2, v3)``.
    """
    a = np.asarray(q, dtype=float)
    elems = _elements(g)
    cands = hamilton(a[..., None, :], elems)  # (..., n, 4)
    # rotation angle is minimal where |s| is maximal; use the +s sign of each
    sgn = np.where(cands[..., :1] < 0, -1.0, 1.0)
    cands = cands * sgn
    smax = cands[..., 0].max(axis=-1, keepdims=True)
    tied = cands[..., 0] >= smax - 1e-12
    flat = cands.reshape(-1, cands.shape[-2], 4)
    tflat = tied.reshape(-1, cands.shape[-2])
    out = np.empty((flat.shape[0], 4))
    for n in range(flat.shape[0]):
        c = flat[n][tflat[n]]
        # at s == 0 both signs have the minimal angle pi
        c = np.concatenate([c, -c[np.abs(c[:, 0]) <= 1e-12]])
        keys = np.round(c, 12)
        order = np.lexsort(keys[:, ::-1].T)
        out[n] = c[order[0]]
    out = out.reshape(a.shape)
    return _wrap(out, q)


@dataclass(frozen=True, eq=False)
class SymmetryGroup:
    """Finite set of unit quaternions closed under ``⊙`` and negation."""

    name: str
    elements: np.ndarray

    def __len__(self):
        return len(self.elements)

    def __iter__(self):
        return (UnitQuaternion.from_array(e) for e in self.elements)

    @classmethod
    def from_generators(cls, name: str, generators) -> "SymmetryGroup":
        """Close ``{±1} ∪ generators`` under multiplication by fixpoint iteration."""
        elems = np.array([[1.0, 0, 0, 0], [-1.0, 0, 0, 0]])
        for gq in generators:
            gq = np.asarray(gq, dtype=float)
            elems = _merge(elems, np.stack([gq, -gq]))
        while True:
            p = hamilton(elems[:, None, :], elems[None, :, :]).reshape(-1, 4)
            grown = _merge(elems, p / np.linalg.norm(p, axis=-1, keepdims=True))
            if len(grown) == len(elems):
                break
            elems = grown
        arr = np.array(elems)
        arr[np.abs(arr) < 1e-15] = 0.0
        return cls(name, arr)


def _merge(elems, cands, tol=1e-9) -> np.ndarray:
    """Append the candidates not yet present (up to ``tol``), keeping first-seen order."""
    out = list(elems)
    for q in cands:
        if not np.any(np.max(np.abs(np.asarray(out) - q), axis=-1) < tol):
            out.append(q)
    return np.array(out)


def _q(axis, deg):
    return from_axis_angle(AxisAngle(tuple(axis), np.radians(deg))).array


_GENERATORS = {
    "trivial": [],
    "622": [_q((0, 0, 1), 60), _q((1, 0, 0), 180)],
    "422": [_q((0, 0, 1), 90), _q((1, 0, 0), 180)],
    "432": [_q((0, 0, 1), 90), _q((1, 0, 0), 90)],
}

_ALIASES = {
    "1": "trivial",
    "-1": "trivial",
    "6/mmm": "622",
    "4/mmm": "422",
    "m-3m": "432",
    "m3m": "432",
}


@lru_cache(maxsize=None)
def get_group(name: str) -> SymmetryGroup:
    """Look up a proper rotation group by name or Laue-group alias."""
    key = _ALIASES.get(name, name)
    if key not in _GENERATORS:
        raise KeyError(f"unknown symmetry group {name!r}")
    return SymmetryGroup.from_generators(key, _GENERATORS[key])
