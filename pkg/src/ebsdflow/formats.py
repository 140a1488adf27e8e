"""Plain-text file formats: orientation grids, displacement fields, traces, PPM rasters.

Orientation grid (``EBSDGRID v1``)::

    EBSDGRID v1 <nx> <ny> <phase>
    i j q0 q1 q2 q3
    ...

``nx`` and ``ny`` count the stored samples along ``x1`` and ``x2`` (an image
of width ``a`` has ``nx = a + 1``).  Records are written row by row, ``i``
running fastest; the reader accepts any order but requires every cell
exactly once.  Lines starting with ``#`` and blank lines are ignored.

The displacement file (``UFIELD v1 <nx> <ny> <s>``) has records
``i j u1 u2`` over the field nodes.
"""

from __future__ import annotations

import csv
import io
import os
from pathlib import Path

import numpy as np

from .field import DisplacementField, OrientationImage
from .orientation import get_group

__all__ = [
    "ParseError",
    "read_orientation_image",
    "write_orientation_image",
    "format_orientation_image",
    "read_displacement",
    "write_displacement",
    "TRACE_COLUMNS",
    "write_trace",
    "write_ppm",
    "read_ppm",
    "colorize",
    "colorize_scalar",
    "write_grid_polylines",
    "ensure_dir",
]


class ParseError(ValueError):
    """Malformed input file; carries the offending 1-based line number."""

    def __init__(self, path, line: int, message: str):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


def _fmt(x: float) -> str:
    # repr gives the shortest string that round-trips the double exactly
    return repr(float(x))


def _records(text: str):
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line and not line.startswith("#"):
            yield n, line.split()


def _parse_grid(path, text, magic, ncomp, parse_extra):
    it = _records(text)
    try:
        n, head = next(it)
    except StopIteration:
        raise ParseError(path, 1, "empty file") from None
    if len(head) != 5 or head[0] != magic or head[1] != "v1":
        raise ParseError(path, n, f"expected header '{magic} v1 <nx> <ny> <...>'")
    try:
        nx, ny = int(head[2]), int(head[3])
    except ValueError:
        raise ParseError(path, n, "grid dimensions must be integers") from None
    if nx < 2 or ny < 2:
        raise ParseError(path, n, "grid needs at least 2 x 2 samples")
    extra = parse_extra(head[4], n)
    values = np.full((nx, ny, ncomp), np.nan)
    seen = np.zeros((nx, ny), dtype=bool)
    last = n
    for n, tok in it:
        last = n
        if len(tok) != 2 + ncomp:
            raise ParseError(path, n, f"expected {2 + ncomp} fields, got {len(tok)}")
        try:
            i, j = int(tok[0]), int(tok[1])
            vals = [float(t) for t in tok[2:]]
        except ValueError:
            raise ParseError(path, n, "non-numeric field") from None
        if not (0 <= i < nx and 0 <= j < ny):
            raise ParseError(path, n, f"index ({i}, {j}) outside the {nx} x {ny} grid")
        if seen[i, j]:
            raise ParseError(path, n, f"duplicate record for ({i}, {j})")
        if not np.all(np.isfinite(vals)):
            raise ParseError(path, n, "non-finite value")
        if magic == "EBSDGRID" and np.linalg.norm(vals) <= 1e-6:
            raise ParseError(path, n, "quaternion is not normalizable (norm <= 1e-6)")
        seen[i, j] = True
        values[i, j] = vals
    if not seen.all():
        i, j = np.argwhere(~seen)[0]
        raise ParseError(path, last + 1, f"missing record for ({i}, {j}); {int((~seen).sum())} cells absent")
    return values, extra


def _phase(path):
    def parse(tok, n):
        try:
            return get_group(tok)
        except KeyError:
            raise ParseError(path, n, f"unknown phase {tok!r}") from None
    return parse


def read_orientation_image(path, boundary: str = "clamp") -> OrientationImage:
    """Read an ``EBSDGRID v1`` file."""
    text = Path(path).read_text()
    q, group = _parse_grid(path, text, "EBSDGRID", 4, _phase(path))
    return OrientationImage(q, group, boundary)


def format_orientation_image(img: OrientationImage) -> str:
    """Canonical text rendering of an image."""
    nx, ny = img.data.shape[:2]
    out = io.StringIO()
    out.write(f"EBSDGRID v1 {nx} {ny} {img.group.name}\n")
    for j in range(ny):
        for i in range(nx):
            q = img.data[i, j]
            out.write(f"{i} {j} {_fmt(q[0])} {_fmt(q[1])} {_fmt(q[2])} {_fmt(q[3])}\n")
    return out.getvalue()


def write_orientation_image(path, img: OrientationImage) -> None:
    Path(path).write_text(format_orientation_image(img))


def read_displacement(path) -> DisplacementField:
    """Read a ``UFIELD v1`` file."""

    def scale(tok, n):
        try:
            s = float(tok)
        except ValueError:
            raise ParseError(path, n, "scale must be a number") from None
        if not s > 0:
            raise ParseError(path, n, "scale must be positive")
        return s

    u, s = _parse_grid(path, Path(path).read_text(), "UFIELD", 2, scale)
    return DisplacementField(s, u)


def write_displacement(path, u: DisplacementField) -> None:
    c = u.coeffs
    nx, ny = c.shape[:2]
    lines = [f"UFIELD v1 {nx} {ny} {_fmt(u.s)}"]
    for j in range(ny):
        for i in range(nx):
            lines.append(f"{i} {j} {_fmt(c[i, j, 0])} {_fmt(c[i, j, 1])}")
    Path(path).write_text("\n".join(lines) + "\n")


TRACE_COLUMNS = ("iteration", "level", "data", "tv1", "tv2", "barrier", "penalty", "energy", "total",
                 "h_inf", "g_inf", "accepted", "failures")


def write_trace(path, trace) -> None:
    """Write a :class:`~ebsdflow.solver.ConvergenceTrace` as CSV."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for k, (lvl, b, h, g, acc, fail) in enumerate(zip(trace.level, trace.breakdown, trace.h_inf, trace.g_inf,
                                                             trace.accepted, trace.failures)):
            w.writerow([k, lvl, _fmt(b.data), _fmt(b.tv1), _fmt(b.tv2), _fmt(b.barrier), _fmt(b.penalty),
                        _fmt(b.energy), _fmt(b.total), _fmt(h), _fmt(g), acc, fail])


def write_ppm(path, rgb) -> None:
    """Binary PPM (P6). ``rgb`` is (a, b, 3) uint8 indexed ``[x1, x2]``; row 0 is ``x2 = 0``."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError("expected an (a, b, 3) raster")
    raster = np.ascontiguousarray(np.transpose(rgb, (1, 0, 2)).astype(np.uint8))
    with open(path, "wb") as fh:
        fh.write(f"P6\n{raster.shape[1]} {raster.shape[0]}\n255\n".encode("ascii"))
        fh.write(raster.tobytes())


def read_ppm(path) -> np.ndarray:
    """Inverse of :func:`write_ppm` (only the layout it produces)."""
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P6":
        raise ParseError(path, 1, "not a binary PPM")
    w, h, mx = int(parts[1]), int(parts[2]), int(parts[3])
    if mx != 255:
        raise ParseError(path, 1, "only 8-bit PPM is supported")
    body = parts[4][: w * h * 3]
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).transpose(1, 0, 2).copy()


def colorize(img) -> np.ndarray:
    """Orientation colour: ``(|v1|, |v2|, |v3|)`` scaled to 0..255."""
    q = img.data if isinstance(img, OrientationImage) else np.asarray(img, dtype=float)
    return np.rint(255.0 * np.clip(np.abs(q[..., 1:]), 0.0, 1.0)).astype(np.uint8)


# black -> blue -> cyan -> yellow -> red, evenly spaced
_STOPS = np.array([[0, 0, 0], [0, 0, 255], [0, 255, 255], [255, 255, 0], [255, 0, 0]], dtype=float)


def colorize_scalar(values, vmin: float = 0.0, vmax: float = 20.0) -> np.ndarray:
    """Map a scalar field onto a fixed colormap after clipping to ``[vmin, vmax]``."""
    v = np.asarray(values, dtype=float)
    t = (np.clip(v, vmin, vmax) - vmin) / (vmax - vmin) * (len(_STOPS) - 1)
    k = np.minimum(np.floor(t).astype(int), len(_STOPS) - 2)
    r = (t - k)[..., None]
    return np.rint(_STOPS[k] * (1 - r) + _STOPS[k + 1] * r).astype(np.uint8)


def write_grid_polylines(path, u: DisplacementField, every: int = 1) -> None:
    """Deformed grid ``s (i, j) + u_ij`` as polylines, one ``x1 x2`` pair per line.

    Polylines along ``x1`` come first, then along ``x2``; they are separated by
    blank lines.
    """
    c = u.coeffs
    nx, ny = c.shape[:2]
    ii, jj = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    pts = u.s * np.stack([ii, jj], axis=-1) + c
    lines = []
    for j in range(0, ny, every):
        lines.extend(f"{_fmt(x)} {_fmt(y)}" for x, y in pts[:, j])
        lines.append("")
    for i in range(0, nx, every):
        lines.extend(f"{_fmt(x)} {_fmt(y)}" for x, y in pts[i, :])
        lines.append("")
    Path(path).write_text("\n".join(lines))


def ensure_dir(path) -> Path:
    p = Path(path)
    try:
        os.makedirs(p, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {p}: {exc}") from exc
    return p
