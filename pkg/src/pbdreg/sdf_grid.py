"""Eulerian grid of SDF vectors with trilinear interpolation.

Each grid vertex stores the vector ``v - p*`` from its nearest initial cloud
point ``p*`` to the vertex.  The magnitude of that vector is the distance
to the cloud; no inside/outside sign is ever computed, so "signed" only
refers to the vector carrying a direction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import EmptyCloud, OutOfBounds, ValidationError
from .geometry import SpatialIndex, _points

log = logging.getLogger(__name__)

# snapping tolerance in cell units, makes vertex queries reproduce stored values
_SNAP = 1e-10

# corner offsets in the order of the 8-term trilinear expansion:
# weights (1-a)(1-b)(1-c), (1-a)(1-b)c, (1-a)b(1-c), ..., abc
CORNERS = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.int64)


@dataclass(frozen=True)
class GridGeometry:
    origin: np.ndarray
    spacing: float
    dims: tuple

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(3))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if not self.spacing > 0:
            raise ValidationError("grid spacing must be positive")
        if len(self.dims) != 3 or min(self.dims) < 2:
            raise ValidationError("grid needs at least 2 vertices per axis")

    @classmethod
    def enveloping(cls, points, spacing: float, margin: float) -> GridGeometry:
        """Smallest grid of the given spacing covering the points' box plus ``margin``."""
        pts = _points(points)
        lo = pts.min(axis=0) - margin
        extent = pts.max(axis=0) + margin - lo
        dims = np.maximum(np.ceil(extent / spacing - 1e-9).astype(int) + 1, 2)
        return cls(lo, float(spacing), tuple(dims))

    @property
    def n_vertices(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def upper(self) -> np.ndarray:
        return self.origin + self.spacing * (np.array(self.dims) - 1)

    @property
    def cell_diagonal(self) -> float:
        return self.spacing * np.sqrt(3.0)

    def vertices(self) -> np.ndarray:
        """All vertex positions, flat index ``(i * ny + j) * nz + k``."""
        idx = np.indices(self.dims).reshape(3, -1).T
        return self.origin + idx * self.spacing

    def flat_index(self, ijk) -> np.ndarray:
        ijk = np.asarray(ijk, dtype=np.int64)
        _, ny, nz = self.dims
        return (ijk[..., 0] * ny + ijk[..., 1]) * nz + ijk[..., 2]

    def contains(self, q) -> np.ndarray:
        u = (np.atleast_2d(q) - self.origin) / self.spacing
        hi = np.array(self.dims) - 1
        return np.all((u >= -_SNAP) & (u <= hi + _SNAP), axis=1)

    def clamp(self, q) -> np.ndarray:
        return np.clip(q, self.origin, self.upper)

    def corner_weights(self, q):
        """Flat indices and weights of the 8 cell corners around each query.

        Returns ``(corners, weights)`` with shape ``(m, 8)`` each.  Raises
        :class:`OutOfBounds` for queries outside the closed grid box.
        """
        q = np.atleast_2d(np.asarray(q, dtype=np.float64))
        u = (q - self.origin) / self.spacing
        r = np.rint(u)
        u = np.where(np.abs(u - r) < _SNAP, r, u)
        hi = np.array(self.dims) - 1
        bad = np.any((u < 0) | (u > hi) | ~np.isfinite(u), axis=1)
        if bad.any():
            first = q[np.flatnonzero(bad)[0]]
            raise OutOfBounds(f"{int(bad.sum())} query point(s) outside the grid box, e.g. {first}")
        base = np.minimum(np.floor(u).astype(np.int64), hi - 1)
        f = u - base
        _, ny, nz = self.dims
        offsets = (CORNERS[:, 0] * ny + CORNERS[:, 1]) * nz + CORNERS[:, 2]
        corners = self.flat_index(base)[:, None] + offsets[None, :]
        wx = np.stack([1.0 - f[:, 0], f[:, 0]], axis=1)
        wy = np.stack([1.0 - f[:, 1], f[:, 1]], axis=1)
        wz = np.stack([1.0 - f[:, 2], f[:, 2]], axis=1)
        w = wx[:, :, None, None] * wy[:, None, :, None] * wz[:, None, None, :]
        return corners, w.reshape(len(q), 8)


@dataclass(frozen=True)
class SdfGrid:
    geometry: GridGeometry
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.shape != (self.geometry.n_vertices, 3):
            raise ValidationError(f"expected {self.geometry.n_vertices} SDF vectors, got {vals.shape}")
        object.__setattr__(self, "values", vals)

    @property
    def origin(self):
        return self.geometry.origin

    @property
    def spacing(self):
        return self.geometry.spacing

    @property
    def dims(self):
        return self.geometry.dims


def build_initial_sdf(cloud, origin=None, spacing=None, dims=None, *, geometry=None, workers=1) -> SdfGrid:
    """Store at each vertex the vector from its nearest cloud point to it."""
    pts = np.asarray(getattr(cloud, "points", cloud), dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyCloud("cannot build an SDF from an empty cloud")
    geom = geometry if geometry is not None else GridGeometry(origin, spacing, dims)
    if not np.all(geom.contains(pts)):
        raise ValidationError("grid box does not contain the cloud")
    verts = geom.vertices()
    nearest = SpatialIndex(pts).query(verts, workers=workers)
    return SdfGrid(geom, verts - pts[nearest])


def interpolate_field(geometry: GridGeometry, values: np.ndarray, q) -> np.ndarray:
    """Trilinear blend of per-vertex vectors at one point or an (m, 3) batch."""
    q = np.asarray(q, dtype=np.float64)
    corners, w = geometry.corner_weights(q)
    out = np.einsum("mk,mkd->md", w, values[corners])
    return out[0] if q.ndim == 1 else out


def interpolate(grid: SdfGrid, q) -> np.ndarray:
    return interpolate_field(grid.geometry, grid.values, q)


# -- text format -----------------------------------------------------------------
#
#   sdfgrid 1
#   origin <x> <y> <z>
#   spacing <h>
#   dims <nx> <ny> <nz>
#   <vx> <vy> <vz>        one line per vertex, flat index order


def save_grid(path, grid: SdfGrid) -> None:
    g = grid.geometry
    with open(path, "w") as fh:
        fh.write("sdfgrid 1\n")
        fh.write("origin {!r} {!r} {!r}\n".format(*map(float, g.origin)))
        fh.write(f"spacing {float(g.spacing)!r}\n")
        fh.write("dims {} {} {}\n".format(*g.dims))
        for v in grid.values:
            fh.write("{!r} {!r} {!r}\n".format(*map(float, v)))


def load_grid(path) -> SdfGrid:
    with open(path) as fh:
        lines = fh.read().splitlines()
    try:
        if lines[0].split() != ["sdfgrid", "1"]:
            raise ValueError("bad magic")
        origin = [float(v) for v in lines[1].split()[1:]]
        spacing = float(lines[2].split()[1])
        dims = [int(v) for v in lines[3].split()[1:]]
        values = np.array([[float(v) for v in ln.split()] for ln in lines[4:] if ln.strip()])
    except (IndexError, ValueError) as exc:
        raise ValidationError(f"{path}: malformed SDF grid file ({exc})") from None
    return SdfGrid(GridGeometry(origin, spacing, dims), values.reshape(-1, 3))
