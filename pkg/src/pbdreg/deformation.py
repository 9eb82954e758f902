"""Inverse deformation field on the SDF grid and the traced-back SDF."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import LengthMismatch, OutOfBounds
from .geometry import SpatialIndex, _points
from .sdf_grid import GridGeometry, SdfGrid, interpolate, interpolate_field

log = logging.getLogger(__name__)


def diffusion_assignment(geometry: GridGeometry, rest_index: SpatialIndex, workers: int = 1) -> np.ndarray:
    """Index of the nearest rest-surface particle for every grid vertex."""
    return rest_index.query(geometry.vertices(), workers=workers)


@dataclass(frozen=True)
class InverseDeformationField:
    """Per-vertex vectors tracing current positions back to rest.

    Vertex ``v`` carries ``m0[a] - mt[a]`` where ``a = assignment[v]`` is the
    rest particle nearest to ``v``; only the per-particle vectors change
    from frame to frame.
    """

    geometry: GridGeometry
    assignment: np.ndarray
    particle_vectors: np.ndarray
    rest_surface: np.ndarray

    @property
    def vectors(self) -> np.ndarray:
        return self.particle_vectors[self.assignment]

    def deformed(self, current_surface) -> InverseDeformationField:
        """Same diffusion, new current surface."""
        cur = _points(current_surface)
        if cur.shape != self.rest_surface.shape:
            raise LengthMismatch("current surface does not match the rest surface")
        return InverseDeformationField(self.geometry, self.assignment, self.rest_surface - cur, self.rest_surface)

    def at(self, q) -> np.ndarray:
        """Trilinear interpolation of the field (same scheme as the SDF)."""
        return interpolate_field(self.geometry, self.vectors, q)


def build_idf(
    rest_surface,
    current_surface,
    geometry: GridGeometry,
    rest_index: Optional[SpatialIndex] = None,
    *,
    assignment: Optional[np.ndarray] = None,
    workers: int = 1,
) -> InverseDeformationField:
    """Diffuse the surface particles' inverse displacements onto the grid.

    ``assignment`` may be passed to skip the nearest-particle queries; it
    only depends on the rest surface and the grid.
    """
    rest = _points(rest_surface)
    cur = _points(current_surface)
    if rest.shape != cur.shape:
        raise LengthMismatch(f"rest surface has {len(rest)} particles, current has {len(cur)}")
    if assignment is None:
        if rest_index is None:
            rest_index = SpatialIndex(rest)
        assignment = diffusion_assignment(geometry, rest_index, workers)
    return InverseDeformationField(geometry, np.asarray(assignment, dtype=np.int64), rest - cur, rest)


def deformed_sdf(idf: InverseDeformationField, sdf0: SdfGrid, q, clamp: bool = False) -> np.ndarray:
    """Approximate current SDF vector at ``q`` as ``sdf0(q + idf(q))``.

    With ``clamp`` both the query and the traced point are clipped to the
    grid box instead of raising :class:`OutOfBounds`.
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q2 = np.atleast_2d(q)
    traced = trace_back(idf, q2, clamp=clamp)
    if not clamp:
        out = interpolate(sdf0, traced)
    else:
        out = interpolate(sdf0, sdf0.geometry.clamp(traced))
    return out[0] if single else out


def trace_back(idf: InverseDeformationField, q, clamp: bool = False) -> np.ndarray:
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    geom = idf.geometry
    if clamp:
        inside = geom.contains(q)
        if not inside.all():
            log.warning("clamping %d query point(s) to the grid box", int((~inside).sum()))
            q = geom.clamp(q)
    traced = q + idf.at(q)
    if clamp:
        inside = geom.contains(traced)
        if not inside.all():
            log.warning("clamping %d traced point(s) to the grid box", int((~inside).sum()))
            traced = geom.clamp(traced)
    elif not np.all(geom.contains(traced)):
        raise OutOfBounds("traced point leaves the grid box")
    return traced
