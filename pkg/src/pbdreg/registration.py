"""Correspondence-free registration cost, its numerical gradient and the
evaluation error between simulated and observed surfaces.

The cost sums the squared traced-back SDF magnitude over the observed
cloud.  Moving one surface particle only changes the inverse-deformation
vectors of the grid vertices diffused from it, so a probe only has to
re-evaluate the cloud points whose interpolation cell touches one of those
vertices.  :class:`RegistrationProblem` exploits that; the reference
functions :func:`registration_cost` and :func:`full_gradient` rebuild
everything from scratch and serve as the independent check.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .deformation import InverseDeformationField, build_idf, deformed_sdf
from .errors import EmptyCloud, LengthMismatch, ValidationError
from .geometry import SpatialIndex, _points
from .pbd_core import Registration, registration_correction
from .sdf_grid import SdfGrid, interpolate

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RegistrationConfig:
    lambda_regi: float = 0.3
    # None means 0.25 x grid spacing
    probe_step: Optional[float] = None
    influence_radius: Optional[float] = None
    difference: str = "forward"
    clamp: bool = True

    def __post_init__(self):
        if not 0.0 <= self.lambda_regi <= 1.0:
            raise ValidationError("lambda_regi must lie in [0, 1]")
        if self.probe_step is not None and not self.probe_step > 0:
            raise ValidationError("probe_step must be positive")
        if self.difference not in ("forward", "central"):
            raise ValidationError("difference must be 'forward' or 'central'")
        if self.influence_radius is not None and not self.influence_radius > 0:
            raise ValidationError("influence_radius must be positive")

    def step_for(self, sdf0: SdfGrid) -> float:
        step = 0.25 * sdf0.spacing if self.probe_step is None else float(self.probe_step)
        if step >= sdf0.spacing:
            raise ValidationError("probe_step must be smaller than the grid spacing")
        return step


def _cloud_points(cloud) -> np.ndarray:
    pts = np.asarray(getattr(cloud, "points", cloud), dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyCloud("registration needs a non-empty cloud")
    return pts


class RegistrationProblem:
    """Registration cost of one observed frame as a function of the surface.

    Everything that does not depend on the simulated surface (cell corners
    and weights of each cloud point, which particle owns each corner, the
    point/particle influence pairs) is computed once here.
    """

    def __init__(self, cloud, sdf0: SdfGrid, idf: InverseDeformationField, cfg: RegistrationConfig = RegistrationConfig()):
        self.cloud = _cloud_points(cloud)
        self.sdf0 = sdf0
        self.geometry = sdf0.geometry
        self.rest = idf.rest_surface
        self.assignment = idf.assignment
        self.cfg = cfg
        self.step = cfg.step_for(sdf0)
        q = self.cloud
        if cfg.clamp:
            q = self.geometry.clamp(q)
        self.query = q
        self.corners, self.weights = self.geometry.corner_weights(q)
        owners = self.assignment[self.corners]
        self.owners = owners

        # aggregate corner weights per (cloud point, particle) pair
        n_part = len(self.rest)
        rows = np.repeat(np.arange(len(q)), 8)
        keys = rows * n_part + owners.ravel()
        uniq, inv = np.unique(keys, return_inverse=True)
        wsum = np.zeros(len(uniq))
        np.add.at(wsum, inv, self.weights.ravel())
        keep = wsum > 0
        self.pair_point = (uniq // n_part)[keep]
        self.pair_particle = (uniq % n_part)[keep]
        self.pair_weight = wsum[keep]

    def _radius_mask(self, surface):
        if self.cfg.influence_radius is None:
            return None
        d = np.linalg.norm(self.cloud[self.pair_point] - surface[self.pair_particle], axis=1)
        return d <= self.cfg.influence_radius

    def traced(self, surface) -> np.ndarray:
        omega = self.rest - surface
        t = self.query + np.einsum("mk,mkd->md", self.weights, omega[self.owners])
        return self._clamp(t)

    def _clamp(self, t):
        if not self.cfg.clamp:
            return t
        g = self.geometry
        inside = g.contains(t)
        if not inside.all():
            log.debug("clamping %d traced point(s) to the grid box", int((~inside).sum()))
            t = g.clamp(t)
        return t

    def _sq(self, t):
        phi = interpolate(self.sdf0, t)
        return np.einsum("md,md->m", phi, phi)

    def cost(self, surface) -> float:
        surface = self._check(surface)
        return float(self._sq(self.traced(surface)).sum())

    def gradient(self, surface) -> np.ndarray:
        """Per-particle finite-difference gradient, shape ``(n_surface, 3)``."""
        surface = self._check(surface)
        n = len(self.rest)
        grad = np.zeros((n, 3))
        if len(self.pair_point) == 0:
            return grad
        t = self.traced(surface)[self.pair_point]
        m = len(t)
        h = self.step
        hw = h * self.pair_weight
        central = self.cfg.difference == "central"
        # one batched evaluation: base (forward only), then +/- probes per axis
        probes = [] if central else [t]
        for axis in range(3):
            for sign in ((-1.0, 1.0) if central else (-1.0,)):
                p = t.copy()
                p[:, axis] += sign * hw
                probes.append(p)
        sq = self._sq(self._clamp(np.concatenate(probes))).reshape(-1, m)
        mask = self._radius_mask(surface)
        for axis in range(3):
            if central:
                delta = (sq[2 * axis] - sq[2 * axis + 1]) / (2 * h)
            else:
                delta = (sq[1 + axis] - sq[0]) / h
            if mask is not None:
                delta = np.where(mask, delta, 0.0)
            np.add.at(grad[:, axis], self.pair_particle, delta)
        return grad

    def _check(self, surface):
        s = _points(surface)
        if s.shape != self.rest.shape:
            raise LengthMismatch("surface does not match the rest surface")
        return s

    def constraint(self, surface_indices, stiffness, exempt=()) -> Registration:
        """PBD constraint re-evaluating the gradient at the solver's iterate."""
        surface_indices = np.asarray(surface_indices, dtype=np.int64)

        def handle(x):
            g = np.zeros_like(x)
            g[surface_indices] = self.gradient(x[surface_indices])
            return g

        return Registration(handle, float(stiffness), tuple(int(e) for e in exempt))


def registration_cost(surface, cloud, idf: InverseDeformationField, sdf0: SdfGrid, clamp: bool = True) -> float:
    """Sum over the cloud of squared deformed-SDF magnitudes."""
    pts = _cloud_points(cloud)
    field_ = idf.deformed(surface)
    phi = deformed_sdf(field_, sdf0, pts, clamp=clamp)
    return float(np.einsum("md,md->", phi, phi))


def registration_gradient(surface, cloud, idf, sdf0, cfg: RegistrationConfig = RegistrationConfig()) -> np.ndarray:
    return RegistrationProblem(cloud, sdf0, idf, cfg).gradient(surface)


def full_gradient(surface, cloud, sdf0: SdfGrid, rest_surface, step: float, central: bool = True,
                  clamp: bool = True) -> np.ndarray:
    """Reference gradient: every probe rebuilds the inverse deformation
    field from scratch and re-evaluates the full cost."""
    surface = _points(surface)
    rest = _points(rest_surface)
    index = SpatialIndex(rest)

    def J(s):
        idf = build_idf(rest, s, sdf0.geometry, index)
        return registration_cost(s, cloud, idf, sdf0, clamp=clamp)

    base = None if central else J(surface)
    grad = np.zeros_like(surface)
    for i in range(len(surface)):
        for axis in range(3):
            up = surface.copy()
            up[i, axis] += step
            if central:
                down = surface.copy()
                down[i, axis] -= step
                grad[i, axis] = (J(up) - J(down)) / (2 * step)
            else:
                grad[i, axis] = (J(up) - base) / step
    return grad


def relative_deviation(g, ref) -> float:
    """``max |g - ref| / max |ref|`` over all components."""
    g = np.asarray(g, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    scale = np.abs(ref).max()
    if scale == 0:
        return float(np.abs(g).max())
    return float(np.abs(g - ref).max() / scale)


def apply_registration(system, gradients, cfg: RegistrationConfig, exempt=()) -> np.ndarray:
    """(N, 3) corrections ``-lambda * grad`` on surface particles.

    Non-surface, fixed and ``exempt`` particles receive zero.
    """
    g = np.asarray(gradients, dtype=np.float64)
    if g.shape != (len(system.surface_indices), 3):
        raise LengthMismatch("one gradient per surface particle expected")
    full = np.zeros_like(system.positions)
    full[system.surface_indices] = g
    return registration_correction(system.inverse_masses, full, cfg.lambda_regi, exempt)


class EvaluationError(NamedTuple):
    full: float
    masked: float
    per_particle: np.ndarray
    xy: float
    z: float
    masked_xy: float
    masked_z: float
    per_particle_xy: np.ndarray
    per_particle_z: np.ndarray


def _mean(a, keep):
    sel = a[keep]
    return float(sel.mean()) if len(sel) else float("nan")


def evaluation_error(sim_surface, obs_points, occlusion_mask=None) -> EvaluationError:
    """Per-particle distances between matched simulated and observed points.

    Rows of ``obs_points`` that are NaN (dropped observations) are left out
    of every mean; ``occlusion_mask`` additionally removes flagged rows from
    the masked means.
    """
    sim = _points(sim_surface)
    obs = _points(obs_points)
    if sim.shape != obs.shape:
        raise LengthMismatch(f"{len(sim)} simulated vs {len(obs)} observed points")
    d = sim - obs
    per = np.linalg.norm(d, axis=1)
    per_xy = np.linalg.norm(d[:, :2], axis=1)
    per_z = np.abs(d[:, 2])
    seen = np.isfinite(per)
    if occlusion_mask is None:
        visible = seen
    else:
        mask = np.asarray(occlusion_mask, dtype=bool)
        if mask.shape != (len(sim),):
            raise LengthMismatch("occlusion mask length differs from the particle count")
        visible = seen & ~mask
    return EvaluationError(
        full=_mean(per, seen),
        masked=_mean(per, visible),
        per_particle=per,
        xy=_mean(per_xy, seen),
        z=_mean(per_z, seen),
        masked_xy=_mean(per_xy, visible),
        masked_z=_mean(per_z, visible),
        per_particle_xy=per_xy,
        per_particle_z=per_z,
    )


@dataclass
class RegistrationReport:
    frame: int
    cost: float
    gradients: np.ndarray
    error: EvaluationError
    elapsed: dict = field(default_factory=dict)

    CSV_FIELDS = ("frame", "J", "full_error", "masked_error", "xy_error", "z_error")

    @property
    def evaluation_error(self) -> float:
        return self.error.full

    @property
    def masked_error(self) -> float:
        return self.error.masked

    @property
    def per_particle_error(self) -> np.ndarray:
        return self.error.per_particle

    def csv_row(self) -> list:
        e = self.error
        return [self.frame, self.cost, e.full, e.masked, e.xy, e.z]
