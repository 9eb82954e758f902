"""Particle state, geometric constraints and the PBD time step.

A step predicts positions from velocities and gravity, projects every
constraint Gauss-Seidel style for a fixed number of sweeps and derives the
new velocities from the position change.  Hot loops live in
:mod:`pbdreg._kernels`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple, Optional, Sequence, Union

import numpy as np

from . import _kernels
from .errors import DegenerateCluster, DegenerateConstraint, NonFiniteState, ValidationError

EPS_LEN = 1e-9
EPS_GRAD = 1e-9
GRAVITY = (0.0, 0.0, -9.81)


def _as_points(a, name="points") -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValidationError(f"{name} must have shape (n, 3), got {arr.shape}")
    return arr


@dataclass
class ParticleSystem:
    """State of the simulated volume mesh.

    An inverse mass of zero marks a fixed particle.  ``surface_indices``
    selects the observed surface subset of the particles, in the order the
    registration and evaluation code uses.
    """

    positions: np.ndarray
    velocities: np.ndarray
    inverse_masses: np.ndarray
    surface_indices: np.ndarray
    dt: float = 0.01
    damping: float = 0.99
    external_accel: np.ndarray = field(default_factory=lambda: np.array(GRAVITY))

    def __post_init__(self):
        self.positions = _as_points(self.positions, "positions")
        self.velocities = _as_points(self.velocities, "velocities")
        self.inverse_masses = np.array(self.inverse_masses, dtype=np.float64).reshape(-1)
        self.surface_indices = np.array(self.surface_indices, dtype=np.int64).reshape(-1)
        self.external_accel = np.array(self.external_accel, dtype=np.float64).reshape(3)
        n = len(self.positions)
        if n < 1:
            raise ValidationError("a particle system needs at least one particle")
        if len(self.velocities) != n or len(self.inverse_masses) != n:
            raise ValidationError("positions, velocities and inverse_masses differ in length")
        if not np.all(np.isfinite(self.inverse_masses)) or np.any(self.inverse_masses < 0):
            raise ValidationError("inverse masses must be finite and non-negative")
        s = self.surface_indices
        if len(s) and (s.min() < 0 or s.max() >= n):
            raise ValidationError("surface index out of range")
        if len(np.unique(s)) != len(s):
            raise ValidationError("duplicate surface index")
        if not self.dt > 0:
            raise ValidationError("dt must be positive")
        if not 0.0 <= self.damping <= 1.0:
            raise ValidationError("damping must lie in [0, 1]")

    @classmethod
    def at_rest(cls, positions, inverse_masses=None, surface_indices=(), **kwargs):
        positions = _as_points(positions)
        if inverse_masses is None:
            inverse_masses = np.ones(len(positions))
        return cls(positions, np.zeros_like(positions), inverse_masses, surface_indices, **kwargs)

    @property
    def n(self) -> int:
        return len(self.positions)

    @property
    def fixed(self) -> np.ndarray:
        return self.inverse_masses == 0.0

    @property
    def surface_positions(self) -> np.ndarray:
        return self.positions[self.surface_indices]

    def copy(self) -> ParticleSystem:
        return replace(
            self,
            positions=self.positions.copy(),
            velocities=self.velocities.copy(),
            inverse_masses=self.inverse_masses.copy(),
        )


# -- constraint variants -----------------------------------------------------


@dataclass(frozen=True)
class Distance:
    i: int
    j: int
    rest_length: float
    stiffness: float = 1.0


@dataclass(frozen=True)
class Volume:
    i: int
    j: int
    k: int
    l: int
    rest_volume: float
    stiffness: float = 1.0


@dataclass(frozen=True)
class ShapeMatch:
    cluster: tuple
    rest_positions: np.ndarray
    stiffness: float = 1.0


@dataclass(frozen=True)
class Grasp:
    """Particles rigidly attached to the manipulator.

    ``targets`` holds one position per grasped particle for the current step.
    """

    indices: np.ndarray
    targets: np.ndarray


@dataclass(frozen=True)
class Registration:
    """Soft constraint pulling particles down a registration cost.

    ``handle`` maps the current (N, 3) positions to the (N, 3) cost gradient;
    the applied correction is ``-stiffness * gradient``.
    """

    handle: Callable[[np.ndarray], np.ndarray]
    stiffness: float
    exempt: tuple = ()


Constraint = Union[Distance, Volume, ShapeMatch, Grasp, Registration]


def _check_stiffness(k, what):
    k = np.asarray(k, dtype=np.float64)
    if np.any(k < 0) or np.any(k > 1):
        raise ValidationError(f"{what} stiffness must lie in [0, 1]")
    return k


@dataclass
class ConstraintSet:
    """Constraints packed into flat arrays grouped by kind.

    Shape-matching clusters are stored CSR style: cluster ``c`` owns
    ``shape_members[shape_ptr[c]:shape_ptr[c + 1]]`` with rest positions
    centred on the cluster's rest centroid.
    """

    distance_pairs: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), np.int64))
    distance_rest: np.ndarray = field(default_factory=lambda: np.zeros(0))
    distance_stiffness: np.ndarray = field(default_factory=lambda: np.zeros(0))
    volume_tets: np.ndarray = field(default_factory=lambda: np.zeros((0, 4), np.int64))
    volume_rest: np.ndarray = field(default_factory=lambda: np.zeros(0))
    volume_stiffness: np.ndarray = field(default_factory=lambda: np.zeros(0))
    shape_ptr: np.ndarray = field(default_factory=lambda: np.zeros(1, np.int64))
    shape_members: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    shape_rest: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    shape_stiffness: np.ndarray = field(default_factory=lambda: np.zeros(0))
    grasp: Optional[Grasp] = None
    registration: Optional[Registration] = None

    def __post_init__(self):
        self.distance_pairs = np.ascontiguousarray(self.distance_pairs, dtype=np.int64).reshape(-1, 2)
        self.distance_rest = np.ascontiguousarray(self.distance_rest, dtype=np.float64)
        self.distance_stiffness = _check_stiffness(self.distance_stiffness, "distance")
        self.volume_tets = np.ascontiguousarray(self.volume_tets, dtype=np.int64).reshape(-1, 4)
        self.volume_rest = np.ascontiguousarray(self.volume_rest, dtype=np.float64)
        self.volume_stiffness = _check_stiffness(self.volume_stiffness, "volume")
        self.shape_ptr = np.ascontiguousarray(self.shape_ptr, dtype=np.int64)
        self.shape_members = np.ascontiguousarray(self.shape_members, dtype=np.int64)
        self.shape_rest = np.ascontiguousarray(self.shape_rest, dtype=np.float64).reshape(-1, 3)
        self.shape_stiffness = _check_stiffness(self.shape_stiffness, "shape matching")
        if np.any(self.distance_rest <= 0):
            raise ValidationError("distance rest lengths must be positive")
        if np.any(np.diff(self.shape_ptr) < 3):
            raise ValidationError("shape-matching clusters need at least 3 particles")
        if self.registration is not None:
            _check_stiffness(self.registration.stiffness, "registration")

    @property
    def n_clusters(self) -> int:
        return len(self.shape_ptr) - 1

    def max_index(self) -> int:
        parts = [self.distance_pairs.ravel(), self.volume_tets.ravel(), self.shape_members]
        if self.grasp is not None:
            parts.append(np.asarray(self.grasp.indices).ravel())
        flat = np.concatenate(parts) if parts else np.zeros(0, np.int64)
        return int(flat.max()) if len(flat) else -1

    def with_grasp(self, grasp: Optional[Grasp]) -> ConstraintSet:
        return replace(self, grasp=grasp)

    def with_registration(self, registration: Optional[Registration]) -> ConstraintSet:
        return replace(self, registration=registration)

    @classmethod
    def from_constraints(cls, constraints: Sequence[Constraint]) -> ConstraintSet:
        dist = [c for c in constraints if isinstance(c, Distance)]
        vol = [c for c in constraints if isinstance(c, Volume)]
        shapes = [c for c in constraints if isinstance(c, ShapeMatch)]
        grasps = [c for c in constraints if isinstance(c, Grasp)]
        regs = [c for c in constraints if isinstance(c, Registration)]
        if len(regs) > 1:
            raise ValidationError("at most one registration constraint per step")
        grasp = None
        if grasps:
            grasp = Grasp(
                np.concatenate([np.asarray(g.indices, np.int64).ravel() for g in grasps]),
                np.concatenate([np.asarray(g.targets, np.float64).reshape(-1, 3) for g in grasps]),
            )
        members, rest, ptr = [], [], [0]
        for c in shapes:
            r = _as_points(c.rest_positions, "rest_positions")
            members.extend(int(p) for p in c.cluster)
            rest.append(r - r.mean(axis=0))
            ptr.append(len(members))
        return cls(
            distance_pairs=[(c.i, c.j) for c in dist],
            distance_rest=[c.rest_length for c in dist],
            distance_stiffness=[c.stiffness for c in dist],
            volume_tets=[(c.i, c.j, c.k, c.l) for c in vol],
            volume_rest=[c.rest_volume for c in vol],
            volume_stiffness=[c.stiffness for c in vol],
            shape_ptr=ptr,
            shape_members=members,
            shape_rest=np.concatenate(rest) if rest else np.zeros((0, 3)),
            shape_stiffness=[c.stiffness for c in shapes],
            grasp=grasp,
            registration=regs[0] if regs else None,
        )

    @classmethod
    def from_tets(
        cls,
        positions,
        tets,
        distance_stiffness=1.0,
        volume_stiffness=1.0,
        shape_stiffness=1.0,
        extra_clusters=(),
    ) -> ConstraintSet:
        """Distance constraints on every tet edge, one volume constraint and
        one shape-matching cluster per tet, with rest values taken from
        ``positions``.  A zero stiffness drops that constraint kind.
        """
        x = np.ascontiguousarray(positions, dtype=np.float64)
        tets = np.ascontiguousarray(tets, dtype=np.int64).reshape(-1, 4)
        kw = {}
        if distance_stiffness > 0:
            edges = np.concatenate([tets[:, [a, b]] for a, b in
                                    ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))])
            edges = np.unique(np.sort(edges, axis=1), axis=0)
            kw.update(
                distance_pairs=edges,
                distance_rest=_kernels.rest_lengths(x, edges),
                distance_stiffness=np.full(len(edges), float(distance_stiffness)),
            )
        if volume_stiffness > 0:
            kw.update(
                volume_tets=tets,
                volume_rest=_kernels.rest_volumes(x, tets),
                volume_stiffness=np.full(len(tets), float(volume_stiffness)),
            )
        if shape_stiffness > 0:
            clusters = [list(t) for t in tets] + [list(c) for c in extra_clusters]
            ptr = np.cumsum([0] + [len(c) for c in clusters])
            members = np.concatenate([np.asarray(c, np.int64) for c in clusters])
            rest = np.concatenate([x[c] - x[c].mean(axis=0) for c in clusters])
            kw.update(
                shape_ptr=ptr,
                shape_members=members,
                shape_rest=rest,
                shape_stiffness=np.full(len(clusters), float(shape_stiffness)),
            )
        return cls(**kw)


@dataclass(frozen=True)
class SolverConfig:
    solver_iterations: int = 20
    convergence_tolerance: float = 0.0
    record_residuals: bool = False

    def __post_init__(self):
        if int(self.solver_iterations) < 1:
            raise ValidationError("solver_iterations must be >= 1")
        if self.convergence_tolerance < 0:
            raise ValidationError("convergence_tolerance must be >= 0")


@dataclass
class StepStats:
    """Diagnostics filled in by :func:`simulate_step` when passed in."""

    sweeps: int = 0
    max_corrections: list = field(default_factory=list)
    distance_residuals: list = field(default_factory=list)
    volume_residuals: list = field(default_factory=list)
    degenerate_events: int = 0


# -- single-constraint operations ---------------------------------------------


def eval_distance(x1, x2, d0, w1=1.0, w2=1.0, stiffness=1.0):
    """Residual and PBD position corrections of ``|x1 - x2| - d0``."""
    if not d0 > 0:
        raise ValidationError("rest length must be positive")
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    d = x1 - x2
    length = float(np.linalg.norm(d))
    if length < EPS_LEN:
        raise DegenerateConstraint("zero-length distance constraint")
    cost = length - d0
    wsum = w1 + w2
    if wsum == 0:
        return cost, (np.zeros(3), np.zeros(3))
    n = d / length
    s = stiffness * cost / wsum
    return cost, (-w1 * s * n, w2 * s * n)


def eval_volume(x1, x2, x3, x4, v0, inverse_masses=(1.0, 1.0, 1.0, 1.0), stiffness=1.0):
    """Residual and PBD corrections of the signed tetrahedron volume."""
    p = np.array([x1, x2, x3, x4], dtype=np.float64)
    e1, e2, e3 = p[1] - p[0], p[2] - p[0], p[3] - p[0]
    cost = float(np.dot(np.cross(e1, e2), e3) / 6.0 - v0)
    grad = np.empty((4, 3))
    grad[1] = np.cross(e2, e3) / 6.0
    grad[2] = np.cross(e3, e1) / 6.0
    grad[3] = np.cross(e1, e2) / 6.0
    grad[0] = -grad[1:].sum(axis=0)
    if np.sqrt((grad**2).sum()) < EPS_GRAD:
        raise DegenerateConstraint("volume constraint gradient vanishes")
    w = np.asarray(inverse_masses, dtype=np.float64)
    denom = float((w * (grad**2).sum(axis=1)).sum())
    if denom == 0:
        return cost, np.zeros((4, 3))
    s = stiffness * cost / denom
    return cost, -s * w[:, None] * grad


class ShapeMatchResult(NamedTuple):
    rotation: np.ndarray
    rest_centroid: np.ndarray
    current_centroid: np.ndarray
    corrections: np.ndarray


def solve_shape_match(rest, current) -> ShapeMatchResult:
    """Least-squares rigid fit of ``rest`` onto ``current``.

    The rotation is the proper orthogonal factor of the cross-covariance
    (polar decomposition via SVD) and the corrections move each current
    point onto its rigidly transformed rest position.
    """
    rest = _as_points(rest, "rest")
    current = _as_points(current, "current")
    if len(rest) != len(current) or len(rest) < 3:
        raise ValidationError("shape matching needs two equal-length lists of >= 3 points")
    t_hat = rest.mean(axis=0)
    t = current.mean(axis=0)
    A = (current - t).T @ (rest - t_hat)
    U, s, Vt = np.linalg.svd(A)
    if s[0] <= 0 or s[1] <= 1e-12 * s[0]:
        raise DegenerateCluster(f"cross-covariance rank below 2 (singular values {s})")
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt)) or 1.0])
    R = U @ D @ Vt
    corrections = (rest - t_hat) @ R.T + t - current
    return ShapeMatchResult(R, t_hat, t, corrections)


def registration_correction(inverse_masses, gradient, stiffness, exempt=()) -> np.ndarray:
    """Position correction ``-stiffness * gradient`` for movable particles."""
    corr = -float(stiffness) * np.asarray(gradient, dtype=np.float64)
    corr[np.asarray(inverse_masses) == 0.0] = 0.0
    if len(exempt):
        corr[np.asarray(exempt, dtype=np.int64)] = 0.0
    return corr


# -- time step -----------------------------------------------------------------


def simulate_step(
    system: ParticleSystem,
    constraints: Union[ConstraintSet, Sequence[Constraint]],
    cfg: SolverConfig = SolverConfig(),
    stats: Optional[StepStats] = None,
) -> ParticleSystem:
    """Advance ``system`` by one time step and return the new state.

    Sweep order is distance, volume, shape matching, grasp, registration.
    Grasped particles are placed on their targets before projection and act
    as fixed for every constraint during this step.
    """
    cs = constraints if isinstance(constraints, ConstraintSet) else ConstraintSet.from_constraints(constraints)
    if cs.max_index() >= system.n:
        raise ValidationError("constraint references a particle outside the system")

    x0 = system.positions
    w = system.inverse_masses.copy()
    movable = (w > 0)[:, None]
    dt = system.dt
    x = x0 + movable * (dt * system.damping * system.velocities + dt * dt * system.external_accel)
    x = np.ascontiguousarray(x)

    exempt = np.zeros(0, np.int64)
    if cs.grasp is not None:
        gidx = np.asarray(cs.grasp.indices, np.int64)
        targets = np.asarray(cs.grasp.targets, np.float64).reshape(-1, 3)
        x[gidx] = targets
        w[gidx] = 0.0
        exempt = gidx
    reg = cs.registration
    if reg is not None and len(reg.exempt):
        exempt = np.concatenate([exempt, np.asarray(reg.exempt, np.int64)])

    for sweep in range(int(cfg.solver_iterations)):
        c1, n1 = _kernels.project_distances(x, w, cs.distance_pairs, cs.distance_rest, cs.distance_stiffness, EPS_LEN)
        c2, n2 = _kernels.project_volumes(x, w, cs.volume_tets, cs.volume_rest, cs.volume_stiffness, EPS_GRAD)
        c3, n3 = _kernels.project_shapes(
            x, w, cs.shape_ptr, cs.shape_members, cs.shape_rest, cs.shape_stiffness, EPS_LEN
        )
        max_corr = max(c1, c2, c3)
        if cs.grasp is not None:
            x[gidx] = targets
        if reg is not None and reg.stiffness > 0:
            corr = registration_correction(w, reg.handle(x), reg.stiffness, exempt)
            x += corr
            max_corr = max(max_corr, float(np.abs(corr).max(initial=0.0)))
        if stats is not None:
            stats.sweeps = sweep + 1
            stats.max_corrections.append(max_corr)
            stats.degenerate_events += n1 + n2 + n3
            if cfg.record_residuals:
                dres, vres = _kernels.max_residuals(x, cs.distance_pairs, cs.distance_rest, cs.volume_tets, cs.volume_rest)
                stats.distance_residuals.append(dres)
                stats.volume_residuals.append(vres)
        if max_corr < cfg.convergence_tolerance:
            break

    v = (x - x0) / dt
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
        raise NonFiniteState("non-finite particle state after constraint projection")
    return replace(system, positions=x, velocities=v)
