"""Scenario orchestration: ground-truth simulation, synthetic observations,
registered and unregistered tracking simulations, metrics and export.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.spatial import cKDTree

from . import __version__
from .deformation import build_idf, diffusion_assignment
from .errors import PbdRegError, UnknownKind, ValidationError
from .geometry import SpatialIndex, extrude_volume, triangulate_cloud, write_obj, write_tet
from .observation import ObservationConfig, PointCloud, generate_observation
from .pbd_core import ConstraintSet, Grasp, ParticleSystem, SolverConfig, simulate_step
from .registration import (
    EvaluationError,
    RegistrationConfig,
    RegistrationProblem,
    evaluation_error,
    full_gradient,
    relative_deviation,
)
from .sdf_grid import GridGeometry, build_initial_sdf

log = logging.getLogger(__name__)

TRAJECTORIES = ("lift", "cube", "butterfly", "sine_wave")


def make_trajectory(kind: str, amplitude: float, period: float, duration: float, start) -> Callable[[float], np.ndarray]:
    """Tool-tip position as a function of time, equal to ``start`` at t = 0."""
    start = np.asarray(start, dtype=np.float64).reshape(3)
    A = float(amplitude)
    T = float(period)
    D = float(duration)
    if kind not in TRAJECTORIES:
        raise UnknownKind(f"unknown trajectory kind {kind!r}; expected one of {TRAJECTORIES}")
    if A < 0 or T <= 0 or D <= 0:
        raise ValidationError("trajectory needs amplitude >= 0 and positive period and duration")

    def lift(t):
        return start + (0.0, 0.0, A * min(max(t / D, 0.0), 1.0))

    def cube(t):
        s = 4.0 * ((t % T) / T)
        seg = min(int(s), 3)
        f = s - seg
        x, z = ((0.0, f), (f, 1.0), (1.0, 1.0 - f), (1.0 - f, 0.0))[seg]
        return start + (A * x, 0.0, A * z)

    def butterfly(t):
        w = 2 * math.pi * t / T
        return start + (A * math.sin(w), 0.0, 0.5 * A * math.sin(2 * w))

    def sine_wave(t):
        return start + (A * min(max(t / D, 0.0), 1.0), 0.0, A * math.sin(2 * math.pi * t / T))

    return {"lift": lift, "cube": cube, "butterfly": butterfly, "sine_wave": sine_wave}[kind]


# -- configuration ----------------------------------------------------------------


@dataclass(frozen=True)
class TrajectoryConfig:
    kind: str = "lift"
    amplitude: float = 0.02
    period: float = 2.0
    duration: float = 2.0


@dataclass(frozen=True)
class TissueConfig:
    size_x: float = 0.08
    size_y: float = 0.06
    thickness: float = 0.01
    resolution_x: int = 20
    resolution_y: int = 15


@dataclass(frozen=True)
class MaterialConfig:
    distance_stiffness: float = 1.0
    volume_stiffness: float = 1.0
    shape_stiffness: float = 1.0
    particle_mass: float = 1e-3


@dataclass(frozen=True)
class GridConfig:
    # None: spacing_factor x mean surface spacing / margin_factor x amplitude
    spacing: Optional[float] = None
    margin: Optional[float] = None
    spacing_factor: float = 2.0
    margin_factor: float = 3.0


@dataclass(frozen=True)
class GradcheckConfig:
    offset: float = 0.005


@dataclass(frozen=True)
class Scenario:
    trajectory: TrajectoryConfig = TrajectoryConfig()
    tissue: TissueConfig = TissueConfig()
    # None: the surface point above the tissue centre
    grasp_location: Optional[tuple] = None
    grasp_count: int = 4
    dt: float = 0.01
    damping: float = 0.99
    gravity: tuple = (0.0, 0.0, -9.81)
    solver: SolverConfig = SolverConfig()
    tracked: MaterialConfig = MaterialConfig(0.1, 0.1, 0.01)
    oracle: MaterialConfig = MaterialConfig()
    registration: RegistrationConfig = RegistrationConfig()
    observation: ObservationConfig = ObservationConfig()
    grid: GridConfig = GridConfig()
    gradcheck: GradcheckConfig = GradcheckConfig()
    mesh_stride: int = 50
    workers: int = 1

    def __post_init__(self):
        tr = self.trajectory
        if tr.duration <= 0 or tr.period <= 0:
            raise ValidationError("duration and period must be positive")
        if tr.amplitude < 0:
            raise ValidationError("amplitude must be non-negative")
        if tr.kind not in TRAJECTORIES:
            raise UnknownKind(f"unknown trajectory kind {tr.kind!r}")
        if self.dt <= 0:
            raise ValidationError("dt must be positive")
        ts = self.tissue
        if min(ts.size_x, ts.size_y, ts.thickness) <= 0 or min(ts.resolution_x, ts.resolution_y) < 2:
            raise ValidationError("invalid tissue geometry")
        if self.grasp_location is not None:
            g = self.grasp_location
            if len(g) != 3 or not (0 <= g[0] <= ts.size_x and 0 <= g[1] <= ts.size_y):
                raise ValidationError("grasp_location must lie within the tissue's XY bounds")
        if self.grasp_count < 0 or self.mesh_stride < 1 or self.workers < 1:
            raise ValidationError("grasp_count >= 0, mesh_stride >= 1 and workers >= 1 required")
        for m in (self.tracked, self.oracle):
            for k in (m.distance_stiffness, m.volume_stiffness, m.shape_stiffness):
                if not 0 <= k <= 1:
                    raise ValidationError("stiffness values must lie in [0, 1]")
            if m.particle_mass <= 0:
                raise ValidationError("particle_mass must be positive")

    @property
    def frame_count(self) -> int:
        return int(round(self.trajectory.duration / self.dt))

    @property
    def seed(self) -> int:
        return self.observation.rng_seed

    def to_dict(self) -> dict:
        return _to_plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, data: dict) -> Scenario:
        if "scenario" in data and isinstance(data["scenario"], dict):
            data = data["scenario"]
        return _from_dict(cls, data)

    @classmethod
    def load(cls, path) -> Scenario:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ValidationError(f"cannot read scenario {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(data)

    def override(self, dotted: dict) -> Scenario:
        """Copy with values replaced by ``{"section.key": value}`` entries."""
        data = self.to_dict()
        for key, value in dotted.items():
            node = data
            parts = key.split(".")
            for p in parts[:-1]:
                node = node[p]
            node[parts[-1]] = value
        return Scenario.from_dict(data)


def _to_plain(obj):
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _from_dict(cls, data):
    if not isinstance(data, dict):
        raise ValidationError(f"expected a mapping for {cls.__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ValidationError(f"unknown {cls.__name__} key(s): {', '.join(sorted(unknown))}")
    defaults = cls()
    kwargs = {}
    for name, value in data.items():
        current = getattr(defaults, name)
        if dataclasses.is_dataclass(current):
            merged = dataclasses.asdict(current)
            merged.update(value if isinstance(value, dict) else {})
            kwargs[name] = _from_dict(type(current), merged)
        elif isinstance(current, tuple) or (isinstance(value, list) and name in ("grasp_location", "gravity")):
            kwargs[name] = tuple(value) if value is not None else None
        else:
            kwargs[name] = value
    try:
        return dataclasses.replace(defaults, **kwargs)
    except TypeError as exc:
        raise ValidationError(str(exc)) from None


def flat_keys(obj=None, prefix="") -> dict:
    """``{"section.key": default}`` for every scalar config entry."""
    obj = Scenario() if obj is None else obj
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(value):
            out.update(flat_keys(value, key + "."))
        else:
            out[key] = value
    return out


# -- scene construction ----------------------------------------------------------------


@dataclass
class Body:
    """A simulated tissue: volume mesh, particle state and constraints."""

    mesh: object
    surface: object
    system: ParticleSystem
    constraints: ConstraintSet
    grasped: np.ndarray


def clean_tissue_cloud(tissue: TissueConfig) -> np.ndarray:
    xs = np.linspace(0.0, tissue.size_x, tissue.resolution_x)
    ys = np.linspace(0.0, tissue.size_y, tissue.resolution_y)
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    return np.column_stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)])


def mean_spacing(points) -> float:
    d, _ = cKDTree(points).query(points, k=2)
    return float(d[:, 1].mean())


def _grasp_indices(surface_pts, fixed, location, count):
    if count == 0:
        return np.zeros(0, np.int64)
    free = np.flatnonzero(~fixed[: len(surface_pts)])
    d = np.linalg.norm(surface_pts[free] - location, axis=1)
    order = np.lexsort((free, d))
    return np.sort(free[order[:count]])


def make_body(cloud_pts, scn: Scenario, material: MaterialConfig, grasp_location) -> Body:
    ts = scn.tissue
    surface = triangulate_cloud(cloud_pts, (ts.resolution_x, ts.resolution_y))
    mesh = extrude_volume(surface, ts.thickness, (0.0, 0.0, -1.0))
    inv_mass = np.where(mesh.fixed_flags, 0.0, 1.0 / material.particle_mass)
    grasped = _grasp_indices(surface.vertices, mesh.fixed_flags, grasp_location, scn.grasp_count)
    clusters = []
    if len(grasped):
        touching = np.any(np.isin(mesh.tetrahedra, grasped), axis=1)
        clusters.append(np.unique(mesh.tetrahedra[touching]))
    cs = ConstraintSet.from_tets(
        mesh.particles,
        mesh.tetrahedra,
        material.distance_stiffness,
        material.volume_stiffness,
        material.shape_stiffness,
        extra_clusters=clusters,
    )
    system = ParticleSystem.at_rest(
        mesh.particles,
        inv_mass,
        mesh.surface_map,
        dt=scn.dt,
        damping=scn.damping,
        external_accel=scn.gravity,
    )
    return Body(mesh, surface, system, cs, grasped)


@dataclass
class Scene:
    scenario: Scenario
    oracle: Body
    tracked: Body
    initial_cloud: PointCloud
    sdf0: object
    assignment: np.ndarray
    rest_surface: np.ndarray
    tool_start: np.ndarray
    trajectory: Callable


def build_scene(scn: Scenario) -> Scene:
    ts = scn.tissue
    clean = clean_tissue_cloud(ts)
    if scn.grasp_location is None:
        centre = np.array([ts.size_x / 2, ts.size_y / 2, 0.0])
        start = clean[np.argmin(np.linalg.norm(clean - centre, axis=1))]
    else:
        start = np.asarray(scn.grasp_location, dtype=np.float64)
    oracle = make_body(clean, scn, scn.oracle, start)
    # the first observation is complete: the tool has not covered anything yet
    obs0_cfg = dataclasses.replace(scn.observation, occlusion_radius=0.0)
    p0 = generate_observation(oracle.surface.vertices, start, obs0_cfg, frame=0)
    tracked = make_body(p0.points, scn, scn.tracked, start)

    rest = tracked.system.surface_positions.copy()
    spacing = scn.grid.spacing or scn.grid.spacing_factor * mean_spacing(rest)
    margin = scn.grid.margin
    if margin is None:
        margin = max(scn.grid.margin_factor * scn.trajectory.amplitude, 2 * spacing)
    geometry = GridGeometry.enveloping(np.concatenate([p0.points, rest]), spacing, margin)
    sdf0 = build_initial_sdf(p0, geometry=geometry, workers=scn.workers)
    assignment = diffusion_assignment(geometry, SpatialIndex(rest), scn.workers)
    tr = scn.trajectory
    traj = make_trajectory(tr.kind, tr.amplitude, tr.period, tr.duration, start)
    return Scene(scn, oracle, tracked, p0, sdf0, assignment, rest, start, traj)


# -- run ----------------------------------------------------------------------------


@dataclass
class RunRecord:
    scenario: Scenario
    times: np.ndarray
    tool: np.ndarray
    oracle_surfaces: np.ndarray
    observed: np.ndarray
    occluded: np.ndarray
    surfaces: dict
    costs: dict
    reports: dict
    gradients: np.ndarray
    persistent_occlusion: np.ndarray
    rest_surface: np.ndarray
    triangles: np.ndarray
    timings: dict = field(default_factory=dict)

    @property
    def frame_count(self) -> int:
        return len(self.times) - 1

    @property
    def runs(self) -> tuple:
        return tuple(self.surfaces)

    def error_map(self, run: str) -> np.ndarray:
        """Per-particle error against the observation, averaged over frames."""
        per = np.stack([r.per_particle for r in self.reports[run]])
        with np.errstate(invalid="ignore"):
            counts = np.isfinite(per).sum(axis=0)
            total = np.nansum(per, axis=0)
        return np.where(counts > 0, total / np.maximum(counts, 1), np.nan)

    def truth_errors(self, run: str) -> np.ndarray:
        """(frames, particles) distances to the noise-free ground truth."""
        return np.linalg.norm(self.surfaces[run][1:] - self.oracle_surfaces[1:], axis=2)

    def mean_error(self, run: str) -> float:
        return float(np.mean([r.full for r in self.reports[run]]))

    def summary(self) -> dict:
        out = {"frames": self.frame_count}
        for run in self.runs:
            errs = self.reports[run]
            out[run] = {
                "mean_full_error": float(np.mean([e.full for e in errs])),
                "mean_masked_error": float(np.nanmean([e.masked for e in errs])),
                "mean_xy_error": float(np.mean([e.xy for e in errs])),
                "mean_z_error": float(np.mean([e.z for e in errs])),
                "mean_cost": float(np.mean(self.costs[run][1:])),
                "mean_truth_error": float(self.truth_errors(run).mean()),
            }
        return out


def run_scenario(scn: Scenario, baseline: bool = True, progress: Optional[Callable[[int], None]] = None) -> RunRecord:
    """Drive the oracle, the registered simulation and (optionally) the
    unregistered baseline through all frames on one observation stream."""
    t_setup = time.perf_counter()
    scene = build_scene(scn)
    F = scn.frame_count
    n = len(scene.rest_surface)
    reg_cfg = scn.registration
    solver = scn.solver

    runs = {"with": scene.tracked.system.copy()}
    if baseline:
        runs["without"] = scene.tracked.system.copy()
    bodies = {"with": scene.tracked, "without": scene.tracked}
    lam = {"with": reg_cfg.lambda_regi, "without": 0.0}

    oracle_sys = scene.oracle.system.copy()
    oracle_rest = scene.oracle.system.positions
    tracked_rest = scene.tracked.system.positions

    times = np.arange(F + 1) * scn.dt
    tool = np.array([scene.trajectory(t) for t in times])
    surfaces = {k: np.empty((F + 1, n, 3)) for k in runs}
    for k in runs:
        surfaces[k][0] = runs[k].surface_positions
    oracle_surfaces = np.empty((F + 1, n, 3))
    oracle_surfaces[0] = oracle_sys.surface_positions
    observed = np.empty((F + 1, n, 3))
    occluded = np.zeros((F + 1, n), dtype=bool)
    observed[0], occluded[0] = scene.initial_cloud.matched(n)
    costs = {k: np.zeros(F + 1) for k in runs}
    gradients = np.zeros((F + 1, n, 3))
    timings = {s: [] for s in ("oracle", "observation", "registration", "simulation", "baseline")}
    timings["setup"] = [time.perf_counter() - t_setup]

    idf0 = build_idf(scene.rest_surface, scene.rest_surface, scene.sdf0.geometry, assignment=scene.assignment)
    for name in runs:
        costs[name][0] = RegistrationProblem(scene.initial_cloud, scene.sdf0, idf0, reg_cfg).cost(scene.rest_surface)

    for f in range(1, F + 1):
        offset = tool[f] - tool[0]
        t0 = time.perf_counter()
        og = scene.oracle.grasped
        oracle_cs = scene.oracle.constraints.with_grasp(Grasp(og, oracle_rest[og] + offset) if len(og) else None)
        try:
            oracle_sys = simulate_step(oracle_sys, oracle_cs, solver)
        except PbdRegError as exc:
            raise type(exc)(f"frame {f} (oracle): {exc}") from exc
        oracle_surfaces[f] = oracle_sys.surface_positions
        t1 = time.perf_counter()
        cloud = generate_observation(oracle_surfaces[f], tool[f], scn.observation, frame=f, frame_time=times[f])
        observed[f], occluded[f] = cloud.matched(n)
        visible = cloud.visible_points()
        t2 = time.perf_counter()
        timings["oracle"].append(t1 - t0)
        timings["observation"].append(t2 - t1)

        tg = scene.tracked.grasped
        grasp = Grasp(tg, tracked_rest[tg] + offset) if len(tg) else None
        for name, system in runs.items():
            ta = time.perf_counter()
            cs = bodies[name].constraints.with_grasp(grasp)
            problem = None
            if len(visible):
                problem = RegistrationProblem(visible, scene.sdf0, idf0, reg_cfg)
                if lam[name] > 0:
                    gradients[f] = problem.gradient(system.surface_positions)
                    cs = cs.with_registration(problem.constraint(system.surface_indices, lam[name], tg))
            tb = time.perf_counter()
            try:
                system = simulate_step(system, cs, solver)
            except PbdRegError as exc:
                raise type(exc)(f"frame {f} ({name} registration): {exc}") from exc
            tc = time.perf_counter()
            runs[name] = system
            surfaces[name][f] = system.surface_positions
            costs[name][f] = problem.cost(surfaces[name][f]) if problem is not None else float("nan")
            if name == "with":
                timings["registration"].append(tb - ta)
                timings["simulation"].append(tc - tb)
            else:
                timings["baseline"].append(tc - ta)
        if progress is not None:
            progress(f)

    # particles hidden in more than half of the frames drop out of the masked error
    hidden = occluded[1:] | np.isnan(observed[1:, :, 0])
    persistent = hidden.mean(axis=0) > 0.5 if F else np.zeros(n, dtype=bool)
    reports = {
        name: [evaluation_error(surfaces[name][f], observed[f], persistent) for f in range(1, F + 1)]
        for name in runs
    }
    return RunRecord(
        scenario=scn,
        times=times,
        tool=tool,
        oracle_surfaces=oracle_surfaces,
        observed=observed,
        occluded=occluded,
        surfaces=surfaces,
        costs=costs,
        reports=reports,
        gradients=gradients,
        persistent_occlusion=persistent,
        rest_surface=scene.rest_surface,
        triangles=scene.tracked.surface.triangles,
        timings=timings,
    )


def last_seen_hold(record: RunRecord) -> np.ndarray:
    """Naive estimate keeping each point at its last observed position."""
    obs = record.observed
    out = np.empty_like(obs)
    out[0] = obs[0]
    for f in range(1, len(obs)):
        seen = np.isfinite(obs[f, :, 0]) & ~record.occluded[f]
        out[f] = np.where(seen[:, None], obs[f], out[f - 1])
    return out


# -- gradient check ------------------------------------------------------------------


def gradcheck(scn: Scenario) -> dict:
    """Forward-difference registration gradient against a central-difference
    oracle (step / 10) on the undeformed tissue with a flat offset cloud."""
    t0 = time.perf_counter()
    rest = clean_tissue_cloud(scn.tissue)
    cloud = rest + (0.0, 0.0, scn.gradcheck.offset)
    spacing = scn.grid.spacing or scn.grid.spacing_factor * mean_spacing(rest)
    margin = scn.grid.margin
    if margin is None:
        margin = max(scn.grid.margin_factor * scn.trajectory.amplitude, 2 * spacing)
    geometry = GridGeometry.enveloping(np.concatenate([rest, cloud]), spacing, margin)
    sdf0 = build_initial_sdf(rest, geometry=geometry, workers=scn.workers)
    idf = build_idf(rest, rest, geometry, workers=scn.workers)
    cfg = dataclasses.replace(scn.registration, difference="forward")
    step = cfg.step_for(sdf0)
    forward = RegistrationProblem(cloud, sdf0, idf, cfg).gradient(rest)
    central = full_gradient(rest, cloud, sdf0, rest, step / 10.0, central=True, clamp=cfg.clamp)
    return {
        "particles": len(rest),
        "probe_step": step,
        "max_relative_deviation": relative_deviation(forward, central),
        "max_abs_gradient": float(np.abs(central).max()),
        "seconds": time.perf_counter() - t0,
    }


# -- export --------------------------------------------------------------------------


def _num(v) -> str:
    return repr(float(v))


def export_results(record: RunRecord, out_dir) -> list:
    """Write CSV metrics, OBJ snapshots, the initial tet mesh and a manifest."""
    out = Path(out_dir)
    (out / "meshes").mkdir(parents=True, exist_ok=True)
    written = []
    runs = ("with", "without")
    header = ["frame", "time"]
    for r in runs:
        header += [f"J_{r}", f"full_{r}", f"masked_{r}", f"xy_{r}", f"z_{r}"]
    path = out / "errors.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for f in range(1, record.frame_count + 1):
            row = [f, _num(record.times[f])]
            for r in runs:
                if r in record.reports:
                    e: EvaluationError = record.reports[r][f - 1]
                    row += [_num(record.costs[r][f]), _num(e.full), _num(e.masked), _num(e.xy), _num(e.z)]
                else:
                    row += [""] * 5
            w.writerow(row)
    written.append(path)

    hidden = record.occluded[1:] | np.isnan(record.observed[1:, :, 0])
    frac = hidden.mean(axis=0) if record.frame_count else np.zeros(len(record.rest_surface))
    for r in record.runs:
        path = out / f"heatmap_{r}.csv"
        emap = record.error_map(r)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["particle", "rest_x", "rest_y", "mean_error", "occluded_fraction"])
            for i, (p, e) in enumerate(zip(record.rest_surface, emap)):
                w.writerow([i, _num(p[0]), _num(p[1]), _num(e), _num(frac[i])])
        written.append(path)

    stride = record.scenario.mesh_stride
    frames = list(range(0, record.frame_count + 1, stride))
    for r in list(record.runs) + ["oracle"]:
        d = out / "meshes" / r
        d.mkdir(exist_ok=True)
        series = record.oracle_surfaces if r == "oracle" else record.surfaces[r]
        for f in frames:
            path = d / f"frame_{f:05d}.obj"
            write_obj(path, series[f], record.triangles)
            written.append(path)

    scene = build_scene(record.scenario)
    path = out / "tracked_rest.tet"
    write_tet(path, scene.tracked.mesh)
    written.append(path)

    manifest = {
        "package_version": __version__,
        "scenario": record.scenario.to_dict(),
        "seed": record.scenario.seed,
        "frames": record.frame_count,
        "summary": record.summary(),
        "timings": {k: {"total": float(np.sum(v)), "mean": float(np.mean(v)) if v else 0.0}
                    for k, v in record.timings.items()},
        "files": sorted(str(p.relative_to(out)) for p in written),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    written.append(path)
    return written
