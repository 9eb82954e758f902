"""Surface and volume meshes, plus exact nearest-neighbour queries."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.interpolate import LinearNDInterpolator
from scipy.spatial import cKDTree, QhullError

from .errors import InsufficientPoints, InvertedTet, NonHeightField, ValidationError

_AREA_EPS = 1e-18


def _points(a) -> np.ndarray:
    arr = np.asarray(getattr(a, "points", a), dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValidationError(f"expected an (n, 3) point array, got shape {arr.shape}")
    return arr


def boundary_vertices(triangles: np.ndarray, n_vertices: int) -> np.ndarray:
    """Flags for vertices touching an edge used by exactly one triangle."""
    tri = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    edges = np.sort(np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]]), axis=1)
    uniq, counts = np.unique(edges, axis=0, return_counts=True)
    flags = np.zeros(n_vertices, dtype=bool)
    flags[uniq[counts == 1].ravel()] = True
    return flags


def triangle_areas(vertices, triangles) -> np.ndarray:
    v = np.asarray(vertices, dtype=np.float64)
    t = np.asarray(triangles, dtype=np.int64)
    return 0.5 * np.linalg.norm(np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]]), axis=1)


def tet_volumes(particles, tets) -> np.ndarray:
    x = np.asarray(particles, dtype=np.float64)
    t = np.asarray(tets, dtype=np.int64)
    a = x[t[:, 0]]
    return np.einsum("ij,ij->i", np.cross(x[t[:, 1]] - a, x[t[:, 2]] - a), x[t[:, 3]] - a) / 6.0


@dataclass
class SurfaceMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    boundary_vertex_flags: Optional[np.ndarray] = None
    # (rx, ry) when the mesh comes from a regular height-field grid
    grid_shape: Optional[tuple] = None

    def __post_init__(self):
        self.vertices = _points(self.vertices)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValidationError("triangle index out of range")
        if np.any(triangle_areas(self.vertices, self.triangles) <= _AREA_EPS):
            raise ValidationError("degenerate triangle")
        flags = boundary_vertices(self.triangles, len(self.vertices))
        if self.boundary_vertex_flags is None:
            self.boundary_vertex_flags = flags
        else:
            self.boundary_vertex_flags = np.asarray(self.boundary_vertex_flags, dtype=bool)
            if not np.array_equal(self.boundary_vertex_flags, flags):
                raise ValidationError("boundary flags disagree with edge adjacency")

    @property
    def area(self) -> float:
        return float(triangle_areas(self.vertices, self.triangles).sum())

    def mean_edge_length(self) -> float:
        t = self.triangles
        e = np.unique(np.sort(np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1), axis=0)
        return float(np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1).mean())


@dataclass
class VolumeMesh:
    particles: np.ndarray
    tetrahedra: np.ndarray
    surface_map: np.ndarray
    fixed_flags: np.ndarray

    def __post_init__(self):
        self.particles = _points(self.particles)
        self.tetrahedra = np.asarray(self.tetrahedra, dtype=np.int64).reshape(-1, 4)
        self.surface_map = np.asarray(self.surface_map, dtype=np.int64)
        self.fixed_flags = np.asarray(self.fixed_flags, dtype=bool)
        if len(np.unique(self.surface_map)) != len(self.surface_map):
            raise ValidationError("surface_map must be injective")
        if np.any(tet_volumes(self.particles, self.tetrahedra) <= 0):
            raise InvertedTet("rest tetrahedra must be positively oriented")

    @property
    def volume(self) -> float:
        return float(tet_volumes(self.particles, self.tetrahedra).sum())


class SpatialIndex:
    """Exact Euclidean nearest neighbour over a fixed point set.

    Backed by a k-d tree; candidates are re-ranked with plain squared
    distances so that ties resolve to the lowest index, exactly as a linear
    scan with ``argmin`` would.
    """

    def __init__(self, points):
        self.points = np.ascontiguousarray(_points(points))
        if len(self.points) == 0:
            raise ValidationError("cannot index an empty point set")
        self._tree = cKDTree(self.points)

    def __len__(self):
        return len(self.points)

    def query(self, q, workers: int = 1) -> np.ndarray:
        """Nearest indices for an (m, 3) batch of queries."""
        q = np.atleast_2d(np.asarray(q, dtype=np.float64))
        n = len(self.points)
        k = min(n, 4)
        d, idx = self._tree.query(q, k=k, workers=workers)
        if k == 1:
            d, idx = d[:, None], idx[:, None]
        d2 = ((self.points[idx] - q[:, None, :]) ** 2).sum(axis=-1)
        best = d2.min(axis=1)
        out = np.where(d2 == best[:, None], idx, n).min(axis=1)
        if k < n:
            # possible ties beyond the k-th candidate
            far = d[:, -1] ** 2 <= best * (1 + 1e-9) + 1e-300
            for r in np.flatnonzero(far):
                cand = np.array(self._tree.query_ball_point(q[r], np.sqrt(best[r]) * (1 + 1e-6) + 1e-150))
                cd2 = ((self.points[cand] - q[r]) ** 2).sum(axis=-1)
                out[r] = cand[cd2 == cd2.min()].min()
        return out


def nearest_point(index: SpatialIndex, q):
    """Nearest indexed point to ``q`` and its index."""
    i = int(index.query(np.asarray(q, dtype=np.float64).reshape(1, 3))[0])
    return index.points[i].copy(), i


def _grid_triangles(rx: int, ry: int) -> np.ndarray:
    i, j = np.meshgrid(np.arange(rx - 1), np.arange(ry - 1), indexing="xy")
    v00 = (j * rx + i).ravel()
    v10 = v00 + 1
    v01 = v00 + rx
    v11 = v01 + 1
    return np.concatenate([np.stack([v00, v10, v11], 1), np.stack([v00, v11, v01], 1)])


def _plane_fill(cloud, targets, k=6):
    """Heights at ``targets`` from local least-squares planes (exact on linear fields)."""
    tree = cKDTree(cloud[:, :2])
    k = min(k, len(cloud))
    _, nn = tree.query(targets, k=k)
    out = np.empty(len(targets))
    for r, idx in enumerate(np.atleast_2d(nn)):
        pts = cloud[idx]
        A = np.column_stack([np.ones(len(idx)), pts[:, 0], pts[:, 1]])
        coef, _, rank, _ = np.linalg.lstsq(A, pts[:, 2], rcond=None)
        if rank < 3:
            out[r] = pts[0, 2]
        else:
            out[r] = coef[0] + coef[1] * targets[r, 0] + coef[2] * targets[r, 1]
    return out


def triangulate_cloud(cloud, grid_resolution=(20, 15)) -> SurfaceMesh:
    """Resample a height-field cloud onto a regular XY grid.

    Vertex ``(i, j)`` sits at index ``j * rx + i``; every cell is split into
    two counter-clockwise triangles seen from +z.
    """
    pts = _points(cloud)
    rx, ry = (int(r) for r in grid_resolution)
    if rx < 2 or ry < 2:
        raise ValidationError("grid resolution must be at least 2 x 2")
    if len(pts) < 4:
        raise InsufficientPoints(f"need at least 4 points, got {len(pts)}")
    lo = pts[:, :2].min(axis=0)
    hi = pts[:, :2].max(axis=0)
    if np.any(hi - lo <= 0):
        raise InsufficientPoints("cloud has zero XY extent")
    cell = (hi - lo) / (rx - 1, ry - 1)
    diag = float(np.hypot(*cell))
    ci = np.clip(((pts[:, :2] - lo) / cell).astype(np.int64), 0, (rx - 2, ry - 2))
    key = ci[:, 1] * (rx - 1) + ci[:, 0]
    order = np.argsort(key, kind="stable")
    ks = key[order]
    starts = np.flatnonzero(np.r_[True, ks[1:] != ks[:-1]])
    zmax = np.maximum.reduceat(pts[order, 2], starts)
    zmin = np.minimum.reduceat(pts[order, 2], starts)
    if np.any(zmax - zmin > diag):
        raise NonHeightField("cloud is not a height field at the requested resolution")

    xs = np.linspace(lo[0], hi[0], rx)
    ys = np.linspace(lo[1], hi[1], ry)
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    targets = np.column_stack([gx.ravel(), gy.ravel()])
    try:
        z = LinearNDInterpolator(pts[:, :2], pts[:, 2])(targets)
    except QhullError as exc:
        raise InsufficientPoints(f"cloud is degenerate in XY: {exc}") from None
    missing = np.isnan(z)
    if missing.any():
        z[missing] = _plane_fill(pts, targets[missing])
    verts = np.column_stack([targets, z])
    return SurfaceMesh(verts, _grid_triangles(rx, ry), grid_shape=(rx, ry))


def extrude_volume(surface: SurfaceMesh, thickness: float, gravity_dir=(0.0, 0.0, -1.0)) -> VolumeMesh:
    """Extrude ``surface`` by ``thickness`` along ``gravity_dir`` into tetrahedra.

    Each triangular prism is cut into three tets.  The cut diagonal on every
    quad side joins the top vertex with the larger global index to the
    bottom vertex with the smaller one, so neighbouring prisms share faces.
    Border vertices of the surface and their copies in the bottom layer are
    flagged fixed.
    """
    if not thickness > 0:
        raise ValidationError("thickness must be positive")
    g = np.asarray(gravity_dir, dtype=np.float64)
    g = g / np.linalg.norm(g)
    top = surface.vertices
    n = len(top)
    particles = np.concatenate([top, top + thickness * g])

    raw = surface.triangles
    tri = np.sort(raw, axis=1)
    # parity of the sorting permutation: odd parity reverses the winding
    inversions = (raw[:, 0] > raw[:, 1]).astype(int) + (raw[:, 0] > raw[:, 2]) + (raw[:, 1] > raw[:, 2])
    odd = np.tile(inversions % 2 == 1, 3)
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    tets = np.concatenate([
        np.stack([a, b, c, a + n], 1),
        np.stack([b, c, a + n, b + n], 1),
        np.stack([c, a + n, b + n, c + n], 1),
    ])
    tets[odd] = tets[odd][:, [1, 0, 2, 3]]
    vol = tet_volumes(particles, tets)
    if np.sum(vol < 0) > np.sum(vol > 0):
        tets[:, [0, 1]] = tets[:, [1, 0]]
        vol = -vol
    if np.any(vol <= 0):
        raise InvertedTet(f"{int(np.sum(vol <= 0))} tetrahedra have non-positive volume")
    fixed = np.concatenate([surface.boundary_vertex_flags, surface.boundary_vertex_flags])
    return VolumeMesh(particles, tets, np.arange(n), fixed)


# -- export --------------------------------------------------------------------


def write_obj(path, vertices, triangles) -> None:
    with open(path, "w") as fh:
        for v in np.asarray(vertices):
            fh.write(f"v {v[0]:.12g} {v[1]:.12g} {v[2]:.12g}\n")
        for t in np.asarray(triangles):
            fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


def write_tet(path, mesh: VolumeMesh) -> None:
    """Plain-text tet mesh.

    Header ``tet <n_particles> <n_tets> <n_surface>``, then one
    ``x y z fixed`` line per particle, one ``a b c d`` line (0-based) per
    tetrahedron and one particle index per surface vertex.
    """
    with open(path, "w") as fh:
        fh.write(f"tet {len(mesh.particles)} {len(mesh.tetrahedra)} {len(mesh.surface_map)}\n")
        for p, f in zip(mesh.particles, mesh.fixed_flags):
            fh.write(f"{p[0]:.12g} {p[1]:.12g} {p[2]:.12g} {int(f)}\n")
        for t in mesh.tetrahedra:
            fh.write(f"{t[0]} {t[1]} {t[2]} {t[3]}\n")
        for s in mesh.surface_map:
            fh.write(f"{s}\n")


def read_tet(path) -> VolumeMesh:
    with open(path) as fh:
        head = fh.readline().split()
        if len(head) != 4 or head[0] != "tet":
            raise ValidationError(f"{path}: not a tet file")
        n, m, k = (int(v) for v in head[1:])
        rows = [fh.readline().split() for _ in range(n)]
        tets = [[int(v) for v in fh.readline().split()] for _ in range(m)]
        surface = [int(fh.readline()) for _ in range(k)]
    particles = np.array([[float(v) for v in r[:3]] for r in rows]).reshape(-1, 3)
    fixed = np.array([bool(int(r[3])) for r in rows])
    return VolumeMesh(particles, np.array(tets, dtype=np.int64).reshape(-1, 4), surface, fixed)
