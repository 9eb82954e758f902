import numpy as np
import pytest
from hypothesis import given, strategies as st

from pbdreg.deformation import build_idf, deformed_sdf, diffusion_assignment, trace_back
from pbdreg.errors import LengthMismatch, OutOfBounds
from pbdreg.geometry import SpatialIndex
from pbdreg.sdf_grid import GridGeometry, build_initial_sdf, interpolate


def plane(n=6, spacing=0.01):
    xs = np.arange(n) * spacing
    gx, gy = np.meshgrid(xs, xs)
    return np.column_stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)])


@pytest.fixture
def scene():
    rest = plane()
    geom = GridGeometry.enveloping(rest, 0.013, 0.03)
    return rest, geom, build_initial_sdf(rest, geometry=geom)


def test_zero_deformation_all_zero(scene):
    rest, geom, _ = scene
    idf = build_idf(rest, rest, geom)
    assert np.all(idf.vectors == 0)


def test_uniform_lift(scene):
    rest, geom, _ = scene
    idf = build_idf(rest, rest + (0, 0, 0.01), geom)
    np.testing.assert_array_equal(idf.vectors, np.tile([0, 0, -0.01], (geom.n_vertices, 1)))


def test_single_particle_voronoi(scene):
    rest, geom, _ = scene
    cur = rest.copy()
    cur[7] += (0.001, -0.002, 0.003)
    idf = build_idf(rest, cur, geom)
    d2 = ((geom.vertices()[:, None, :] - rest[None]) ** 2).sum(-1)
    owned = d2.argmin(axis=1) == 7
    assert owned.any()
    np.testing.assert_array_equal(idf.vectors[owned], np.tile(rest[7] - cur[7], (owned.sum(), 1)))
    assert np.all(idf.vectors[~owned] == 0)


@given(st.integers(0, 100_000))
def test_assignment_is_voronoi_partition(seed):
    g = np.random.default_rng(seed)
    rest = g.integers(0, 5, size=(12, 3)) * 0.5  # lattice: exact ties
    geom = GridGeometry((0, 0, 0), 0.5, (5, 5, 5))
    a = diffusion_assignment(geom, SpatialIndex(rest))
    d2 = ((geom.vertices()[:, None, :] - rest[None]) ** 2).sum(-1)
    np.testing.assert_array_equal(a, d2.argmin(axis=1))


def test_length_mismatch(scene):
    rest, geom, _ = scene
    with pytest.raises(LengthMismatch):
        build_idf(rest, rest[:-1], geom)


def test_identity_exact(scene, rng):
    rest, geom, sdf = scene
    idf = build_idf(rest, rest, geom)
    q = rng.uniform(geom.origin, geom.upper, size=(1000, 3))
    np.testing.assert_array_equal(deformed_sdf(idf, sdf, q), interpolate(sdf, q))


def test_uniform_translation(scene, rng):
    rest, geom, sdf = scene
    d = np.array([0.004, -0.003, 0.006])
    idf = build_idf(rest, rest + d, geom)
    q = rest[rng.choice(len(rest), 10)] + rng.normal(scale=0.003, size=(10, 3))
    got = deformed_sdf(idf, sdf, q + d)
    want = interpolate(sdf, q)
    assert np.all(np.linalg.norm(got - want, axis=1) <= geom.cell_diagonal)


def test_surface_particle_traces_back(scene):
    rest, geom, sdf = scene
    cur = rest + (0, 0, 0.004) + 0.001 * np.sin(rest[:, :1] * 300)
    idf = build_idf(rest, cur, geom)
    got = np.linalg.norm(deformed_sdf(idf, sdf, cur), axis=1)
    assert np.all(got <= geom.cell_diagonal)


def test_vertex_reproduces_inverse_vector(scene):
    rest, geom, _ = scene
    cur = rest + np.arange(len(rest))[:, None] * 1e-4
    idf = build_idf(rest, cur, geom)
    v = geom.vertices()
    # a vertex query returns the stored vector of its nearest rest particle
    k = 17
    owner = idf.assignment[k]
    np.testing.assert_array_equal(idf.at(v[k]), rest[owner] - cur[owner])


def test_out_of_bounds_vs_clamp(scene):
    rest, geom, sdf = scene
    idf = build_idf(rest, rest - (0, 0, 1.0), geom)
    q = rest[:3]
    with pytest.raises(OutOfBounds):
        deformed_sdf(idf, sdf, q)
    out = deformed_sdf(idf, sdf, q, clamp=True)
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(trace_back(idf, q, clamp=True)[:, 2], geom.upper[2])
