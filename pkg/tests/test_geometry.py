import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gensart.errors import ConfigurationError
from gensart.geometry import (Geometry, VolumeGrid, adjoint, back_project, divergent_geometries,
                              get_counters, masked_divide, parallel_geometries, project,
                              ray_density, unit_projections)


def smooth_detector_field(geom, rng, modes=5):
    """Random band-limited detector field: a few low cosine modes across the detector."""
    s = geom.det_coords(0) / (0.5 * geom.det_shape[0] * geom.pitch[0])
    p = sum(rng.standard_normal() * np.cos(np.pi * k * s + rng.uniform(0, 2 * np.pi))
            for k in range(1, modes + 1))
    return np.broadcast_to(p.reshape((-1,) + (1,) * (len(geom.det_shape) - 1)),
                           geom.det_shape).copy()


def _pp_star_error(grid, geom, rng, smooth=True):
    units = unit_projections(grid, geom)
    p = smooth_detector_field(geom, rng) if smooth else rng.standard_normal(geom.det_shape)
    p = p * (units.u_tilde > 0)
    lhs = project(adjoint(p, grid, geom), grid, geom)
    rhs = units.u_tilde * p
    return np.linalg.norm(lhs - rhs) / np.linalg.norm(rhs)


# --------------------------------------------------------------------------
# grids and geometries
# --------------------------------------------------------------------------

def test_grid_masks():
    g = VolumeGrid((8, 8), 1.0, "ball")
    assert g.mask.sum() < 64 and g.mask[4, 4]
    assert VolumeGrid((4, 4, 4), omega="box").mask.all()
    cyl = VolumeGrid((8, 8, 3), omega="cylinder")
    assert np.array_equal(cyl.mask[:, :, 0], cyl.mask[:, :, 2])


@pytest.mark.parametrize("kwargs", [
    dict(shape=(4,)), dict(shape=(4, 4), voxel_size=0.0), dict(shape=(4, 4), omega="star"),
    dict(shape=(4, 4), omega="custom"),
])
def test_grid_rejects_bad_input(kwargs):
    with pytest.raises(ConfigurationError):
        VolumeGrid(**kwargs)


def test_geometry_validation():
    with pytest.raises(ConfigurationError):
        Geometry("cone", 2, 0.0, (8,), (1.0,))
    with pytest.raises(ConfigurationError):
        Geometry("divergent", 2, 0.0, (8,), (0.1,))
    g = VolumeGrid((32, 32), 1.0, "ball")
    with pytest.raises(ConfigurationError):
        divergent_geometries(g, [0.0], source_distance=10.0)
    narrow = Geometry("parallel", 2, 0.0, (4,), (1.0,))
    with pytest.raises(ConfigurationError):
        narrow.validate(g)


def test_direction_is_unit():
    for geo in parallel_geometries(VolumeGrid((16, 16, 8)), np.linspace(0, 3, 7)):
        assert abs(np.linalg.norm(geo.direction) - 1.0) < 1e-15


def test_default_detector_covers_support():
    # a detector two pixels wider on each side sees nothing beyond the default one
    g = VolumeGrid((33, 33), 0.5, "ball")
    for geo in parallel_geometries(g, [0.0, 1.0]) + divergent_geometries(g, [0.0, 1.0], 40.0):
        geo.validate(g)
        m = geo.det_shape[0]
        wide = Geometry(geo.mode, 2, geo.angle, (m + 4,), geo.pitch, geo.source_distance)
        p = project(g.ones(), g, wide)
        assert not np.any(p[:2]) and not np.any(p[-2:])
        assert np.allclose(p[2:-2], project(g.ones(), g, geo))


# --------------------------------------------------------------------------
# project
# --------------------------------------------------------------------------

def test_project_cube_thickness():
    g = VolumeGrid((16, 16, 16), 1.0 / 16, "box")
    geo = parallel_geometries(g, [0.0])[0]
    p = project(g.ones(), g, geo)
    vals = np.unique(np.round(p, 12))
    assert set(vals) == {0.0, 1.0}
    # footprint is the 16 x 16 centre of the detector
    assert (p > 0.5).sum() == 16 * 16


def test_project_zero():
    g = VolumeGrid((16, 16), 1.0, "ball")
    geo = parallel_geometries(g, [0.3])[0]
    assert not np.any(project(g.zeros(), g, geo))


def test_project_ball_chord_lengths():
    N = 256
    g = VolumeGrid((N, N), 2.0 / N, "ball")
    geo = parallel_geometries(g, [0.37])[0]
    s = geo.det_coords(0)
    exact = 2 * np.sqrt(np.clip(1.0 - s ** 2, 0.0, None))
    p = project(g.ones(), g, geo)
    assert np.linalg.norm(p - exact) / np.linalg.norm(exact) < 0.02


def test_project_ignores_values_outside_omega():
    g = VolumeGrid((32, 32), 1.0, "ball")
    geo = parallel_geometries(g, [0.2])[0]
    f = np.ones(g.shape)
    assert np.array_equal(project(f, g, geo), project(g.ones(), g, geo))


def test_project_shape_check():
    g = VolumeGrid((8, 8))
    geo = parallel_geometries(g, [0.0])[0]
    with pytest.raises(ConfigurationError):
        project(np.zeros((4, 4)), g, geo)
    with pytest.raises(ConfigurationError):
        project(np.zeros((8, 8, 8)), VolumeGrid((8, 8, 8)), geo)


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 10_000))
def test_project_linearity(a, b, seed):
    rng = np.random.default_rng(seed)
    g = VolumeGrid((12, 12), 1.0, "ball")
    geo = divergent_geometries(g, [rng.uniform(0, 6)], 30.0)[0]
    f, h = rng.standard_normal((2,) + g.shape)
    lhs = project(a * f + b * h, g, geo)
    rhs = a * project(f, g, geo) + b * project(h, g, geo)
    assert np.allclose(lhs, rhs, rtol=0, atol=1e-12 * (1 + np.abs(rhs).max()))


def test_supersampled_projection_is_a_different_operator():
    g = VolumeGrid((32, 32), 1.0, "ball")
    geo = parallel_geometries(g, [0.5])[0]
    f = np.random.default_rng(0).random(g.shape)
    p1 = project(f, g, geo)
    p2 = project(f, g, geo, supersample=2)
    assert np.linalg.norm(p1 - p2) > 1e-6 * np.linalg.norm(p1)
    assert np.linalg.norm(p1 - p2) < 0.1 * np.linalg.norm(p1)


# --------------------------------------------------------------------------
# adjoint and back-projection
# --------------------------------------------------------------------------

@pytest.mark.parametrize("mode", ["parallel", "divergent"])
@pytest.mark.parametrize("shape", [(40, 40), (16, 16, 12)])
def test_adjointness(mode, shape, rng):
    g = VolumeGrid(shape, 0.7, "ball")
    geo = (parallel_geometries(g, [0.9])[0] if mode == "parallel"
           else divergent_geometries(g, [0.9], 60.0)[0])
    f = rng.standard_normal(g.shape) * g.mask
    p = rng.standard_normal(geo.det_shape)
    lhs = float(np.sum(geo.pixel_measure() * project(f, g, geo) * p))
    rhs = g.inner(f, adjoint(p, g, geo))
    assert abs(lhs - rhs) <= 1e-12 * (abs(lhs) + 1)


def test_adjoint_equals_back_project_for_parallel(rng):
    g = VolumeGrid((24, 24), 1.0, "ball")
    geo = parallel_geometries(g, [1.1])[0]
    p = rng.standard_normal(geo.det_shape)
    assert np.array_equal(adjoint(p, g, geo), back_project(p, g, geo))


def test_back_project_zero():
    g = VolumeGrid((16, 16), 1.0, "ball")
    geo = divergent_geometries(g, [0.0], 40.0)[0]
    assert not np.any(back_project(np.zeros(geo.det_shape), g, geo))


def test_back_project_one_axis_aligned_is_indicator():
    g = VolumeGrid((64, 64), 1.0, "ball")
    for geo in parallel_geometries(g, [0.0, math.pi / 2]):
        u = unit_projections(g, geo).u
        b = back_project((u > 0).astype(float), g, geo)
        assert np.abs(b - g.ones()).max() < 1e-12


def test_back_project_one_oblique_close_to_indicator():
    # ray-driven transposes carry a weight ripple at oblique angles
    g = VolumeGrid((128, 128), 1.0, "ball")
    geo = parallel_geometries(g, [0.4])[0]
    u = unit_projections(g, geo).u
    b = back_project((u > 0).astype(float), g, geo)
    rms = np.sqrt(np.mean((b - 1.0)[g.mask] ** 2))
    assert rms < 0.03


def test_back_project_constant_along_rays_axis_aligned():
    g = VolumeGrid((48, 48), 1.0, "ball")
    geo = parallel_geometries(g, [0.0])[0]
    s = geo.det_coords(0)
    b = back_project(s, g, geo)
    both = g.mask[1:] & g.mask[:-1]
    assert np.abs(np.diff(b, axis=0)[both]).max() < 1e-12
    # and the profile across the rays is the detector ramp
    col = b[24]
    inside = g.mask[24]
    assert np.allclose(col[inside], g.axis_coords(1)[inside], atol=1e-12)


def test_back_project_constant_along_rays_3d():
    g = VolumeGrid((24, 24, 8), 1.0, "cylinder")
    geo = parallel_geometries(g, [0.0])[0]
    p = np.broadcast_to(geo.det_coords(0)[:, None], geo.det_shape)
    b = back_project(p, g, geo)
    both = g.mask[1:] & g.mask[:-1]
    assert np.abs(np.diff(b, axis=0)[both]).max() < 1e-12
    assert np.abs(np.diff(b, axis=2)[g.mask[:, :, 1:] & g.mask[:, :, :-1]]).max() < 1e-12


def test_divergent_adjoint_of_one_is_ray_density():
    g = VolumeGrid((128, 128), 1.0, "ball")
    geo = divergent_geometries(g, [0.3], 300.0)[0]
    a = adjoint(np.ones(geo.det_shape), g, geo)
    w = geo.ray_density(g)
    rel = (a / w - 1.0)[g.mask]
    assert np.median(np.abs(rel)) < 0.02
    assert not np.any(a[~g.mask])


def test_discrete_ray_density_tracks_analytic():
    g = VolumeGrid((96, 96), 1.0, "ball")
    geo = divergent_geometries(g, [0.7], 150.0)[0]
    wd = ray_density(g, geo)
    wa = ray_density(g, geo, "analytic")
    assert ray_density(g, geo) is wd
    assert np.median(np.abs(wd / wa - 1.0)[g.mask]) < 0.05
    a = unit_projections(g, geo, density="analytic")
    d = unit_projections(g, geo)
    assert d.density == "discrete" and a.density == "analytic"
    np.testing.assert_array_equal(a.u, d.u)
    sup = d.u > 0
    assert np.abs(d.u_tilde[sup] / a.u_tilde[sup] - 1.0).max() < 0.05
    with pytest.raises(ConfigurationError):
        unit_projections(g, geo, density="fuzzy")


def test_discrete_density_removes_pp_star_floor(rng):
    # with the analytic density the fan error stalls under refinement
    errs = {"discrete": [], "analytic": []}
    for n in (128, 256, 512):
        g = VolumeGrid((n, n), 2.0 / n, "ball")
        geo = divergent_geometries(g, [0.3], 3.0)[0]
        p = smooth_detector_field(geo, np.random.default_rng(7))
        q = project(adjoint(p * (unit_projections(g, geo).u > 0), g, geo), g, geo)
        for kind in errs:
            un = unit_projections(g, geo, density=kind)
            r = un.u_tilde * p
            errs[kind].append(np.linalg.norm(q - r) / np.linalg.norm(r))
    d, a = errs["discrete"], errs["analytic"]
    assert d[0] > d[1] > d[2] and d[2] < 1e-3
    assert a[2] > 1e-3


def test_ray_density_exponent():
    g3 = VolumeGrid((8, 8, 8), 1.0, "ball")
    g2 = VolumeGrid((8, 8), 1.0, "ball")
    for g, expo in ((g2, 1), (g3, 2)):
        geo = divergent_geometries(g, [0.0], 50.0)[0]
        w = geo.ray_density(g)
        c = g.coords()
        dist = np.sqrt(sum((c[i] - geo.source[i]) ** 2 for i in range(g.ndim)))
        assert np.allclose(w, dist ** -expo)
    geo = parallel_geometries(g2, [0.0])[0]
    assert np.all(geo.ray_density(g2) == 1.0)


def test_counters(rng):
    g = VolumeGrid((16, 16))
    geo = parallel_geometries(g, [0.0])[0]
    project(g.ones(), g, geo)
    adjoint(np.ones(geo.det_shape), g, geo)
    back_project(np.ones(geo.det_shape), g, geo)
    back_project(np.ones(geo.det_shape), g, geo)
    assert get_counters() == {"project": 1, "adjoint": 1, "back_project": 2}


# --------------------------------------------------------------------------
# unit projections
# --------------------------------------------------------------------------

def test_unit_projections_cube():
    g = VolumeGrid((10, 10), 0.1, "box")
    geo = parallel_geometries(g, [0.0])[0]
    for method in ("projected", "analytic"):
        un = unit_projections(g, geo, method)
        assert np.array_equal(un.u, un.u_tilde)
        assert set(np.unique(np.round(un.u, 12))) == {0.0, 1.0}


def test_unit_projections_ball_chords():
    g = VolumeGrid((256, 256), 2.0 / 256, "ball")
    geo = parallel_geometries(g, [0.37])[0]
    s = geo.det_coords(0)
    exact = 2 * np.sqrt(np.clip(g.radius ** 2 - s ** 2, 0.0, None))
    ana = unit_projections(g, geo, "analytic").u
    proj = unit_projections(g, geo).u
    assert np.allclose(ana[ana > 0], exact[ana > 0])
    assert np.linalg.norm(proj - exact) / np.linalg.norm(exact) < 0.02


def test_unit_projections_divergent_quadrature():
    # u_tilde = int t^-1 dt over the chord of the disc, in 2D
    g = VolumeGrid((128, 128), 1.0, "ball")
    D = 300.0
    geo = divergent_geometries(g, [0.3], D)[0]
    un = unit_projections(g, geo)
    phi = geo.det_coords(0)
    b = D * np.sin(phi)
    half = np.sqrt(np.clip(g.radius ** 2 - b ** 2, 0.0, None))
    t0, t1 = D * np.cos(phi) - half, D * np.cos(phi) + half
    exact = np.where(half > 0, np.log(t1 / t0), 0.0)
    assert np.linalg.norm(un.u_tilde - exact) / np.linalg.norm(exact) < 0.01


@pytest.mark.parametrize("mode", ["parallel", "divergent"])
def test_unit_projection_support_invariants(mode):
    g = VolumeGrid((20, 20, 10), 1.0, "cylinder")
    geo = (parallel_geometries(g, [0.4])[0] if mode == "parallel"
           else divergent_geometries(g, [0.4], 60.0)[0])
    un = unit_projections(g, geo)
    assert np.all(un.u >= 0) and np.all(un.u_tilde >= 0)
    assert np.array_equal(un.u > 0, un.u_tilde > 0)
    if mode == "parallel":
        assert np.array_equal(un.u, un.u_tilde)


def test_unit_projection_method_check():
    g = VolumeGrid((8, 8))
    with pytest.raises(ConfigurationError):
        unit_projections(g, parallel_geometries(g, [0.0])[0], "exact")


# --------------------------------------------------------------------------
# masked division
# --------------------------------------------------------------------------

def test_masked_divide_cases(rng):
    p = rng.standard_normal(9)
    assert not np.any(masked_divide(p, np.zeros(9)))
    u = np.abs(rng.standard_normal(9))
    u[::3] = 0.0
    assert np.array_equal(masked_divide(u, u), (u > 0).astype(float))
    assert np.allclose(masked_divide(u ** 2, u), u)
    assert np.allclose(masked_divide(u, u, 0.5), np.sqrt(u))


# --------------------------------------------------------------------------
# P P* identity and isometry
# --------------------------------------------------------------------------

def test_pp_star_exact_on_axis_aligned_instance(exact_instance, rng):
    grid, geom = exact_instance
    assert _pp_star_error(grid, geom, rng, smooth=False) < 1e-14


@pytest.mark.parametrize("mode", ["parallel", "divergent"])
def test_pp_star_small_grid(mode, rng):
    g = VolumeGrid((128, 128), 2.0 / 128, "ball")
    geo = (parallel_geometries(g, [0.3])[0] if mode == "parallel"
           else divergent_geometries(g, [0.3], 3.0)[0])
    assert _pp_star_error(g, geo, rng) < 0.05


def test_pp_star_needs_resolvable_fields(rng):
    # pixel-scale noise is smoothed by the interpolating projector
    g = VolumeGrid((128, 128), 2.0 / 128, "ball")
    geo = parallel_geometries(g, [0.3])[0]
    assert _pp_star_error(g, geo, rng, smooth=False) > 0.1


def test_isometry_of_normalized_adjoint(rng):
    g = VolumeGrid((256, 256), 2.0 / 256, "ball")
    geo = divergent_geometries(g, [0.3], 3.0)[0]
    un = unit_projections(g, geo)
    p = smooth_detector_field(geo, rng) * (un.u > 0)
    f = geo.ray_density(g) * back_project(masked_divide(p, un.u_tilde, 0.5), g, geo)
    pn = math.sqrt(float(np.sum(geo.pixel_measure() * p * p)))
    assert abs(g.norm(f) / pn - 1.0) < 0.05
