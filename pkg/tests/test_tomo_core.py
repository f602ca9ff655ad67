import json
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from rising.geometry import (
    FAN,
    PARALLEL,
    GridSpec,
    ScanGeometry,
    default_fan_geometry,
    default_parallel_geometry,
    parse_protocol,
    protocol_angles,
    protocol_geometry,
)
from rising.io import FormatError, read_raw, write_raw
from rising.projector import SiddonProjector, _siddon, back_project, forward_project, simulate_sinogram, trace_ray


@pytest.fixture(scope="module")
def fan32():
    grid = GridSpec(32)
    return grid, default_fan_geometry(grid, protocol_angles(360, 40))


# trace_ray


def test_midline_ray_through_unit_image():
    grid = GridSpec(4)
    assert trace_ray(grid, (-10.0, 0.0), (10.0, 0.0), np.ones((4, 4))) == pytest.approx(4.0, abs=1e-12)


def test_ray_over_zero_image_is_zero():
    grid = GridSpec(4)
    assert trace_ray(grid, (-10.0, -3.0), (10.0, 1.7), np.zeros((4, 4))) == 0.0


def test_diagonal_ray():
    grid = GridSpec(4)
    value = trace_ray(grid, (-2.0, -2.0), (2.0, 2.0), np.ones((4, 4)))
    assert value == pytest.approx(4 * math.sqrt(2), abs=1e-12)


def test_ray_missing_grid():
    grid = GridSpec(4)
    assert trace_ray(grid, (-10.0, 5.0), (10.0, 5.0), np.ones((4, 4))) == 0.0


def test_degenerate_ray_raises():
    with pytest.raises(ValueError):
        trace_ray(GridSpec(4), (1.0, 1.0), (1.0, 1.0), np.ones((4, 4)))


def test_ray_row_orientation():
    # a ray along y = 1.5 crosses the top row only (row 0 is the top)
    grid = GridSpec(4)
    image = np.zeros((4, 4))
    image[0] = 1.0
    assert trace_ray(grid, (-5.0, 1.5), (5.0, 1.5), image) == pytest.approx(4.0)
    assert trace_ray(grid, (-5.0, -1.5), (5.0, -1.5), image) == 0.0


@settings(max_examples=40, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0, 2 * np.pi))
def test_intersection_lengths_sum_to_chord(px, py, phi):
    # lengths of one ray sum to the length of its chord through the square
    grid = GridSpec(6)
    d = np.array([np.cos(phi), np.sin(phi)])
    src = np.array([px, py]) - 20 * d
    dst = np.array([px, py]) + 20 * d
    _, _, lengths = _siddon(grid, src[None], dst[None])
    # analytic chord via slab clipping; a ray lying on a pixel edge belongs to the
    # cell to its right (x) or above it (y), so the grid spans [-h, h) x (-h, h]
    h = grid.half_width
    t0, t1 = 0.0, 1.0
    delta = dst - src
    for axis in range(2):
        if abs(delta[axis]) < 1e-15:
            # on the outer edge to within rounding the side is decided by roundoff
            assume(abs(abs(src[axis]) - h) > 1e-9)
            inside = -h <= src[axis] < h if axis == 0 else -h < src[axis] <= h
            if not inside:
                t0, t1 = 1.0, 0.0
            continue
        a, b = sorted([(-h - src[axis]) / delta[axis], (h - src[axis]) / delta[axis]])
        t0, t1 = max(t0, a), min(t1, b)
    chord = max(t1 - t0, 0.0) * np.linalg.norm(delta)
    assert lengths.sum() == pytest.approx(chord, abs=1e-9)
    assert np.all(lengths >= 0)


# forward / back projection


def test_zero_image_and_zero_sinogram(fan32):
    grid, geom = fan32
    assert not np.any(forward_project(np.zeros(grid.shape), geom, grid))
    assert not np.any(back_project(np.zeros(geom.sinogram_shape), geom, grid))


def test_forward_homogeneity(fan32):
    grid, geom = fan32
    x = np.random.default_rng(0).random(grid.shape)
    a = forward_project(2.5 * x, geom, grid)
    b = 2.5 * forward_project(x, geom, grid)
    assert np.linalg.norm(a - b) <= 1e-12 * np.linalg.norm(b)


def test_sinogram_matches_trace_ray(fan32):
    grid, geom = fan32
    x = np.random.default_rng(1).random(grid.shape)
    sino = forward_project(x, geom, grid)
    src, dst = geom.ray_endpoints(grid)
    for v, k in [(0, 0), (5, 31), (39, 63), (17, 40)]:
        assert sino[v, k] == pytest.approx(trace_ray(grid, src[v, k], dst[v, k], x), rel=1e-12, abs=1e-12)


def test_centered_disk_parallel_views_identical():
    # a pixelated disk keeps the square-grid symmetry, so views 90 degrees apart agree
    grid = GridSpec(32)
    xs, ys = grid.pixel_centers()
    disk = ((xs ** 2 + ys ** 2) <= 10.0 ** 2).astype(float)
    geom = default_parallel_geometry(grid, [0.0, 90.0, 180.0, 270.0])
    sino = forward_project(disk, geom, grid)
    for v in range(1, 4):
        assert np.linalg.norm(sino[v] - sino[0]) <= 1e-10 * np.linalg.norm(sino[0])


def test_centered_disk_parallel_views_close_at_any_angle():
    # at arbitrary angles the pixelated disk is only approximately symmetric
    grid = GridSpec(64)
    xs, ys = grid.pixel_centers()
    disk = ((xs ** 2 + ys ** 2) <= 20.0 ** 2).astype(float)
    geom = default_parallel_geometry(grid, protocol_angles(180, 12))
    sino = forward_project(disk, geom, grid)
    spread = np.abs(sino - sino.mean(axis=0)).max() / sino.max()
    assert spread < 0.05


def test_adjoint_inner_products(fan32):
    grid, geom = fan32
    rng = np.random.default_rng(2)
    for _ in range(20):
        x = rng.standard_normal(grid.shape)
        y = rng.standard_normal(geom.sinogram_shape)
        ax = forward_project(x, geom, grid)
        aty = back_project(y, geom, grid)
        assert abs(np.vdot(ax, y) - np.vdot(x, aty)) <= 1e-12 * np.linalg.norm(ax) * np.linalg.norm(y)


def test_single_ray_backprojection_gives_intersection_lengths(fan32):
    grid, geom = fan32
    sino = np.zeros(geom.sinogram_shape)
    v, k = 7, 29
    sino[v, k] = 1.0
    image = back_project(sino, geom, grid)
    src, dst = geom.ray_endpoints(grid)
    for j in np.flatnonzero(image)[:25]:
        probe = np.zeros(grid.n * grid.n)
        probe[j] = 1.0
        assert image.flat[j] == pytest.approx(trace_ray(grid, src[v, k], dst[v, k], probe.reshape(grid.shape)))
    assert image.sum() > 0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.sampled_from([FAN, PARALLEL]), st.integers(3, 12))
def test_adjointness_property(seed, mode, n):
    grid = GridSpec(n)
    angles = protocol_angles(360, 7)
    geom = default_fan_geometry(grid, angles) if mode == FAN else default_parallel_geometry(grid, angles)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(grid.shape)
    y = rng.standard_normal(geom.sinogram_shape)
    ax = forward_project(x, geom, grid)
    lhs, rhs = np.vdot(ax, y), np.vdot(x, back_project(y, geom, grid))
    assert abs(lhs - rhs) <= 1e-10 * max(np.linalg.norm(ax) * np.linalg.norm(y), 1e-300)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_linearity_property(seed, a, b):
    grid = GridSpec(8)
    geom = default_fan_geometry(grid, protocol_angles(360, 9))
    rng = np.random.default_rng(seed)
    x, z = rng.standard_normal((2, 8, 8))
    lhs = forward_project(a * x + b * z, geom, grid)
    rhs = a * forward_project(x, geom, grid) + b * forward_project(z, geom, grid)
    assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-11)
    y1, y2 = rng.standard_normal((2, *geom.sinogram_shape))
    lhs = back_project(a * y1 + b * y2, geom, grid)
    rhs = a * back_project(y1, geom, grid) + b * back_project(y2, geom, grid)
    assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-11)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_nonnegativity_preserved(seed):
    grid = GridSpec(10)
    geom = default_fan_geometry(grid, protocol_angles(360, 13))
    x = np.random.default_rng(seed).random(grid.shape)
    assert np.all(forward_project(x, geom, grid) >= 0)


def test_batched_forward_and_adjoint(fan32):
    grid, geom = fan32
    proj = SiddonProjector(grid, geom)
    xs = np.random.default_rng(3).random((3, *grid.shape))
    batch = proj.forward(xs)
    assert batch.shape == (3, *geom.sinogram_shape)
    for i in range(3):
        assert np.array_equal(batch[i], proj.forward(xs[i]))
    assert proj.as_linear_operator().shape == (40 * 64, 32 * 32)


def test_grid_mismatch_raises(fan32):
    _, geom = fan32
    with pytest.raises(ValueError):
        forward_project(np.zeros((5, 7)), geom)


# noise


def test_noise_free_simulation_equals_projection(fan32):
    grid, geom = fan32
    x = np.random.default_rng(4).random(grid.shape)
    assert np.array_equal(simulate_sinogram(x, geom, 0.0, seed=1, grid=grid), forward_project(x, geom, grid))


def test_noise_deterministic_and_exact_level(fan32):
    grid, geom = fan32
    x = np.random.default_rng(5).random(grid.shape)
    b1 = simulate_sinogram(x, geom, 0.01, seed=7, grid=grid)
    b2 = simulate_sinogram(x, geom, 0.01, seed=7, grid=grid)
    assert np.array_equal(b1, b2)
    clean = forward_project(x, geom, grid)
    assert np.linalg.norm(b1 - clean) / np.linalg.norm(clean) == pytest.approx(0.01, abs=1e-12)
    assert not np.array_equal(b1, simulate_sinogram(x, geom, 0.01, seed=8, grid=grid))


def test_negative_noise_rejected(fan32):
    grid, geom = fan32
    with pytest.raises(ValueError):
        simulate_sinogram(np.zeros(grid.shape), geom, -0.1, seed=0, grid=grid)


# geometry


def test_grid_invariants():
    with pytest.raises(ValueError):
        GridSpec(1)
    with pytest.raises(ValueError):
        GridSpec(4, pixel_size=0.0)


@pytest.mark.parametrize("kwargs", [
    dict(angles=[10.0, 5.0]),
    dict(angles=[0.0, 360.0]),
    dict(angles=[0.0], num_detectors=0),
    dict(angles=[0.0], source_to_center=10.0, source_to_detector=5.0),
    dict(angles=[0.0], source_to_center=-1.0),
])
def test_geometry_invariants(kwargs):
    base = dict(mode=FAN, angles=[0.0, 90.0], num_detectors=8, detector_spacing=1.0,
                source_to_center=10.0, source_to_detector=20.0)
    base.update(kwargs)
    with pytest.raises(ValueError):
        ScanGeometry(**base)


def test_protocol_expansion():
    assert protocol_angles(360, 360) == [float(a) for a in range(360)]
    assert protocol_angles(180, 60) == [3.0 * i for i in range(60)]
    assert protocol_angles(360, 60) == [6.0 * i for i in range(60)]
    assert protocol_angles(360, 180) == [2.0 * i for i in range(180)]
    assert parse_protocol("P_360_60") == (360.0, 60)
    with pytest.raises(ValueError):
        parse_protocol("360/60")


def test_default_fan_covers_image():
    grid = GridSpec(16)
    geom = protocol_geometry(grid, "P_360_60")
    assert geom.mode == FAN and geom.num_detectors == 32
    assert geom.source_to_center == 32 and geom.source_to_detector == 64
    # every pixel is hit from every view
    sino_of_pixels = SiddonProjector(grid, geom).matrix
    hits = np.asarray((sino_of_pixels != 0).sum(axis=0)).ravel()
    assert hits.min() >= 60


def test_ray_endpoints_are_pure(fan32):
    grid, geom = fan32
    a = geom.ray_endpoints(grid)
    b = ScanGeometry.from_dict(geom.to_dict()).ray_endpoints(grid)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_geometry_json_round_trip(tmp_path, fan32):
    _, geom = fan32
    path = tmp_path / "geom.json"
    geom.save(path)
    doc = json.loads(path.read_text())
    assert {"mode", "num_detectors", "detector_spacing", "dso", "dsd"} <= set(doc)
    assert ScanGeometry.load(path) == geom


def test_geometry_compact_angle_form():
    doc = {"mode": "parallel", "angles_deg": {"start_deg": 0.0, "count": 4, "step_deg": 45.0},
           "num_detectors": 8, "detector_spacing": 1.0}
    geom = ScanGeometry.from_dict(doc)
    assert list(geom.angles) == [0.0, 45.0, 90.0, 135.0]


# file formats


def test_raw_round_trip(tmp_path):
    x = np.random.default_rng(6).random((5, 7)).astype(np.float32)
    path = tmp_path / "a.imgraw"
    write_raw(path, x)
    header = json.loads(path.with_suffix(".json").read_text())
    assert header == {"width": 7, "height": 5, "dtype": "f32", "order": "row-major"}
    assert path.stat().st_size == 5 * 7 * 4
    assert np.array_equal(read_raw(path), x.astype(np.float64))


def test_raw_rejects_bad_payload(tmp_path):
    path = tmp_path / "b.sinraw"
    write_raw(path, np.zeros((3, 3)))
    path.write_bytes(b"\0" * 8)
    with pytest.raises(FormatError):
        read_raw(path)
    with pytest.raises(FormatError):
        write_raw(tmp_path / "c.imgraw", np.array([[np.nan]]))
