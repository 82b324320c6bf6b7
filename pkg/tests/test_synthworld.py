import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import ndimage

from occscene.config import WorldConfig
from occscene.errors import FormatError, InvalidSpec, PlacementOverflow, UnknownToken, VersionMismatch
from occscene.synthworld import (
    CameraParams,
    OccupancyGrid,
    SceneSpec,
    decode,
    default_camera,
    encode,
    generate_dataset,
    generate_sample,
    generate_scene,
    intrinsics_matrix,
    look_along,
    make_trajectory,
    random_spec,
    read_dataset,
    render,
    write_dataset,
)
from occscene.synthworld.dataset import manifest_path
from occscene.synthworld.render import BACKGROUND, PALETTE, depth_shade
from occscene.synthworld.scene import BUILDING, GROUND, VEHICLE, density_bounds

DIMS = (16, 8, 16)


def test_empty_spec_gives_ground_and_free_only():
    g = generate_scene(SceneSpec(3, {}, "sparse"), DIMS)
    assert set(np.unique(g.labels)) == {0, GROUND}
    assert np.all(g.labels[:, 0, :] == GROUND)


def test_scene_determinism():
    spec = random_spec(11)
    a = generate_scene(spec, DIMS)
    b = generate_scene(spec, DIMS)
    assert a.labels.tobytes() == b.labels.tobytes()


def test_vehicle_count_matches_connected_components():
    spec = SceneSpec(5, {BUILDING: 1, VEHICLE: 3}, "medium")
    g = generate_scene(spec, DIMS)
    _, n = ndimage.label(g.labels == VEHICLE)
    assert n == 3


def test_overflow_reports_achieved_counts():
    with pytest.raises(PlacementOverflow) as err:
        generate_scene(SceneSpec(1, {BUILDING: 15, VEHICLE: 15}, "dense"), (6, 4, 6))
    assert set(err.value.achieved) == {BUILDING, VEHICLE}


@given(st.integers(0, 2**32 - 1), st.sampled_from(["sparse", "medium", "dense"]),
       st.integers(0, 15), st.integers(0, 15))
def test_token_round_trip(seed, density, nb, nv):
    spec = SceneSpec(seed, {BUILDING: nb, VEHICLE: nv}, density)
    assert decode(encode(spec)) == spec
    assert len(spec.tokens) == 8


def test_spec_validation():
    with pytest.raises(InvalidSpec):
        SceneSpec(1, {}, "crowded")
    with pytest.raises(InvalidSpec):
        SceneSpec(1, {GROUND: 1})
    with pytest.raises(InvalidSpec):
        SceneSpec(1, {VEHICLE: 16})
    with pytest.raises(UnknownToken):
        decode([0] * 7 + [10_000])


def _cam(center=(4.0, 2.0, -3.0)):
    return CameraParams(intrinsics_matrix(40.0, 48, 32), look_along(center, (0.0, 0.0, 1.0)))


def test_empty_grid_renders_background():
    img = render(OccupancyGrid(np.zeros(DIMS, np.uint8)), _cam(), (32, 48))
    np.testing.assert_array_equal(img, np.broadcast_to(BACKGROUND.astype(np.float32), img.shape))


def test_single_voxel_on_optical_axis():
    labels = np.zeros(DIMS, np.uint8)
    labels[6, 4, 8] = VEHICLE  # centre (8.5, 4.5, 6.5) voxels -> (4.25, 2.25, 3.25) m
    grid = OccupancyGrid(labels, 0.5)
    cam = CameraParams(intrinsics_matrix(40.0, 48, 32), look_along((4.25, 2.25, -1.0), (0.0, 0.0, 1.0)))
    (u, v), _ = cam.project(np.array([4.25, 2.25, 3.25]))
    assert (u, v) == (24.0, 16.0)
    img = render(grid, cam, (32, 48))
    # the ray through (cx, cy) hits the voxel's front face (normal along z) at depth 4.0 m
    expected = PALETTE[VEHICLE] * 0.70 * depth_shade(4.0)
    np.testing.assert_allclose(img[16, 24], expected, atol=1e-6)


def test_camera_shift_moves_silhouette():
    labels = np.zeros(DIMS, np.uint8)
    labels[8:10, 2:6, 6:8] = BUILDING
    grid = OccupancyGrid(labels)
    a = render(grid, _cam((4.0, 2.0, -3.0)), (32, 48))
    b = render(grid, _cam((4.5, 2.0, -3.0)), (32, 48))
    cols_a = np.where((a != BACKGROUND.astype(np.float32)).any(-1).any(0))[0]
    cols_b = np.where((b != BACKGROUND.astype(np.float32)).any(-1).any(0))[0]
    # front face at z = 4 m, camera at z = -3 m: a 0.5 m move projects to 40 * 0.5 / 7 px;
    # image columns run along world -x for this camera, so the silhouette moves right
    shift = 40.0 * 0.5 / 7.0
    assert abs((cols_b[0] - cols_a[0]) - shift) <= 1.0
    assert abs((cols_b[-1] - cols_a[-1]) - shift) <= 1.0


def test_trajectory_construction():
    start = default_camera(DIMS, 0.5, (32, 48))
    assert make_trajectory(start, 1, 0.5) == [start]
    traj = make_trajectory(start, 4, 0.5)
    for k, cam in enumerate(traj):
        rel = cam.extrinsics @ np.linalg.inv(start.extrinsics)
        np.testing.assert_allclose(rel[:3, :3], np.eye(3), atol=1e-6)
        assert abs(np.linalg.norm(cam.center - start.center) - 0.5 * k) < 1e-5
        fwd = start.rotation[2]
        np.testing.assert_allclose(cam.center - start.center, 0.5 * k * fwd, atol=1e-5)
        R = cam.rotation
        np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-6)


def test_frames_are_renderer_output():
    w = WorldConfig()
    s = generate_sample(123, w)
    for cam, frame in zip(s.cameras, s.frames):
        np.testing.assert_array_equal(render(s.grid, cam, w.image_size), frame)


@pytest.mark.parametrize("density", ["sparse", "medium", "dense"])
def test_density_bounds(density):
    w = WorldConfig(density=density)
    lo, hi = density_bounds(density, tuple(w.grid_dims))
    for seed in range(6):
        s = generate_sample(seed, w)
        frac = np.count_nonzero(s.grid.labels) / s.grid.labels.size
        assert lo <= frac <= hi


def test_dataset_round_trip_and_determinism(tmp_path):
    w = WorldConfig()
    samples = generate_dataset(w, 3, 7)
    p1, p2 = tmp_path / "a.osd", tmp_path / "b.osd"
    m = write_dataset(samples, p1, "abc")
    write_dataset(generate_dataset(w, 3, 7), p2, "abc")
    assert p1.read_bytes() == p2.read_bytes()
    back = read_dataset(p1)
    for a, b in zip(samples, back):
        assert a.frames.tobytes() == b.frames.tobytes()
        assert a.grid == b.grid and a.spec == b.spec
        assert all(x == y for x, y in zip(a.cameras, b.cameras))
    man = json.loads(manifest_path(p1).read_text())
    assert man == m and man["count"] == 3 and man["config_hash"] == "abc"


def test_manifest_offsets_for_many_samples(tmp_path):
    w = WorldConfig(grid_dims=[8, 4, 8], image_size=[8, 12], frames=1)
    samples = generate_dataset(w, 100, 0)
    m = write_dataset(samples, tmp_path / "d.osd")
    size = (tmp_path / "d.osd").stat().st_size
    assert m["count"] == 100 and len(m["offsets"]) == 100
    assert all(0 < o < size for o in m["offsets"]) and m["offsets"] == sorted(m["offsets"])


def test_corruption_is_detected(tmp_path):
    p = tmp_path / "d.osd"
    write_dataset(generate_dataset(WorldConfig(), 1, 0), p)
    raw = bytearray(p.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    p.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        read_dataset(p)
    p.write_bytes(b"XXXX" + bytes(raw[4:]))
    with pytest.raises(FormatError):
        read_dataset(p)


def test_version_mismatch(tmp_path):
    p = tmp_path / "d.osd"
    write_dataset([], p)
    raw = bytearray(p.read_bytes())
    raw[4] = 99
    p.write_bytes(bytes(raw))
    with pytest.raises(VersionMismatch):
        read_dataset(p)


def test_empty_container(tmp_path):
    p = tmp_path / "e.osd"
    m = write_dataset([], p)
    assert m["count"] == 0 and read_dataset(p) == []
