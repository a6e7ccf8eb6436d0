import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from articulate.errors import AllPointsOutOfBounds, EmptyObservation
from articulate.fixtures import box, build_fixture
from articulate.geometry import Pose, look_at
from articulate.model import TriMesh, posed_meshes
from articulate.sensor import (
    Camera,
    PointCloud,
    backproject,
    default_rig,
    farthest_point_sample,
    fuse,
    fuse_and_sample,
    read_ply,
    render_depth,
    sample_cloud,
    voxel_centers,
    voxelize,
    write_ply,
)


def square(z, half=0.5):
    v = np.array([[-half, -half, z], [half, -half, z], [half, half, z], [-half, half, z]])
    return TriMesh(v, [[0, 1, 2], [0, 2, 3]])


def axial_camera(res=33):
    return Camera(look_at([0, 0, 0], [0, 0, 1], up=[0, 1, 0]), 60.0, (res, res))


def cloud(points, normals=None):
    p = np.asarray(points, dtype=float)
    n = np.zeros_like(p) if normals is None else normals
    return PointCloud(p, np.full_like(p, 0.5), n, np.zeros(len(p), dtype=int))


def test_rig_has_five_cameras():
    assert len(default_rig()) == 5


def test_top_camera_looks_down():
    np.testing.assert_allclose(default_rig()[0].view_dir, [0, 0, -1], atol=1e-9)


def test_side_cameras_ninety_degrees_apart():
    sides = default_rig()[1:]
    az = [math.degrees(math.atan2(c.pose.translation[1], c.pose.translation[0])) % 360 for c in sides]
    gaps = np.diff(sorted(az))
    np.testing.assert_allclose(gaps, 90.0, atol=1e-9)


def test_empty_scene_has_no_hits():
    im = render_depth({}, axial_camera())
    assert not im.valid.any()
    with pytest.raises(EmptyObservation):
        fuse([im])


@pytest.mark.parametrize("d", [0.7, 1.3, 2.9])
def test_center_pixel_depth_of_facing_square(d):
    im = render_depth({"sq": square(d)}, axial_camera(33))
    assert im.valid[16, 16]
    assert im.range[16, 16] == pytest.approx(d, abs=1e-6)


def test_nearer_square_occludes():
    im = render_depth({"far": square(2.0), "near": square(1.0, half=0.3)}, axial_camera(33))
    near = im.link == 1
    assert near.any()
    pts = backproject(im)
    np.testing.assert_allclose(pts.positions[pts.link_ids == 1][:, 2], 1.0, atol=1e-9)


def test_backprojection_reprojects_to_pixel_centres():
    m = build_fixture("laptop")
    meshes = posed_meshes(m, m.canonical_state())
    cam = default_rig(radius=4.0)[1]
    im = render_depth(meshes, cam)
    pc = backproject(im)
    uv, z = cam.project(pc.positions)
    rows, cols = np.nonzero(im.valid)
    centres = np.stack([cols + 0.5, rows + 0.5], axis=1)
    assert np.all(z > 0)
    assert np.max(np.abs(uv - centres)) < 0.5


def test_fusion_is_camera_order_invariant():
    m = build_fixture("kitchen_pot")
    meshes = posed_meshes(m, m.canonical_state())
    ims = [render_depth(meshes, c) for c in default_rig(resolution=(48, 48))]
    a = fuse(ims).positions
    b = fuse(ims[::-1]).positions
    key = lambda p: p[np.lexsort(p.T[::-1])]
    np.testing.assert_array_equal(key(a), key(b))


def test_noise_is_seeded():
    ims = [render_depth({"sq": square(1.0)}, axial_camera(), noise=0.01, rng=np.random.default_rng(5)) for _ in range(2)]
    np.testing.assert_array_equal(ims[0].range, ims[1].range)


def test_fps_count_and_membership(rng):
    p = rng.random((10000, 3))
    pc = sample_cloud(cloud(p), 2048)
    assert len(pc) == 2048
    src = {tuple(x) for x in p}
    assert all(tuple(x) in src for x in pc.positions)


def test_fps_identity_on_small_input(rng):
    p = rng.random((3, 3))
    np.testing.assert_array_equal(np.sort(farthest_point_sample(p, 3)), [0, 1, 2])


def test_fps_line_endpoints_first(rng):
    t = np.sort(rng.random(50))
    p = np.stack([t, np.zeros(50), np.zeros(50)], axis=1)
    first_two = set(farthest_point_sample(p, 2).tolist())
    assert first_two == {0, 49}


def _brute_fps(p, first, k):
    idx = [first]
    d = np.linalg.norm(p - p[first], axis=1)
    for _ in range(k - 1):
        j = int(np.argmax(d))
        idx.append(j)
        d = np.minimum(d, np.linalg.norm(p - p[j], axis=1))
    return idx


def test_fps_matches_brute_force(rng):
    p = rng.random((500, 3))
    got = farthest_point_sample(p, 40)
    assert list(got) == _brute_fps(p, int(got[0]), 40)


def test_fuse_and_sample_pads_small_clouds():
    im = render_depth({"sq": square(1.0)}, axial_camera(9))
    pc = fuse_and_sample([im], 2048, seed=1)
    assert len(pc) == 2048 and pc.padded


def test_voxelize_single_point():
    c = voxel_centers(np.array([[10, 20, 30]]))
    g = voxelize(PointCloud(c, [[0.1, 0.2, 0.3]], [[0, 0, 1]]))
    assert g.occupancy.sum() == 1
    np.testing.assert_allclose(g.colors[:, 10, 20, 30], [0.1, 0.2, 0.3], atol=1e-6)


def test_voxelize_pigeonhole(rng):
    g = voxelize(cloud(rng.uniform(-1, 1, (2048, 3))))
    assert g.occupancy.sum() <= 2048


def test_opposite_normals_cancel():
    c = voxel_centers(np.array([[5, 5, 5], [5, 5, 5]]))
    g = voxelize(cloud(c, np.array([[0, 0, 1.0], [0, 0, -1.0]])))
    np.testing.assert_array_equal(g.normals[:, 5, 5, 5], 0.0)


def test_voxelize_rejects_outside_points():
    with pytest.raises(AllPointsOutOfBounds):
        voxelize(cloud([[5.0, 5.0, 5.0]]))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2), st.sampled_from([-1, 1]), st.integers(0, 10_000))
def test_voxelize_shift_equivariance(axis, sign, seed):
    rng = np.random.default_rng(seed)
    p = rng.uniform(-0.8, 0.8, (300, 3))
    g = voxelize(cloud(p))
    shift = np.zeros(3)
    shift[axis] = sign * g.voxel_size
    h = voxelize(cloud(p + shift))
    np.testing.assert_array_equal(np.roll(g.occupancy, sign, axis=axis), h.occupancy)


def test_ply_round_trip(tmp_path, rng):
    p = rng.random((100, 3)).astype(np.float32).astype(float)
    n = rng.normal(size=(100, 3)).astype(np.float32).astype(float)
    pc = PointCloud(p, np.full((100, 3), 1.0), n)
    write_ply(pc, tmp_path / "c.ply")
    back = read_ply(tmp_path / "c.ply")
    np.testing.assert_array_equal(back.positions, p)
    np.testing.assert_array_equal(back.normals, n)
