import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from articulate.errors import DegenerateGeometry, ZeroMotion
from articulate.evaluation import joint_angle_error, point_to_line_distance
from articulate.geometry import Pose
from articulate.jointest import (
    K_THRESHOLD,
    OVERLAP_DELTA,
    JointEstimate,
    classify_joint,
    consolidate,
    estimate_joint,
    estimate_prismatic,
    estimate_revolute_axis_alg1,
    fit_rigid,
    icp_rigid,
    icp_translation,
    joints_from_json,
    joints_to_json,
    screw_decompose,
    screw_to_pose,
    signed_motion,
)


def screw_pose(theta, axis, point, pitch=0.0) -> Pose:
    """Independent construction through scipy's rotation vectors."""
    a = np.asarray(axis, dtype=float) / np.linalg.norm(axis)
    R = Rotation.from_rotvec(theta * a).as_matrix()
    p = np.asarray(point, dtype=float)
    return Pose(R, p - R @ p + pitch * a)


def random_rotation(rng, max_deg=180.0):
    axis = rng.normal(size=3)
    return Rotation.from_rotvec(math.radians(rng.uniform(0, max_deg)) * axis / np.linalg.norm(axis)).as_matrix()


def test_icp_identical_clouds(rng):
    p = rng.random((200, 3))
    T = icp_rigid(p, p).pose
    assert T.allclose(Pose(), atol=1e-9)


def test_icp_recovers_small_motion(rng):
    p = rng.random((100, 3))
    true = Pose(random_rotation(rng, 10.0), rng.normal(scale=0.05, size=3))
    T = icp_rigid(p, true.apply(p), max_iters=200, tol=1e-14).pose
    assert T.allclose(true, atol=1e-6)


def test_icp_noise_rotation_error():
    errs = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        p = rng.random((300, 3))
        true = Pose(random_rotation(rng, 10.0), rng.normal(scale=0.02, size=3))
        q = true.apply(p) + rng.normal(scale=0.01, size=p.shape)
        T = icp_rigid(p, q).pose
        R = T.rotation @ true.rotation.T
        errs.append(math.degrees(math.acos(np.clip((np.trace(R) - 1) / 2, -1, 1))))
    assert max(errs) < 2.0


def test_icp_inverse_application(rng):
    p = rng.random((150, 3))
    true = Pose(random_rotation(rng, 8.0), rng.normal(scale=0.03, size=3))
    q = true.apply(p)
    T = icp_rigid(p, q, max_iters=200, tol=1e-14).pose
    rms = np.sqrt(np.mean(np.sum((T.apply(p) - q) ** 2, axis=1)))
    assert rms < 1e-6
    back = T.inverse().apply(q)
    assert np.sqrt(np.mean(np.sum((back - p) ** 2, axis=1))) < 1e-6


def test_icp_rejects_collinear():
    line = np.outer(np.linspace(0, 1, 10), [1, 0, 0])
    with pytest.raises(DegenerateGeometry):
        icp_rigid(line, line)


def test_fit_rigid_exact(rng):
    p = rng.random((50, 3))
    true = Pose(random_rotation(rng), rng.normal(size=3))
    assert fit_rigid(p, true.apply(p)).allclose(true, atol=1e-10)


def test_translation_icp(rng):
    p = rng.random((300, 3))
    T = icp_translation(p, p + [0.02, -0.01, 0.03], max_iters=200, tol=1e-14).pose
    np.testing.assert_allclose(T.translation, [0.02, -0.01, 0.03], atol=1e-9)
    np.testing.assert_allclose(T.rotation, np.eye(3))


def test_screw_identity():
    s = screw_decompose(Pose())
    assert s.theta == 0.0 and s.degenerate and s.pitch_translation == 0.0


def test_screw_quarter_turn_about_z():
    s = screw_decompose(screw_pose(math.pi / 2, [0, 0, 1], [0, 0, 0]))
    assert s.theta == pytest.approx(math.pi / 2, abs=1e-9)
    np.testing.assert_allclose(s.axis_dir, [0, 0, 1], atol=1e-9)
    np.testing.assert_allclose(s.axis_point, 0.0, atol=1e-9)


def test_screw_offset_axis_recovery():
    s = screw_decompose(screw_pose(math.radians(30), [0, 1, 0], [1, 0, 0.5]))
    assert s.theta == pytest.approx(math.radians(30), abs=1e-9)
    assert joint_angle_error(s.axis_dir, [0, 1, 0]) < 1e-7
    assert point_to_line_distance(s.axis_point, [1, 0, 0.5], [0, 1, 0]) < 1e-9


@settings(max_examples=200, deadline=None)
@given(
    st.floats(1.0, 179.0),
    st.lists(st.floats(-1, 1), min_size=3, max_size=3).filter(lambda v: np.linalg.norm(v) > 0.1),
    st.lists(st.floats(-2, 2), min_size=3, max_size=3),
    st.floats(-0.5, 0.5),
)
def test_screw_round_trip(theta_deg, axis, point, pitch):
    th = math.radians(theta_deg)
    s = screw_decompose(screw_pose(th, axis, point, pitch))
    a = np.asarray(axis) / np.linalg.norm(axis)
    assert abs(s.theta - th) < 1e-9
    assert math.acos(min(1.0, abs(float(s.axis_dir @ a)))) < 1e-7
    assert point_to_line_distance(s.axis_point, point, a) < 1e-9
    assert abs(abs(s.pitch_translation) - abs(pitch)) < 1e-9
    assert screw_to_pose(s.theta, s.axis_dir, s.axis_point, s.pitch_translation).allclose(screw_pose(th, axis, point, pitch), atol=1e-9)


def test_classify_revolute():
    assert classify_joint(screw_decompose(screw_pose(math.radians(30), [0, 0, 1], [0, 0, 0]))) == "revolute"


def test_classify_small_rotation_is_prismatic():
    T = Pose.from_translation([0.2, 0, 0]) @ screw_pose(math.radians(0.1), [0, 0, 1], [0, 0, 0])
    assert classify_joint(screw_decompose(T)) == "prismatic"


def test_classify_identity_raises():
    with pytest.raises(ZeroMotion):
        classify_joint(screw_decompose(Pose()))


def test_threshold_is_strict():
    T = screw_pose(K_THRESHOLD, [0, 0, 1], [0, 0, 0])
    assert classify_joint(screw_decompose(T), K_THRESHOLD + 1e-9) == "prismatic"


@settings(max_examples=50, deadline=None)
@given(st.floats(6.0, 170.0), st.floats(0.01, 100.0))
def test_classification_scale_covariant(theta_deg, scale):
    T = screw_pose(math.radians(theta_deg), [0.3, 0.2, 1.0], [1.0, -0.5, 0.2], 0.1)
    S = Pose(T.rotation, T.translation * scale)
    assert classify_joint(screw_decompose(T)) == classify_joint(screw_decompose(S)) == "revolute"


def _plane(lo_x, hi_x, spacing=0.005):
    xs = np.arange(lo_x, hi_x + 1e-12, spacing)
    ys = np.arange(0.0, 1.0 + 1e-12, spacing)
    X, Y = np.meshgrid(xs, ys)
    return np.stack([X.ravel(), Y.ravel(), np.zeros(X.size)], axis=1)


def test_alg1_one_sided_plane_offset_is_analytic():
    # the overlap strip lies on one side of the edge, so the fitted line sits
    # at the strip's mid-width rather than on the edge itself
    th = math.radians(40.0)
    pts = _plane(0.0, 0.5)
    fit = estimate_revolute_axis_alg1(None, pts, screw_pose(th, [0, 1, 0], [0, 0, 0]))
    assert not fit.fallback
    assert joint_angle_error(fit.axis_dir, [0, 1, 0]) < 1.0
    half_width = OVERLAP_DELTA / (2 * math.sin(th / 2)) / 2
    assert point_to_line_distance(fit.axis_point, [0, 0, 0], [0, 1, 0]) == pytest.approx(half_width, abs=0.003)


def test_alg1_two_sided_plane_hits_edge():
    th = math.radians(40.0)
    pts = _plane(-0.5, 0.5)
    fit = estimate_revolute_axis_alg1(None, pts, screw_pose(th, [0, 1, 0], [0, 0, 0]))
    assert joint_angle_error(fit.axis_dir, [0, 1, 0]) < 1.0
    assert point_to_line_distance(fit.axis_point, [0, 0, 0], [0, 1, 0]) < 0.01


def test_alg1_falls_back_without_overlap():
    T = screw_pose(math.radians(40.0), [0, 1, 0], [-1.0, 0, 0])
    fit = estimate_revolute_axis_alg1(None, _plane(0.2, 0.5), T)
    s = screw_decompose(T)
    assert fit.fallback and fit.n_overlap == 0
    np.testing.assert_allclose(fit.axis_dir, s.axis_dir)
    np.testing.assert_allclose(fit.axis_point, s.axis_point)


def test_alg1_agrees_with_screw_axis():
    rng = np.random.default_rng(3)
    for _ in range(20):
        axis = rng.normal(size=3)
        point = rng.uniform(-0.5, 0.5, 3)
        th = math.radians(rng.uniform(15, 90))
        T = screw_pose(th, axis, point)
        # a slab of points around the axis so the overlap scatter is a line
        a = axis / np.linalg.norm(axis)
        u = np.cross(a, [1, 0, 0] if abs(a[0]) < 0.9 else [0, 1, 0])
        u /= np.linalg.norm(u)
        t = rng.uniform(-0.5, 0.5, (3000, 1))
        s = rng.uniform(-0.3, 0.3, (3000, 1))
        pts = point + t * a + s * u
        fit = estimate_revolute_axis_alg1(None, pts, T)
        sd = screw_decompose(T)
        assert joint_angle_error(fit.axis_dir, sd.axis_dir) < 2.0


def test_prismatic_axis_from_translation():
    np.testing.assert_allclose(estimate_prismatic(Pose.from_translation([0.2, 0, 0])), [1, 0, 0])


def test_prismatic_sign_ambiguity():
    a = estimate_prismatic(Pose.from_translation([0, 0, -0.3]))
    np.testing.assert_allclose(a, [0, 0, -1])
    assert joint_angle_error(a, [0, 0, 1]) == 0.0


def test_prismatic_with_residual_rotation():
    centre = np.array([1.2, -0.4, 0.3])
    T = Pose.from_translation([0.25, 0, 0]) @ screw_pose(math.radians(1.0), [0.2, 0.3, 1.0], centre)
    assert joint_angle_error(estimate_prismatic(T, centre), [1, 0, 0]) < 2.0


def test_prismatic_zero_motion():
    with pytest.raises(ZeroMotion):
        estimate_prismatic(Pose())


def test_estimate_joint_kinds(rng):
    pts = rng.random((500, 3))
    rev = estimate_joint(pts, screw_pose(math.radians(30), [0, 0, 1], [0, 0, 0]), 0)
    pri = estimate_joint(pts, Pose.from_translation([0.1, 0.0, 0.0]), 1)
    assert rev.kind == "revolute" and pri.kind == "prismatic"
    assert rev.motion_magnitude == pytest.approx(math.radians(30))
    assert pri.motion_magnitude == pytest.approx(0.1)


def _est(mag, axis=(1.0, 0, 0), step=0):
    return JointEstimate("revolute", np.array(axis), np.zeros(3), mag, step)


def test_consolidate_insert():
    assert len(consolidate({}, 2, _est(0.1))) == 1


def test_consolidate_larger_motion_wins():
    d = consolidate({}, 2, _est(math.radians(5)))
    d = consolidate(d, 2, _est(math.radians(40), step=1))
    assert d[2].motion_magnitude == pytest.approx(math.radians(40))
    d = consolidate(d, 2, _est(math.radians(10), step=2))
    assert d[2].step == 1


def test_consolidate_labels_independent():
    d = consolidate(consolidate({}, 2, _est(0.1)), 3, _est(0.2))
    assert set(d) == {2, 3}


def test_consolidate_rejects_base_label():
    with pytest.raises(ValueError):
        consolidate({}, 1, _est(0.1))


def test_joint_json_round_trip():
    d = {2: _est(0.3, (0, 1, 0), 4)}
    back = joints_from_json(joints_to_json(d))
    assert back[2].step == 4
    np.testing.assert_allclose(back[2].axis_dir, [0, 1, 0])


def test_signed_motion_follows_axis_sense():
    e = JointEstimate("prismatic", np.array([1.0, 0, 0]), np.zeros(3), 0.1, 0)
    assert signed_motion(Pose.from_translation([-0.2, 0, 0]), e) == pytest.approx(-0.2)
    r = _est(0.5, (0, 0, 1))
    assert signed_motion(screw_pose(-0.3, [0, 0, 1], [0, 0, 0]), r) == pytest.approx(-0.3)
