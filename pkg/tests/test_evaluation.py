import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linear_sum_assignment

from articulate.errors import BothEmpty, NoJoints, NotRevolute, ZeroVector
from articulate.evaluation import (
    evaluate,
    hungarian_match,
    joint_angle_error,
    joint_position_error,
    joint_type_accuracy,
    line_distance,
    part_segmentation_score,
    voxel_iou,
)


def brute_force_min(C) -> float:
    m, n = C.shape
    if m <= n:
        return min(sum(C[i, p[i]] for i in range(m)) for p in itertools.permutations(range(n), m))
    return min(sum(C[p[j], j] for j in range(n)) for p in itertools.permutations(range(m), n))


def test_iou_identity_disjoint_half_shift():
    a = np.zeros((4, 4, 4), bool)
    a[:2] = True
    assert voxel_iou(a, a) == 1.0
    assert voxel_iou(a, ~a) == 0.0
    cube = np.zeros((8, 4, 4), bool)
    cube[0:4] = True
    shifted = np.zeros_like(cube)
    shifted[2:6] = True
    assert voxel_iou(cube, shifted) == pytest.approx(1 / 3)


def test_iou_both_empty():
    with pytest.raises(BothEmpty):
        voxel_iou(np.zeros(3, bool), np.zeros(3, bool))


def test_hungarian_permutation_cost():
    perm = [2, 0, 3, 1]
    C = np.ones((4, 4))
    C[range(4), perm] = 0
    pairs, cost = hungarian_match(C)
    assert pairs == list(enumerate(perm)) and cost == 0


def test_hungarian_two_by_two():
    assert hungarian_match([[1, 2], [2, 1]]) == ([(0, 0), (1, 1)], 2.0)


def test_hungarian_six_by_six_brute_force(rng):
    for _ in range(20):
        C = rng.random((6, 6))
        assert hungarian_match(C)[1] == pytest.approx(brute_force_min(C), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 7), st.integers(1, 7), st.integers(0, 10_000), st.booleans())
def test_hungarian_exhaustive_property(m, n, seed, integer):
    rng = np.random.default_rng(seed)
    C = rng.integers(0, 4, (m, n)).astype(float) if integer else rng.random((m, n))
    pairs, cost = hungarian_match(C)
    assert len(pairs) == min(m, n)
    assert len({i for i, _ in pairs}) == len({j for _, j in pairs}) == len(pairs)
    assert cost == pytest.approx(brute_force_min(C), abs=1e-9)
    r, c = linear_sum_assignment(C)
    assert cost == pytest.approx(C[r, c].sum(), abs=1e-9)


def test_hungarian_rejects_bad_input():
    with pytest.raises(ValueError):
        hungarian_match([[1.0, np.nan]])
    with pytest.raises(ValueError):
        hungarian_match([1.0, 2.0])
    assert hungarian_match(np.zeros((0, 3))) == ([], 0.0)


def labels3():
    L = np.zeros((10, 10, 10), np.int8)
    L[:5] = 1
    L[5:, :5] = 2
    L[5:, 5:] = 3
    return L


def test_segmentation_identity():
    L = labels3()
    assert part_segmentation_score(L, L).mean_iou == 1.0


def test_missing_part_scores_zero():
    gt = labels3()
    pred = gt.copy()
    pred[pred == 3] = 2
    s = part_segmentation_score(pred, gt)
    ious = sorted(r["iou"] for r in s.per_part)
    assert len(s.per_part) == 3 and ious[0] == 0.0


@settings(max_examples=30, deadline=None)
@given(st.permutations([1, 2, 3, 4, 5]))
def test_segmentation_is_permutation_invariant(perm):
    rng = np.random.default_rng(0)
    gt = rng.integers(0, 4, (8, 8, 8)).astype(np.int8)
    pred = gt.copy()
    pred[rng.random(gt.shape) < 0.2] = 1
    lut = np.array([0] + list(perm), dtype=np.int8)
    a = part_segmentation_score(pred, gt).mean_iou
    assert part_segmentation_score(lut[pred], gt).mean_iou == pytest.approx(a, abs=1e-12)
    assert part_segmentation_score(pred, lut[gt]).mean_iou == pytest.approx(a, abs=1e-12)


def test_angle_examples():
    assert joint_angle_error([1, 0, 0], [1, 0, 0]) == 0.0
    assert joint_angle_error([1, 0, 0], [-1, 0, 0]) == 0.0
    assert joint_angle_error([1, 0, 0], [1, 1, 0]) == pytest.approx(45.0)
    with pytest.raises(ZeroVector):
        joint_angle_error([0, 0, 0], [1, 0, 0])


vec = st.lists(st.floats(-1, 1), min_size=3, max_size=3).filter(lambda v: np.linalg.norm(v) > 1e-3)


@settings(max_examples=60, deadline=None)
@given(vec, vec, st.sampled_from([-1.0, 1.0]), st.sampled_from([-1.0, 1.0]))
def test_angle_symmetric_and_sign_invariant(a, b, sa, sb):
    e = joint_angle_error(a, b)
    assert 0.0 <= e <= 90.0
    assert joint_angle_error(b, a) == pytest.approx(e, abs=1e-9)
    assert joint_angle_error(np.multiply(sa, a), np.multiply(sb, b)) == pytest.approx(e, abs=1e-9)


def test_line_distances():
    assert line_distance([0, 0, 0], [0, 0, 1], [0, 0, 5], [0, 0, -1]) == 0.0
    assert line_distance([0, 0, 0], [0, 0, 1], [0.1, 0, 0], [0, 0, 1]) == pytest.approx(0.1)
    assert line_distance([0, 0, 0], [0, 0, 1], [1, 0, 0], [0, 1, 0]) == pytest.approx(1.0)


def test_position_error_needs_revolute():
    with pytest.raises(NotRevolute):
        joint_position_error("prismatic", [0, 0, 0], [1, 0, 0], "revolute", [0, 0, 0], [1, 0, 0])


def test_type_accuracy():
    assert joint_type_accuracy([("revolute", "revolute")] * 2) == 1.0
    acc = joint_type_accuracy([("revolute", "revolute"), ("prismatic", "prismatic"), ("prismatic", "revolute"), ("revolute", "revolute")])
    assert acc == 0.75
    assert joint_type_accuracy([(None, "revolute"), ("revolute", "revolute")]) == 0.5
    with pytest.raises(NoJoints):
        joint_type_accuracy([])


def test_evaluate_matches_through_permuted_labels():
    gt = labels3()
    pred = np.array([0, 1, 3, 2], np.int8)[gt]
    gtj = {
        2: {"name": "a", "kind": "revolute", "axis_dir": [0, 0, 1], "axis_point": [0, 0, 0]},
        3: {"name": "b", "kind": "prismatic", "axis_dir": [1, 0, 0], "axis_point": [0, 0, 0]},
    }
    pj = {
        3: {"kind": "revolute", "axis_dir": [0, 0, -1], "axis_point": [0.1, 0, 0]},
        2: {"kind": "prismatic", "axis_dir": [1, 0.01, 0], "axis_point": [0, 0, 0]},
    }
    r = evaluate(pred, gt, pj, gtj)
    assert r.mean_iou == 1.0 and r.joint_type_accuracy == 1.0
    rows = {row["name"]: row for row in r.joints}
    assert rows["a"]["position_error"] == pytest.approx(0.1)
    assert rows["a"]["angle_error_deg"] == pytest.approx(0.0)
    assert rows["b"]["angle_error_deg"] == pytest.approx(math.degrees(math.atan(0.01)))
