import csv
import json
import math

import numpy as np
import pytest

from articulate.episode import (
    RunConfig,
    assemble_model,
    estimated_limits,
    evaluate_dir,
    find_objects,
    rollout,
    run_batch,
    run_episode,
)
from articulate.errors import EmptyDataset, InvalidConfig
from articulate.evaluation import joint_angle_error
from articulate.fixtures import FIXTURES, build_fixture, make_fixtures
from articulate.jointest import JointEstimate
from articulate.model import TriMesh, load_urdf, parse_urdf
from articulate.policy import JointActuation

LIGHT = dict(image_res=64, grid_res=48)


def test_steps_zero_rejected():
    with pytest.raises(InvalidConfig):
        RunConfig("laptop", steps=0)


def test_unknown_object_and_keys_rejected(tmp_path):
    with pytest.raises(InvalidConfig):
        RunConfig(str(tmp_path / "missing.urdf"))
    with pytest.raises(InvalidConfig):
        RunConfig.from_dict({"object": "laptop", "colour": "red"})
    with pytest.raises(InvalidConfig):
        RunConfig("laptop", mode="psychic")


def test_drawer_episode_gives_prismatic_urdf(tmp_path):
    res = run_episode(RunConfig("cabinet_1drawer", steps=2, out=str(tmp_path / "ep")))
    m = load_urdf(tmp_path / "ep" / "object.urdf")
    assert len(m.links) == 2
    assert [j.kind for j in m.joints] == ["prismatic"]
    assert res.report.joint_type_accuracy == 1.0


def test_laptop_episode_gives_revolute_urdf(tmp_path):
    res = run_episode(RunConfig("laptop", steps=2, out=str(tmp_path / "ep")))
    m = load_urdf(tmp_path / "ep" / "object.urdf")
    assert len(m.links) == 2
    assert [j.kind for j in m.joints] == ["revolute"]
    assert res.report.joints[0]["angle_error_deg"] < 2.0


def test_artifacts_exist_and_reparse(tmp_path):
    out = tmp_path / "ep"
    run_episode(RunConfig("kitchen_pot", steps=2, out=str(out), **LIGHT))
    text = (out / "object.urdf").read_text()
    parse_urdf(text, out)
    for ref in [s.split('"')[1] for s in text.split("filename=")[1:]]:
        assert (out / ref).is_file()
    for name in ("actions.json", "joints.json", "gt_joints.json", "config.json", "metrics.json"):
        json.loads((out / name).read_text())
    assert len(list((out / "clouds").glob("*.ply"))) == 3
    assert (out / "volumes" / "H_final.vol").is_file()


def test_evaluate_dir_matches_report(tmp_path):
    out = tmp_path / "ep"
    res = run_episode(RunConfig("laptop", steps=2, out=str(out), **LIGHT))
    assert evaluate_dir(out).to_dict() == json.loads(json.dumps(res.report.to_dict()))


def test_same_seed_is_byte_identical(tmp_path):
    for k in "ab":
        run_episode(RunConfig("cabinet_3part", policy="lookahead", steps=2, seed=4, candidates=16, out=str(tmp_path / k), **LIGHT))
    assert (tmp_path / "a" / "metrics.json").read_bytes() == (tmp_path / "b" / "metrics.json").read_bytes()
    assert (tmp_path / "a" / "actions.json").read_bytes() == (tmp_path / "b" / "actions.json").read_bytes()
    ma, mb = load_urdf(tmp_path / "a" / "object.urdf"), load_urdf(tmp_path / "b" / "object.urdf")
    assert [len(m.vertices) for m in ma.links.values()] == [len(m.vertices) for m in mb.links.values()]


def test_failed_step_is_recorded_not_raised():
    # the stress object runs out of labels once six parts have moved
    r = rollout(RunConfig("stress_7part", steps=6, **LIGHT))
    assert len(r.log) == 6
    assert any(e["error"] == "PartBudgetExceeded" for e in r.errors)
    assert r.errors[-1]["step"] == 5


def test_no_motion_step_keeps_volume():
    m = build_fixture("laptop")
    j = m.movable_joints[0].name
    r = rollout(RunConfig("laptop", steps=2, **LIGHT), script=[JointActuation(j, 10.0), JointActuation(j, 10.0)])
    assert r.log.records[1].outcome["moved_joint"] is None
    np.testing.assert_array_equal(r.history[1].data, r.history[2].data)


def test_scripted_rollout_needs_full_script():
    with pytest.raises(InvalidConfig):
        rollout(RunConfig("laptop", steps=3, **LIGHT), script=[JointActuation("x", 0.0)])


def test_estimated_limits_span_observed_motion():
    lo, hi = estimated_limits([0.0, 0.3, 0.5], "prismatic")
    assert lo == pytest.approx(-0.55) and hi == pytest.approx(0.05)


def test_assemble_star_topology():
    cube = TriMesh(np.eye(3), [[0, 1, 2]])
    joints = {
        2: JointEstimate("revolute", np.array([0, 0, 1.0]), np.array([0.5, 0, 0]), 0.4, 0),
        3: JointEstimate("prismatic", np.array([1.0, 0, 0]), np.zeros(3), 0.1, 1),
    }
    m = assemble_model({1: cube, 2: cube, 3: cube, 4: cube}, joints, {2: [0, 0.4], 3: [0, 0.1]}, "x")
    assert {j.parent for j in m.joints} == {"base"}
    kinds = {j.child: j.kind for j in m.joints}
    assert kinds == {"part2": "revolute", "part3": "prismatic", "part4": "fixed"}
    np.testing.assert_allclose(m.joint("joint2").origin.translation, [0.5, 0, 0])
    # child geometry is expressed in its joint frame
    np.testing.assert_allclose(m.links["part2"].vertices, np.eye(3) - [0.5, 0, 0])


def test_fixture_construction():
    cab = build_fixture("cabinet_1drawer")
    assert [j.kind for j in cab.movable_joints] == ["prismatic"]
    np.testing.assert_allclose(cab.movable_joints[0].axis, [1, 0, 0])
    assert build_fixture("scissors").free_base
    assert len(build_fixture("cabinet_3part").movable_joints) == 3
    assert len(build_fixture("stress_7part").links) == 7


def test_make_fixtures_writes_urdfs(tmp_path):
    paths = make_fixtures(tmp_path)
    assert len(paths) == len(FIXTURES)
    for p in paths:
        assert load_urdf(p).allclose(build_fixture(p.stem), atol=1e-6)


@pytest.fixture
def dataset(tmp_path):
    make_fixtures(tmp_path / "data", ["laptop", "scissors", "kitchen_pot"])
    return tmp_path / "data"


def test_batch_counts_resumes_and_averages(dataset, tmp_path):
    tpl = {"object": "laptop", "steps": 1, **LIGHT}
    out = tmp_path / "runs"
    s = run_batch(dataset, tpl, [0, 1], out)
    eps = sorted(p.parent for p in out.rglob("metrics.json"))
    assert len(eps) == 6 and s["executed"] == 6
    assert (out / "summary.json").is_file() and (out / "summary.csv").is_file()
    with open(out / "summary.csv") as fh:
        ious = [float(r["mean_iou"]) for r in csv.DictReader(fh)]
    per_ep = [json.loads((p / "metrics.json").read_text())["mean_iou"] for p in eps]
    assert abs(s["means"]["mean_iou"] - sum(per_ep) / 6) < 1e-12
    assert sorted(ious) == pytest.approx(sorted(per_ep), abs=1e-12)

    for p in eps[1:]:
        (p / "metrics.json").unlink()
    assert run_batch(dataset, tpl, [0, 1], out)["executed"] == 5


def test_empty_dataset(tmp_path):
    with pytest.raises(EmptyDataset):
        find_objects(tmp_path)
