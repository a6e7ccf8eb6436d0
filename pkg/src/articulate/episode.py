"""Episode orchestration: observe, act, perceive, estimate, then build the model.

An episode runs a fixed interaction budget against one object, aggregates the
part-probability volume and the joint dictionary, and finally emits a URDF
with one link per discovered part plus a metrics report.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import evaluation
from .errors import ArticulateError, EmptyDataset, InvalidConfig
from .fixtures import FIXTURES, build_fixture
from .geometry import Pose
from .jointest import JointEstimate, consolidate, estimate_joint, joints_to_json, signed_motion
from .meshing import extract_part_meshes
from .model import ArticulatedModel, JointSpec, TriMesh, load_urdf, normalize_to_cube, save_urdf
from .percept import (
    Observation,
    PartVolume,
    assign_label,
    detect_moved_region,
    gt_part_volume,
    init_part_volume,
    update_part_volume,
)
from .policy import (
    POLICIES,
    ActionLog,
    ActionRecord,
    execute_oracle,
    is_optimal,
    lookahead_policy,
    optimal_action_ratio,
    oracle_action,
    random_action,
)
from .sensor import GRID_HI, GRID_LO, GRID_RES, N_POINTS, PointCloud, default_rig, fuse, render_depth, sample_cloud, voxelize, write_ply
from .sim import ActionOutcome, SimState, apply_action, randomize_episode, scene_flow

log = logging.getLogger(__name__)

MODES = ("oracle-flow", "estimated")
LIMIT_PAD = 0.1


@dataclass
class RunConfig:
    object: str
    policy: str = "oracle"
    mode: str = "oracle-flow"
    steps: int = 5
    seed: int = 0
    out: str | None = None
    noise: float = 0.0
    candidates: int = 64
    grid_res: int = GRID_RES
    grid_lo: float = GRID_LO
    grid_hi: float = GRID_HI
    image_res: int = 128
    vfov: float = 60.0
    camera_radius: float = 2.5
    camera_elevation: float = 20.0
    yaw_range: float = math.pi
    write_volumes: bool = True

    def __post_init__(self):
        try:
            self.steps = int(self.steps)
            self.seed = int(self.seed)
            self.candidates = int(self.candidates)
            self.grid_res = int(self.grid_res)
            self.image_res = int(self.image_res)
            for name in ("noise", "grid_lo", "grid_hi", "vfov", "camera_radius", "camera_elevation", "yaw_range"):
                setattr(self, name, float(getattr(self, name)))
        except (TypeError, ValueError) as exc:
            raise InvalidConfig(str(exc)) from exc
        if self.steps < 1:
            raise InvalidConfig(f"steps must be >= 1, got {self.steps}")
        if self.policy not in POLICIES:
            raise InvalidConfig(f"unknown policy {self.policy!r}; choose from {POLICIES}")
        if self.mode not in MODES:
            raise InvalidConfig(f"unknown perception mode {self.mode!r}; choose from {MODES}")
        if self.noise < 0:
            raise InvalidConfig("depth noise must be non-negative")
        if self.candidates < 1:
            raise InvalidConfig("candidate count must be >= 1")
        if self.grid_res < 2 or not self.grid_lo < self.grid_hi:
            raise InvalidConfig("invalid voxel grid")
        if self.object not in FIXTURES and not Path(self.object).is_file():
            raise InvalidConfig(f"object {self.object!r} is neither a fixture name nor an existing file")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown config keys: {sorted(unknown)}")
        if "object" not in d:
            raise InvalidConfig("config needs an object")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def load_object(spec: str) -> ArticulatedModel:
    return build_fixture(spec) if spec in FIXTURES else load_urdf(spec)


# ---------------------------------------------------------------------------
# observation
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class Frame:
    """One observation: dense fused cloud, policy cloud and voxel grid."""

    raw: PointCloud
    cloud: PointCloud
    grid: object
    images: list = field(default_factory=list)


class Observer:
    def __init__(self, cfg: RunConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng
        self.rig = default_rig(cfg.camera_radius, cfg.camera_elevation, cfg.vfov, (cfg.image_res, cfg.image_res))

    def __call__(self, state: SimState, step: int) -> Frame:
        cfg = self.cfg
        meshes = state.meshes()
        colors = {k: state.model.color_of(k) for k in meshes}
        images = [render_depth(meshes, cam, colors, cfg.noise, self.rng) for cam in self.rig]
        raw = fuse(images)
        cloud = sample_cloud(raw, N_POINTS, seed=cfg.seed * 1000 + step)
        grid = voxelize(raw, cfg.grid_res, cfg.grid_lo, cfg.grid_hi)
        return Frame(raw, cloud, grid, images)


# ---------------------------------------------------------------------------
# rollout
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class Rollout:
    initial_state: SimState
    final_state: SimState
    H: PartVolume
    history: list[PartVolume]
    joints: dict[int, JointEstimate]
    displacements: dict[int, list[float]]
    log: ActionLog
    observations: list[Observation]
    frames: list[Frame]
    moved_links: list[str]
    errors: list[dict] = field(default_factory=list)


def _choose(cfg, state, frame, H, discovered_joints, rng, script, step):
    """Pick and execute the next interaction. Returns (state, outcome, action dict, fallback, score)."""
    if script is not None:
        act = script[step]
        new, outcome = execute_oracle(state, act)
        return new, outcome, act.to_dict(), False, None
    if cfg.policy == "oracle":
        act = oracle_action(state, discovered_joints)
        new, outcome = execute_oracle(state, act)
        return new, outcome, act.to_dict(), False, None
    if cfg.policy == "lookahead":
        try:
            best = lookahead_policy(state, frame.cloud, H, cfg.candidates, rng)
            new, outcome = apply_action(state, best.action)
            return new, outcome, best.action.to_dict(), False, best.score
        except ArticulateError as exc:
            if exc.code != "NoValidCandidate":
                raise
            fallback = True
    else:
        fallback = False
    action = random_action(frame.cloud, rng)
    try:
        new, outcome = apply_action(state, action)
    except ArticulateError as exc:
        new, outcome = state, ActionOutcome(reason=f"{exc.code}: {exc}")
    return new, outcome, action.to_dict(), fallback, None


def _perceive(cfg, before: SimState, after: SimState, fb: Frame, fa: Frame):
    if cfg.mode == "oracle-flow":
        names = list(before.model.links)
        flow = scene_flow(before, after, fb.raw.positions, fb.raw.link_ids, names)
        back = scene_flow(after, before, fa.raw.positions, fa.raw.link_ids, names)
        return detect_moved_region(
            fb.raw, flow, mode="oracle-flow", cloud_after=fa.raw, flow_after=back,
            res=cfg.grid_res, lo=cfg.grid_lo, hi=cfg.grid_hi,
        )
    return detect_moved_region(
        fb.raw, mode="estimated", cloud_after=fa.raw, grids=(fb.grid, fa.grid), images=(fb.images, fa.images)
    )


def _transform_estimate(e: JointEstimate, T: Pose) -> JointEstimate:
    return JointEstimate(e.kind, T.apply_vector(e.axis_dir), T.apply(e.axis_point), e.motion_magnitude, e.step, e.fallback)


def rollout(cfg: RunConfig, model: ArticulatedModel | None = None, state: SimState | None = None, script=None) -> Rollout:
    """Run the interaction loop. ``script`` optionally replaces the policy by
    a fixed list of joint actuations (one per step)."""
    if model is None:
        model, _ = normalize_to_cube(load_object(cfg.object))
    if state is None:
        state = randomize_episode(model, cfg.seed, cfg.yaw_range)
    if script is not None and len(script) < cfg.steps:
        raise InvalidConfig("scripted episode needs one actuation per step")
    policy_rng = np.random.default_rng([cfg.seed, 1])
    observe = Observer(cfg, np.random.default_rng([cfg.seed, 2]))

    initial = state
    frame = observe(state, 0)
    frames = [frame]
    observations = [Observation(state, frame.raw)]
    H = init_part_volume(frame.grid)
    history = [H]
    joints: dict[int, JointEstimate] = {}
    disp: dict[int, list[float]] = {}
    alog = ActionLog(max_steps=cfg.steps)
    moved_links: list[str] = []
    discovered_joints: list[str] = []
    all_parts = [j.child for j in model.movable_joints]
    errors = []

    for step in range(cfg.steps):
        before_links = list(moved_links)
        new_state, outcome, action, fallback, score = _choose(cfg, state, frame, H, discovered_joints, policy_rng, script, step)
        err = None
        if outcome.moved_joint is not None:
            if outcome.moved_joint not in discovered_joints:
                discovered_joints.append(outcome.moved_joint)
            if outcome.moved_link not in moved_links:
                moved_links.append(outcome.moved_link)
        if outcome.moved:
            next_frame = observe(new_state, step + 1)
            try:
                region = _perceive(cfg, state, new_state, frame, next_frame)
                label = None if region.global_motion else assign_label(region, H)
                H = update_part_volume(H, region, label, next_frame.grid, V_before=frame.grid)
                if label is None:
                    T = region.transform
                    joints = {k: _transform_estimate(v, T) for k, v in joints.items()}
                else:
                    est = estimate_joint(region.points, region.transform, step)
                    joints = consolidate(joints, label, est)
                    series = disp.setdefault(label, [0.0])
                    series.append(series[-1] + signed_motion(region.transform, joints[label]))
            except ArticulateError as exc:
                err = f"{exc.code}: {exc}"
                errors.append({"step": step, "error": exc.code, "message": str(exc)})
                log.warning("step %d: %s", step, err)
            state, frame = new_state, next_frame
            frames.append(frame)
            observations.append(Observation(state, frame.raw))
        history.append(H)
        alog.append(
            ActionRecord(
                step=step,
                policy="script" if script is not None else cfg.policy,
                action=action,
                outcome=outcome.to_dict(),
                was_optimal=is_optimal(outcome, before_links, all_parts),
                discovered_before=before_links,
                discovered_after=list(moved_links),
                fallback=fallback,
                score=score,
                error=err,
            )
        )
    return Rollout(initial, state, H, history, joints, disp, alog, observations, frames, moved_links, errors)


# ---------------------------------------------------------------------------
# model assembly and evaluation
# ---------------------------------------------------------------------------


def estimated_limits(series: list[float], kind: str) -> tuple[float, float]:
    """Observed displacement range relative to the final state, padded 10%."""
    s = np.asarray(series, dtype=float) - series[-1]
    lo, hi = float(s.min()), float(s.max())
    pad = LIMIT_PAD * (hi - lo)
    lo, hi = lo - pad, hi + pad
    if kind == "revolute":
        lo, hi = max(lo, -2 * math.pi), min(hi, 2 * math.pi)
    return lo, hi


def assemble_model(meshes: dict[int, TriMesh], joints: dict[int, JointEstimate], disp: dict[int, list[float]], name: str) -> ArticulatedModel:
    """Star-shaped model: every part jointed directly to the base (label 1)."""
    links = {"base": meshes.get(1, TriMesh.empty())}
    specs = []
    labels = sorted(set(meshes) | set(joints))
    for lab in labels:
        if lab == 1:
            continue
        link = f"part{lab}"
        mesh = meshes.get(lab, TriMesh.empty())
        est = joints.get(lab)
        if est is None:
            links[link] = mesh
            specs.append(JointSpec(f"joint{lab}", "fixed", "base", link))
            continue
        origin = Pose.from_translation(est.axis_point)
        links[link] = mesh.transformed(origin.inverse())
        limits = estimated_limits(disp.get(lab, [0.0]), est.kind)
        specs.append(JointSpec(f"joint{lab}", est.kind, "base", link, est.axis_dir, origin, limits))
    return ArticulatedModel(links, tuple(specs), root="base", name=name)


def gt_joints(final_state: SimState, moved_links: list[str]) -> dict[int, dict]:
    """Ground-truth joint of each discovered part, in world coordinates."""
    out = {}
    for i, link in enumerate(moved_links):
        j = final_state.model.parent_joint(link)
        axis, point = final_state.joint_axis_world(j.name)
        out[2 + i] = {"name": j.name, "kind": j.kind, "axis_dir": [float(x) for x in axis], "axis_point": [float(x) for x in point]}
    return out


def gt_volume(r: Rollout, cfg: RunConfig) -> PartVolume:
    return gt_part_volume(r.final_state, r.observations, r.moved_links, cfg.grid_res, cfg.grid_lo, cfg.grid_hi)


def score_rollout(r: Rollout, cfg: RunConfig, gt: PartVolume | None = None) -> evaluation.MetricsReport:
    gt = gt if gt is not None else gt_volume(r, cfg)
    pred_joints = {k: v.to_dict() for k, v in r.joints.items()}
    report = evaluation.evaluate(r.H.hardened(), gt.label_map(), pred_joints, gt_joints(r.final_state, r.moved_links))
    report.optimal_action_ratio = optimal_action_ratio(r.log)
    report.metadata = {
        "object": Path(cfg.object).stem if cfg.object not in FIXTURES else cfg.object,
        "policy": cfg.policy,
        "mode": cfg.mode,
        "seed": cfg.seed,
        "steps": cfg.steps,
        "noise": cfg.noise,
        "errors": r.errors,
    }
    return report


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


@dataclass(eq=False)
class EpisodeResult:
    rollout: Rollout
    report: evaluation.MetricsReport
    model: ArticulatedModel
    meshes: dict[int, TriMesh]
    out_dir: Path | None
    wall_time: float


def run_episode(cfg: RunConfig, script=None) -> EpisodeResult:
    t0 = time.perf_counter()
    source = load_object(cfg.object)
    model, scale = normalize_to_cube(source)
    r = rollout(cfg, model, script=script)
    gt = gt_volume(r, cfg)
    report = score_rollout(r, cfg, gt)
    report.metadata["scale"] = scale
    try:
        meshes = extract_part_meshes(r.H)
    except ArticulateError as exc:
        log.warning("meshing failed: %s", exc)
        meshes = {}
    out_model = assemble_model(meshes, r.joints, r.displacements, f"{model.name}_reconstructed")
    out_dir = None
    if cfg.out is not None:
        out_dir = Path(cfg.out)
        write_artifacts(out_dir, cfg, r, gt, report, out_model)
    return EpisodeResult(r, report, out_model, meshes, out_dir, time.perf_counter() - t0)


def write_artifacts(out: Path, cfg: RunConfig, r: Rollout, gt: PartVolume, report, out_model: ArticulatedModel) -> None:
    out.mkdir(parents=True, exist_ok=True)
    save_urdf(out_model, out / "object.urdf")
    clouds = out / "clouds"
    clouds.mkdir(exist_ok=True)
    for i, f in enumerate(r.frames):
        write_ply(f.cloud, clouds / f"obs_{i:02d}.ply")
    vols = out / "volumes"
    vols.mkdir(exist_ok=True)
    if cfg.write_volumes:
        for i, H in enumerate(r.history):
            H.save(vols / f"H_{i:02d}.vol")
    r.H.save(vols / "H_final.vol")
    gt.save(vols / "gt.vol")
    (out / "actions.json").write_text(r.log.to_json() + "\n")
    (out / "joints.json").write_text(dumps(joints_to_json(r.joints)))
    (out / "gt_joints.json").write_text(dumps({str(k): v for k, v in gt_joints(r.final_state, r.moved_links).items()}))
    (out / "config.json").write_text(dumps(cfg.to_dict()))
    # written last: its presence marks a completed episode
    (out / "metrics.json").write_text(dumps(report.to_dict()))


def evaluate_dir(out: Path) -> evaluation.MetricsReport:
    """Recompute metrics from an episode's dumped artifacts."""
    out = Path(out)
    H = PartVolume.load(out / "volumes" / "H_final.vol")
    gt = PartVolume.load(out / "volumes" / "gt.vol")
    pred = {int(k): v for k, v in json.loads((out / "joints.json").read_text()).items()}
    gtj = {int(k): v for k, v in json.loads((out / "gt_joints.json").read_text()).items()}
    alog = ActionLog.from_json((out / "actions.json").read_text())
    report = evaluation.evaluate(H.hardened(), gt.label_map(), pred, gtj)
    report.optimal_action_ratio = optimal_action_ratio(alog)
    old = out / "metrics.json"
    if old.exists():
        report.metadata = json.loads(old.read_text()).get("metadata", {})
    return report


# ---------------------------------------------------------------------------
# batch
# ---------------------------------------------------------------------------

SUMMARY_KEYS = ("mean_iou", "joint_type_accuracy", "mean_angle_error_deg", "mean_position_error", "optimal_action_ratio")


def _flat(report: dict) -> dict:
    ang = [j["angle_error_deg"] for j in report["joints"] if j["angle_error_deg"] is not None]
    pos = [j["position_error"] for j in report["joints"] if j["position_error"] is not None]
    return {
        "mean_iou": report["mean_iou"],
        "joint_type_accuracy": report["joint_type_accuracy"],
        "mean_angle_error_deg": float(np.mean(ang)) if ang else None,
        "mean_position_error": float(np.mean(pos)) if pos else None,
        "optimal_action_ratio": report["optimal_action_ratio"],
    }


def find_objects(dataset) -> list[str]:
    """URDF files under ``dataset`` (or fixture names given as a list)."""
    if isinstance(dataset, (list, tuple)):
        objs = list(dataset)
    else:
        objs = sorted(str(p) for p in Path(dataset).rglob("*.urdf"))
    if not objs:
        raise EmptyDataset(f"no object found in {dataset}")
    return objs


def run_batch(dataset, template: RunConfig | dict, seeds, out_dir) -> dict:
    """Every object x seed into ``out_dir/<object>/seed_<k>``, then a summary.

    Episodes whose ``metrics.json`` already exists are not re-run.
    """
    base = template.to_dict() if isinstance(template, RunConfig) else dict(template)
    objects = find_objects(dataset)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows, executed = [], 0
    for obj in objects:
        stem = obj if obj in FIXTURES else Path(obj).stem
        for seed in seeds:
            ep = out_dir / stem / f"seed_{seed}"
            metrics = ep / "metrics.json"
            if not metrics.exists():
                cfg = RunConfig.from_dict({**base, "object": obj, "seed": seed, "out": str(ep)})
                try:
                    run_episode(cfg)
                except ArticulateError as exc:
                    ep.mkdir(parents=True, exist_ok=True)
                    (ep / "error.json").write_text(dumps({"error": exc.code, "message": str(exc)}))
                    continue
                executed += 1
            rows.append({"object": stem, "seed": seed, **_flat(json.loads(metrics.read_text()))})
    summary = {"episodes": len(rows), "executed": executed, "means": {}}
    for k in SUMMARY_KEYS:
        vals = [r[k] for r in rows if r[k] is not None]
        summary["means"][k] = float(np.mean(vals)) if vals else None
    (out_dir / "summary.json").write_text(dumps(summary))
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["object", "seed", *SUMMARY_KEYS])
        w.writeheader()
        w.writerows(rows)
    return summary

