"""Interaction policies and the optimal-action-ratio metric.

Three policies pick the next interaction: a ground-truth oracle that
actuates an undiscovered joint directly, a one-step lookahead that simulates
sampled hold+push candidates and scores the resulting scene flow, and a
random baseline.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyLog, InvalidConfig, MisalignedInputs, NoContact, NoMovableJoint, NoValidCandidate
from .geometry import unit
from .percept import PartVolume
from .sensor import PointCloud, voxel_index
from .sim import Action, ActionOutcome, SimState, actuate_joint, apply_action, scene_flow

POLICIES = ("oracle", "lookahead", "random")
CONTACT_RADIUS = 0.1
FLOW_EPS = 1e-3
NOVELTY_BONUS = 2.0
ORACLE_FRACTION = 0.4
N_CANDIDATES = 64


@dataclass(frozen=True)
class EpisodeConfig:
    steps: int = 5
    policy: str = "oracle"
    candidates: int = N_CANDIDATES
    seed: int = 0

    def __post_init__(self):
        if int(self.steps) < 1:
            raise InvalidConfig(f"steps must be >= 1, got {self.steps}")
        if self.policy not in POLICIES:
            raise InvalidConfig(f"unknown policy {self.policy!r}; choose from {POLICIES}")
        if int(self.candidates) < 1:
            raise InvalidConfig("candidate count must be >= 1")


@dataclass(frozen=True)
class JointActuation:
    """Oracle action: drive ``joint`` straight to ``target``."""

    joint: str
    target: float

    def to_dict(self) -> dict:
        return {"joint": self.joint, "target": float(self.target)}


def oracle_action(state: SimState, discovered=()) -> JointActuation:
    """Actuate the first undiscovered joint (any joint once all are found).

    The target differs from the current value by 40% of the joint range,
    toward whichever limit leaves more room.
    """
    movable = state.model.movable_joints
    if not movable:
        raise NoMovableJoint(f"{state.model.name} has no movable joint")
    pending = [j for j in movable if j.name not in set(discovered)]
    joint = (pending or movable)[0]
    lo, hi = joint.limits
    q = state.q[joint.name]
    step = ORACLE_FRACTION * (hi - lo)
    target = q + step if hi - q >= q - lo else q - step
    return JointActuation(joint.name, target)


def execute_oracle(state: SimState, act: JointActuation) -> tuple[SimState, ActionOutcome]:
    new = actuate_joint(state, act.joint, act.target)
    j = state.model.joint(act.joint)
    dq = new.q[act.joint] - state.q[act.joint]
    if abs(dq) < 1e-12:
        return state, ActionOutcome(reason="joint already at target")
    return new, ActionOutcome(moved_joint=act.joint, delta_q=dq, moved_link=j.child)


def _label_at(H: PartVolume, points: np.ndarray) -> np.ndarray:
    ijk, inside = voxel_index(points, H.resolution, H.lo, H.hi)
    lab = np.zeros(len(points), dtype=np.int64)
    lm = H.label_map()
    lab[inside] = lm[ijk[inside, 0], ijk[inside, 1], ijk[inside, 2]]
    return lab


def score_action(
    points,
    flow,
    action: Action,
    H: PartVolume | None = None,
    radius: float = CONTACT_RADIUS,
    eps: float = FLOW_EPS,
    novelty: float = NOVELTY_BONUS,
) -> float:
    """Flow-based desirability of an executed candidate.

    Mean flow magnitude near the push point, zeroed unless the region around
    the hold point stays still, doubled when the moving region is still
    labelled as base (an undiscovered part).
    """
    points = np.asarray(points, dtype=float)
    flow = np.asarray(flow, dtype=float)
    if points.shape != flow.shape:
        raise MisalignedInputs(f"flow {flow.shape} does not match points {points.shape}")
    mag = np.linalg.norm(flow, axis=1)
    near_push = np.linalg.norm(points - np.asarray(action.push_point), axis=1) < radius
    near_hold = np.linalg.norm(points - np.asarray(action.hold_point), axis=1) < radius
    if not near_push.any() or not near_hold.any():
        return 0.0
    if mag[near_hold].max() >= eps:
        return 0.0
    score = float(mag[near_push].mean())
    if score <= 0.0 or H is None:
        return score
    moving = mag > eps
    labels = _label_at(H, points[moving])
    labels = labels[labels > 0]
    if len(labels) == 0 or np.bincount(labels).argmax() == 1:
        score *= novelty
    return score


@dataclass(frozen=True)
class Candidate:
    action: Action
    score: float
    outcome: ActionOutcome
    index: int


def _sample_directions(normals: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random unit directions, half of them near the surface normal (either
    sense) and half near the tangent plane."""
    n = len(normals)
    r = rng.normal(size=(n, 3))
    nrm = np.array([unit(v) if np.linalg.norm(v) > 1e-9 else np.array([0.0, 0.0, 1.0]) for v in normals])
    tangent = r - np.sum(r * nrm, axis=1, keepdims=True) * nrm
    sign = rng.choice([-1.0, 1.0], size=(n, 1))
    along = rng.random(n) < 0.5
    w = np.where(along[:, None], 1.0, 0.3)
    d = sign * w * nrm + (1.0 - w + 0.3) * tangent / np.maximum(np.linalg.norm(tangent, axis=1, keepdims=True), 1e-9)
    d += 0.15 * rng.normal(size=(n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def sample_candidates(cloud: PointCloud, H: PartVolume | None, k: int, rng: np.random.Generator) -> list[Action]:
    pts = cloud.positions
    hold_pool = np.arange(len(pts))
    if H is not None:
        lab = _label_at(H, pts)
        quiet = np.nonzero(lab <= 1)[0]
        if len(quiet):
            hold_pool = quiet
    hold = rng.choice(hold_pool, size=k)
    push = rng.integers(0, len(pts), size=k)
    dirs = _sample_directions(cloud.normals[push], rng)
    return [Action(pts[h], pts[p], d) for h, p, d in zip(hold, push, dirs)]


def evaluate_candidates(state: SimState, cloud: PointCloud, H: PartVolume | None, actions) -> list[Candidate]:
    names = list(state.model.links)
    out = []
    for i, a in enumerate(actions):
        try:
            new, outcome = apply_action(state, a)
        except NoContact as exc:
            out.append(Candidate(a, 0.0, ActionOutcome(reason=str(exc)), i))
            continue
        if not outcome.moved:
            out.append(Candidate(a, 0.0, outcome, i))
            continue
        flow = scene_flow(state, new, cloud.positions, cloud.link_ids, names)
        out.append(Candidate(a, score_action(cloud.positions, flow, a, H), outcome, i))
    return out


def lookahead_policy(state: SimState, cloud: PointCloud, H: PartVolume | None, k: int, rng: np.random.Generator) -> Candidate:
    """Best of ``k`` simulated candidates; ties go to the lowest index."""
    if not state.model.movable_joints:
        raise NoValidCandidate(f"{state.model.name} has no movable joint")
    if k < 1:
        raise InvalidConfig("candidate count must be >= 1")
    cands = evaluate_candidates(state, cloud, H, sample_candidates(cloud, H, k, rng))
    if not any(c.outcome.moved for c in cands):
        raise NoValidCandidate(f"none of {k} candidates moved the object")
    scores = np.array([c.score if c.outcome.moved else -1.0 for c in cands])
    return cands[int(np.argmax(scores))]


def random_action(cloud: PointCloud, rng: np.random.Generator) -> Action:
    pts = cloud.positions
    h, p = rng.integers(0, len(pts), size=2)
    return Action(pts[h], pts[p], unit(rng.normal(size=3)))


def is_optimal(outcome: ActionOutcome, discovered_before, all_parts) -> bool:
    """An action is optimal when it moves an undiscovered part, or any part
    once every part is known. Whole-object slides never count."""
    if outcome.moved_joint is None:
        return False
    if set(all_parts) <= set(discovered_before):
        return True
    return outcome.moved_link not in set(discovered_before)


@dataclass
class ActionRecord:
    step: int
    policy: str
    action: dict
    outcome: dict
    was_optimal: bool
    discovered_before: list[str]
    discovered_after: list[str]
    fallback: bool = False
    score: float | None = None
    error: str | None = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class ActionLog:
    records: list[ActionRecord] = field(default_factory=list)
    max_steps: int | None = None

    def append(self, rec: ActionRecord) -> None:
        if self.max_steps is not None and len(self.records) >= self.max_steps:
            raise ValueError("action log already holds the full step budget")
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def to_json(self) -> str:
        return json.dumps({"records": [r.to_dict() for r in self.records]}, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ActionLog":
        return cls([ActionRecord(**r) for r in json.loads(text)["records"]])


def optimal_action_ratio(log) -> float:
    """Fraction of logged actions marked optimal."""
    records = log.records if isinstance(log, ActionLog) else list(log)
    if not records:
        raise EmptyLog("no actions were logged")
    flags = [r.was_optimal if isinstance(r, ActionRecord) else bool(r) for r in records]
    return sum(flags) / len(flags)

