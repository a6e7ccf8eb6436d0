"""Quasi-static interaction simulator and ground-truth scene flow.

The contact model is deliberately simple: a hold pins the whole object, a
push advances exactly one joint by a fixed step when the push direction is
aligned with the joint's instantaneous motion at the contact point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from .errors import FixedJoint, MisalignedInputs, NoContact, UnknownJoint
from .geometry import Pose, closest_point_distances, unit
from .model import ArticulatedModel, forward_kinematics, posed_meshes

CONTACT_EPS = 0.05
ALIGN_COS = math.cos(math.radians(60.0))
STEP = 0.35
SLIDE = 0.2


@dataclass(frozen=True, eq=False)
class SimState:
    model: ArticulatedModel
    q: Mapping[str, float]
    base_pose: Pose = field(default_factory=Pose)
    free_base: bool = False

    def __post_init__(self):
        q = {j.name: float(self.q.get(j.name, 0.0)) for j in self.model.movable_joints}
        for j in self.model.movable_joints:
            lo, hi = j.limits
            q[j.name] = min(max(q[j.name], lo), hi)
        object.__setattr__(self, "q", q)

    def link_poses(self) -> dict[str, Pose]:
        """World pose of every link (base pose included)."""
        return {k: self.base_pose @ p for k, p in forward_kinematics(self.model, self.q).items()}

    def meshes(self):
        return posed_meshes(self.model, self.q, self.base_pose)

    def joint_axis_world(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        """Axis direction and a point on the axis, in world coordinates."""
        j = self.model.joint(name)
        frame = self.link_poses()[j.parent] @ j.origin
        return frame.apply_vector(j.axis), frame.translation.copy()


@dataclass(frozen=True)
class Action:
    hold_point: tuple[float, float, float]
    push_point: tuple[float, float, float]
    push_dir: tuple[float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "hold_point", tuple(float(x) for x in self.hold_point))
        object.__setattr__(self, "push_point", tuple(float(x) for x in self.push_point))
        object.__setattr__(self, "push_dir", tuple(float(x) for x in unit(self.push_dir)))

    def to_dict(self) -> dict:
        return {"hold_point": list(self.hold_point), "push_point": list(self.push_point), "push_dir": list(self.push_dir)}


@dataclass(frozen=True)
class ActionOutcome:
    moved_joint: str | None = None
    delta_q: float = 0.0
    rigid_slide: tuple[float, float, float] | None = None
    moved_link: str | None = None
    hold_link: str | None = None
    push_link: str | None = None
    ambiguous: bool = False
    reason: str = ""

    def __post_init__(self):
        if self.moved_joint is not None and self.rigid_slide is not None:
            raise ValueError("an outcome cannot both move a joint and slide the base")

    @property
    def moved(self) -> bool:
        return self.moved_joint is not None or self.rigid_slide is not None

    def to_dict(self) -> dict:
        return {
            "moved_joint": self.moved_joint,
            "delta_q": self.delta_q,
            "rigid_slide": list(self.rigid_slide) if self.rigid_slide is not None else None,
            "moved_link": self.moved_link,
            "hold_link": self.hold_link,
            "push_link": self.push_link,
            "ambiguous": self.ambiguous,
            "reason": self.reason,
        }


def _no_motion(reason: str, **kw) -> ActionOutcome:
    return ActionOutcome(reason=reason, **kw)


def actuate_joint(state: SimState, joint: str, target: float) -> SimState:
    """Set one joint directly (oracle actuation, no contact model)."""
    try:
        j = state.model.joint(joint)
    except KeyError:
        raise UnknownJoint(f"no joint named {joint!r}") from None
    if not j.movable:
        raise FixedJoint(f"joint {joint!r} is fixed")
    q = dict(state.q)
    q[joint] = min(max(float(target), j.limits[0]), j.limits[1])
    return replace(state, q=q)


def nearest_link(state: SimState, point, meshes=None) -> tuple[str | None, float]:
    meshes = meshes if meshes is not None else state.meshes()
    best, best_d = None, math.inf
    for name, m in meshes.items():
        if m.is_empty:
            continue
        d = float(closest_point_distances(point, m.triangle_vertices()).min())
        if d < best_d:
            best, best_d = name, d
    return best, best_d


def apply_action(state: SimState, action: Action) -> tuple[SimState, ActionOutcome]:
    """Resolve a hold+push action under the quasi-static contact rule."""
    meshes = state.meshes()
    push_link, d_push = nearest_link(state, action.push_point, meshes)
    if push_link is None or d_push > CONTACT_EPS:
        raise NoContact(f"push point is {d_push:.3f} from the object surface")
    hold_link, d_hold = nearest_link(state, action.hold_point, meshes)
    push_dir = np.asarray(action.push_dir)

    if d_hold > CONTACT_EPS:
        if not state.free_base:
            raise NoContact(f"hold point is {d_hold:.3f} from the object surface")
        slide = tuple(float(x) for x in SLIDE * push_dir)
        new_base = Pose.from_translation(slide) @ state.base_pose
        return replace(state, base_pose=new_base), ActionOutcome(
            rigid_slide=slide, push_link=push_link, reason="unheld free base slid"
        )

    kw = {"hold_link": hold_link, "push_link": push_link}
    if hold_link == push_link:
        return state, _no_motion("hold and push on the same link", **kw)

    # joints whose child subtree contains the push link but not the hold link
    hold_chain = {j.name for j in state.model.chain_to_root(hold_link)}
    candidates = [
        j for j in state.model.chain_to_root(push_link) if j.name not in hold_chain and j.movable
    ]
    if not candidates:
        return state, _no_motion("no movable joint between push and hold links", **kw)
    joint = candidates[0]
    ambiguous = len(candidates) > 1

    axis, axis_point = state.joint_axis_world(joint.name)
    p = np.asarray(action.push_point)
    v = axis if joint.kind == "prismatic" else np.cross(axis, p - axis_point)
    speed = np.linalg.norm(v)
    if speed < 1e-9:
        return state, _no_motion("push point lies on the joint axis", ambiguous=ambiguous, **kw)
    align = float(push_dir @ (v / speed))
    if abs(align) < ALIGN_COS:
        return state, _no_motion("push direction misaligned with joint motion", ambiguous=ambiguous, **kw)

    cur = state.q[joint.name]
    lo, hi = joint.limits
    target = min(max(cur + STEP * math.copysign(1.0, align), lo), hi)
    dq = target - cur
    if abs(dq) < 1e-12:
        return state, _no_motion("joint already at its limit", ambiguous=ambiguous, **kw)
    new_state = actuate_joint(state, joint.name, target)
    return new_state, ActionOutcome(
        moved_joint=joint.name, delta_q=dq, moved_link=joint.child, ambiguous=ambiguous, **kw
    )


def relative_link_motion(before: SimState, after: SimState) -> dict[str, Pose]:
    """World-frame transform carrying each link from ``before`` to ``after``."""
    pb, pa = before.link_poses(), after.link_poses()
    return {k: pa[k] @ pb[k].inverse() for k in pb}


def scene_flow(before: SimState, after: SimState, points, link_ids, link_names) -> np.ndarray:
    """Per-point displacement of ``points`` (on links ``link_names[link_ids]``)."""
    points = np.asarray(points, dtype=float)
    link_ids = np.asarray(link_ids)
    if len(points) != len(link_ids):
        raise MisalignedInputs(f"{len(points)} points but {len(link_ids)} link ids")
    motion = relative_link_motion(before, after)
    flow = np.zeros_like(points)
    for i, name in enumerate(link_names):
        m = link_ids == i
        if not m.any():
            continue
        T = motion[name]
        if T.allclose(Pose(), atol=0.0):
            continue
        flow[m] = T.apply(points[m]) - points[m]
    return flow


def randomize_episode(model: ArticulatedModel, seed: int, yaw_range: float = math.pi) -> SimState:
    """Uniform joint values within limits and a random base yaw."""
    rng = np.random.default_rng(seed)
    q = {j.name: float(rng.uniform(*j.limits)) for j in model.movable_joints}
    yaw = float(rng.uniform(-yaw_range, yaw_range))
    base = Pose.from_axis_angle([0.0, 0.0, 1.0], yaw)
    return SimState(model=model, q=q, base_pose=base, free_base=model.free_base)
