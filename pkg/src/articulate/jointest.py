"""Joint parameter estimation from a rigid part motion.

Registration (Kabsch/ICP), screw decomposition of the resulting transform,
prismatic/revolute classification, the overlap-line axis heuristic and the
per-part consolidation dictionary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateGeometry, ZeroMotion
from .geometry import Pose, axis_angle_matrix

K_THRESHOLD = math.radians(5.0)
OVERLAP_DELTA = 0.02
MIN_TRANSLATION = 1e-4
# overlap scatter must be this much longer than wide to count as a line
LINE_ELONGATION = 3.0


def fit_rigid(src, dst, weights=None) -> Pose:
    """Least-squares rigid transform mapping ``src`` onto ``dst`` (Kabsch)."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != dst.shape or len(src) < 3:
        raise DegenerateGeometry("need at least 3 corresponding points")
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=float)
    w = w / w.sum()
    cs = w @ src
    cd = w @ dst
    H = (src - cs).T @ ((dst - cd) * w[:, None])
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return Pose(R, cd - R @ cs)


def _check_spread(p, what):
    if len(p) < 3:
        raise DegenerateGeometry(f"{what} has fewer than 3 points")
    s = np.linalg.svd(p - p.mean(axis=0), compute_uv=False)
    if s[0] < 1e-9 or s[1] < 1e-9 * max(1.0, s[0]):
        raise DegenerateGeometry(f"{what} is collinear or coincident")


@dataclass(frozen=True)
class IcpResult:
    pose: Pose
    rms: float
    iterations: int
    converged: bool


def icp_rigid(source, target, max_iters: int = 50, tol: float = 1e-7, init: Pose | None = None, trim: float = 1.0) -> IcpResult:
    """Point-to-point ICP returning the source -> target transform.

    ``trim`` < 1 keeps only that fraction of closest correspondences per
    iteration (for partially overlapping clouds).
    """
    src = np.asarray(source, dtype=float)
    dst = np.asarray(target, dtype=float)
    _check_spread(src, "source cloud")
    _check_spread(dst, "target cloud")
    tree = cKDTree(dst)
    T = init or Pose()
    prev = math.inf
    rms = math.inf
    it = 0
    converged = False
    for it in range(1, max_iters + 1):
        moved = T.apply(src)
        dist, nn = tree.query(moved)
        keep = np.arange(len(src))
        if trim < 1.0:
            k = max(3, int(round(trim * len(src))))
            keep = np.argsort(dist, kind="stable")[:k]
        step = fit_rigid(moved[keep], dst[nn[keep]])
        T = step @ T
        dist_after = np.linalg.norm(step.apply(moved[keep]) - dst[nn[keep]], axis=1)
        rms = float(np.sqrt(np.mean(dist_after**2)))
        if abs(prev - rms) < tol:
            converged = True
            break
        prev = rms
    return IcpResult(T, rms, it, converged)


def icp_translation(source, target, init=None, max_iters: int = 50, tol: float = 1e-7, trim: float = 1.0) -> IcpResult:
    """ICP restricted to pure translations (the motion model of a prismatic joint)."""
    src = np.asarray(source, dtype=float)
    dst = np.asarray(target, dtype=float)
    if len(src) < 1 or len(dst) < 1:
        raise DegenerateGeometry("translation ICP needs non-empty clouds")
    tree = cKDTree(dst)
    t = np.zeros(3) if init is None else np.asarray(init, dtype=float).copy()
    prev = rms = math.inf
    it = 0
    converged = False
    for it in range(1, max_iters + 1):
        moved = src + t
        dist, nn = tree.query(moved)
        keep = np.arange(len(src))
        if trim < 1.0:
            keep = np.argsort(dist, kind="stable")[: max(1, int(round(trim * len(src))))]
        step = np.mean(dst[nn[keep]] - moved[keep], axis=0)
        t = t + step
        rms = float(np.sqrt(np.mean(np.sum((moved[keep] + step - dst[nn[keep]]) ** 2, axis=1))))
        if abs(prev - rms) < tol:
            converged = True
            break
        prev = rms
    return IcpResult(Pose.from_translation(t), rms, it, converged)


@dataclass(frozen=True)
class ScrewDecomposition:
    theta: float
    axis_dir: np.ndarray | None
    axis_point: np.ndarray
    pitch_translation: float
    translation: np.ndarray

    @property
    def degenerate(self) -> bool:
        return self.axis_dir is None


def screw_decompose(T: Pose, eps: float = 1e-12) -> ScrewDecomposition:
    """Angle, axis line and along-axis translation of a rigid transform."""
    R, t = T.rotation, T.translation
    cos_t = float(np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0))
    theta = math.acos(cos_t)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    tn = float(np.linalg.norm(t))
    if theta < eps:
        if tn < eps:
            return ScrewDecomposition(0.0, None, np.zeros(3), 0.0, t.copy())
        a = t / tn
        return ScrewDecomposition(0.0, a, np.zeros(3), tn, t.copy())
    if theta < 0.75 * math.pi:
        a = w / np.linalg.norm(w)
    else:
        # near pi the skew part vanishes: read the axis off the symmetric part
        B = 0.5 * (R + R.T) - cos_t * np.eye(3)
        k = int(np.argmax(np.diag(B)))
        a = B[:, k] / np.linalg.norm(B[:, k])
        if a @ w < 0:
            a = -a
    pitch = float(t @ a)
    t_perp = t - pitch * a
    p = 0.5 * (t_perp + np.cross(a, t_perp) / math.tan(theta / 2.0))
    return ScrewDecomposition(theta, a, p, pitch, t.copy())


def screw_to_pose(theta: float, axis_dir, axis_point, pitch: float = 0.0) -> Pose:
    a = np.asarray(axis_dir, dtype=float)
    a = a / np.linalg.norm(a)
    p = np.asarray(axis_point, dtype=float)
    R = axis_angle_matrix(a, theta)
    return Pose(R, p - R @ p + pitch * a)


def classify_joint(screw: ScrewDecomposition, threshold: float = K_THRESHOLD) -> str:
    """``revolute`` iff theta strictly exceeds ``threshold``."""
    if screw.theta < 1e-6 and np.linalg.norm(screw.translation) < MIN_TRANSLATION:
        raise ZeroMotion("transform is (numerically) the identity")
    return "revolute" if screw.theta > threshold else "prismatic"


def fit_line(points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Principal direction, centroid and singular values of a point scatter."""
    p = np.asarray(points, dtype=float)
    c = p.mean(axis=0)
    _, s, Vt = np.linalg.svd(p - c, full_matrices=False)
    return Vt[0], c, s


def find_overlap_points(points, T: Pose, delta: float = OVERLAP_DELTA) -> np.ndarray:
    """Points that ``T`` displaces by less than ``delta`` (those near the axis)."""
    p = np.asarray(points, dtype=float)
    return p[np.linalg.norm(T.apply(p) - p, axis=1) < delta]


@dataclass(frozen=True)
class AxisFit:
    axis_dir: np.ndarray
    axis_point: np.ndarray
    n_overlap: int
    fallback: bool


def estimate_revolute_axis_alg1(points_after, points_before, T: Pose, delta: float = OVERLAP_DELTA) -> AxisFit:
    """Revolute axis from the part's near-stationary points.

    Falls back to the screw axis when fewer than 3 overlap points exist or
    their scatter is not elongated enough to define a line.
    """
    overlap = find_overlap_points(points_before, T, delta)
    if len(overlap) >= 3:
        d, c, s = fit_line(overlap)
        second = s[1] if len(s) > 1 else 0.0
        if s[0] > LINE_ELONGATION * second:
            return AxisFit(d, c, len(overlap), False)
    screw = screw_decompose(T)
    if screw.degenerate:
        raise ZeroMotion("no rotation to take an axis from")
    return AxisFit(screw.axis_dir, screw.axis_point, len(overlap), True)


def estimate_prismatic(T: Pose, centre=None) -> np.ndarray:
    """Unit translation direction of ``T``.

    With ``centre`` given the translation is taken at that point, i.e.
    ``T(centre) - centre``, which keeps a small residual rotation from
    tilting the axis through its lever arm about the origin.
    """
    t = T.translation if centre is None else T.apply(np.asarray(centre, dtype=float)) - centre
    n = np.linalg.norm(t)
    if n < MIN_TRANSLATION:
        raise ZeroMotion(f"translation {n:.2e} too small for a prismatic axis")
    return t / n


@dataclass(frozen=True)
class JointEstimate:
    kind: str
    axis_dir: np.ndarray
    axis_point: np.ndarray
    motion_magnitude: float
    step: int
    fallback: bool = False

    def flipped(self) -> "JointEstimate":
        return JointEstimate(self.kind, -self.axis_dir, self.axis_point, self.motion_magnitude, self.step, self.fallback)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "axis_dir": [float(x) for x in self.axis_dir],
            "axis_point": [float(x) for x in self.axis_point],
            "magnitude": float(self.motion_magnitude),
            "step": int(self.step),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "JointEstimate":
        return cls(d["kind"], np.asarray(d["axis_dir"], dtype=float), np.asarray(d["axis_point"], dtype=float), float(d["magnitude"]), int(d["step"]))


def estimate_joint(points_before, T: Pose, step: int, threshold: float = K_THRESHOLD) -> JointEstimate:
    """Classify the motion ``T`` of a part and estimate its joint parameters."""
    pts = np.asarray(points_before, dtype=float)
    screw = screw_decompose(T)
    kind = classify_joint(screw, threshold)
    if kind == "revolute":
        fit = estimate_revolute_axis_alg1(T.apply(pts), pts, T)
        axis = fit.axis_dir
        # keep the right-handed sense of the observed rotation
        if screw.axis_dir is not None and axis @ screw.axis_dir < 0:
            axis = -axis
        return JointEstimate("revolute", axis, fit.axis_point, screw.theta, step, fit.fallback)
    centre = pts.mean(axis=0) if len(pts) else np.zeros(3)
    axis = estimate_prismatic(T, centre)
    return JointEstimate("prismatic", axis, centre, float(np.linalg.norm(T.apply(centre) - centre)), step)


JointDictionary = dict  # part label -> JointEstimate


def consolidate(joints: dict, label: int, estimate: JointEstimate) -> dict:
    """Insert or update the joint for ``label``; the larger motion wins."""
    if label < 2:
        raise ValueError("joint labels start at 2 (label 1 is the base)")
    out = dict(joints)
    stored = out.get(label)
    if stored is None:
        out[label] = estimate
        return out
    if estimate.axis_dir @ stored.axis_dir < 0:
        estimate = estimate.flipped()
    if estimate.motion_magnitude > stored.motion_magnitude:
        out[label] = estimate
    return out


def joints_to_json(joints: dict) -> dict:
    return {str(k): v.to_dict() for k, v in sorted(joints.items())}


def joints_from_json(d: dict) -> dict:
    return {int(k): JointEstimate.from_dict(v) for k, v in d.items()}


def signed_motion(T: Pose, estimate: JointEstimate) -> float:
    """Joint displacement produced by ``T`` measured along ``estimate``'s axis."""
    if estimate.kind == "prismatic":
        c = np.asarray(estimate.axis_point, dtype=float)
        return float((T.apply(c) - c) @ estimate.axis_dir)
    screw = screw_decompose(T)
    if screw.degenerate:
        return 0.0
    return float(screw.theta * np.sign(screw.axis_dir @ estimate.axis_dir))

