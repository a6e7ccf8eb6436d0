"""Evaluation metrics: part IoU with optimal matching and joint errors."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import BothEmpty, NoJoints, NotRevolute, ZeroVector


def voxel_iou(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.count_nonzero(a | b)
    if union == 0:
        raise BothEmpty("IoU of two empty voxel sets is undefined")
    return np.count_nonzero(a & b) / union


def _assign(C: np.ndarray) -> list[tuple[int, int]]:
    """Optimal assignment for an m x n matrix with m <= n (potentials method)."""
    m, n = C.shape
    INF = math.inf
    u = np.zeros(m + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=int)  # p[j]: row (1-based) matched to column j
    way = np.zeros(n + 1, dtype=int)
    for i in range(1, m + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, INF)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta, j1 = INF, 0
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = C[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta, j1 = minv[j], j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    return [(int(p[j]) - 1, j - 1) for j in range(1, n + 1) if p[j]]


def _min_cost(C: np.ndarray, rows, cols) -> float:
    if not rows or not cols:
        return 0.0
    sub = C[np.ix_(rows, cols)]
    if sub.shape[0] > sub.shape[1]:
        sub = sub.T
    return float(sum(sub[r, c] for r, c in _assign(sub)))


def hungarian_match(cost) -> tuple[list[tuple[int, int]], float]:
    """Minimum-cost one-to-one assignment of ``min(m, n)`` pairs.

    Among optimal assignments the one whose sorted pair list is
    lexicographically smallest is returned: rows are fixed in order, each to
    the lowest column that still admits an optimal completion.
    """
    C = np.asarray(cost, dtype=float)
    if C.ndim != 2:
        raise ValueError("cost matrix must be 2-D")
    if not np.all(np.isfinite(C)):
        raise ValueError("cost matrix must be finite")
    m, n = C.shape
    if m == 0 or n == 0:
        return [], 0.0
    k = min(m, n)
    best = _min_cost(C, list(range(m)), list(range(n)))
    tol = 1e-9 * (1.0 + abs(best) + float(np.abs(C).max()))
    rows, cols = list(range(m)), list(range(n))
    pairs, fixed = [], 0.0
    for i in range(m):
        rows.remove(i)
        need = k - len(pairs)
        chosen = None
        for j in cols:
            rest = [c for c in cols if c != j]
            if min(len(rows), len(rest)) != need - 1:
                continue
            if fixed + C[i, j] + _min_cost(C, rows, rest) <= best + tol:
                chosen = j
                break
        if chosen is not None:
            pairs.append((i, chosen))
            fixed += C[i, chosen]
            cols.remove(chosen)
        if len(pairs) == k:
            break
    return pairs, float(sum(C[r, c] for r, c in pairs))


@dataclass
class SegmentationScore:
    per_part: list[dict]
    mean_iou: float
    matching: dict[int, int]  # predicted label -> ground-truth label


def part_segmentation_score(pred_labels: np.ndarray, gt_labels: np.ndarray) -> SegmentationScore:
    """Mean part IoU after optimally pairing predicted and GT labels.

    Inputs are hard label maps (0 = empty). Unmatched labels on either side
    contribute IoU 0 to the mean.
    """
    pred_labels = np.asarray(pred_labels)
    gt_labels = np.asarray(gt_labels)
    if pred_labels.shape != gt_labels.shape:
        raise ValueError("label maps must share a grid")
    P = [int(x) for x in np.unique(pred_labels) if x > 0]
    G = [int(x) for x in np.unique(gt_labels) if x > 0]
    if not P and not G:
        raise BothEmpty("both label maps are empty")
    iou = np.zeros((len(P), len(G)))
    for a, lp in enumerate(P):
        mp = pred_labels == lp
        for b, lg in enumerate(G):
            iou[a, b] = voxel_iou(mp, gt_labels == lg)
    pairs, _ = hungarian_match(1.0 - iou) if P and G else ([], 0.0)
    per_part = []
    matching = {}
    matched_p, matched_g = set(), set()
    for a, b in pairs:
        per_part.append({"pred": P[a], "gt": G[b], "iou": float(iou[a, b])})
        matching[P[a]] = G[b]
        matched_p.add(a)
        matched_g.add(b)
    for b, lg in enumerate(G):
        if b not in matched_g:
            per_part.append({"pred": None, "gt": lg, "iou": 0.0})
    for a, lp in enumerate(P):
        if a not in matched_p:
            per_part.append({"pred": lp, "gt": None, "iou": 0.0})
    mean = float(np.mean([r["iou"] for r in per_part]))
    return SegmentationScore(per_part, mean, matching)


def joint_angle_error(pred_axis, gt_axis) -> float:
    """Sign-invariant angle between two axes, in degrees within [0, 90]."""
    a = np.asarray(pred_axis, dtype=float)
    b = np.asarray(gt_axis, dtype=float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        raise ZeroVector("axis direction has zero length")
    c = abs(float(a @ b)) / (na * nb)
    return math.degrees(math.acos(min(1.0, c)))


def point_to_line_distance(point, line_point, line_dir) -> float:
    d = np.asarray(line_dir, dtype=float)
    d = d / np.linalg.norm(d)
    r = np.asarray(point, dtype=float) - np.asarray(line_point, dtype=float)
    return float(np.linalg.norm(r - (r @ d) * d))


def line_distance(p1, d1, p2, d2) -> float:
    """Minimum distance between two infinite lines."""
    d1 = np.asarray(d1, dtype=float) / np.linalg.norm(d1)
    d2 = np.asarray(d2, dtype=float) / np.linalg.norm(d2)
    r = np.asarray(p2, dtype=float) - np.asarray(p1, dtype=float)
    n = np.cross(d1, d2)
    nn = np.linalg.norm(n)
    if nn < 1e-9:
        return point_to_line_distance(p2, p1, d1)
    return float(abs(r @ n) / nn)


def joint_position_error(pred_kind: str, pred_point, pred_axis, gt_kind: str, gt_point, gt_axis) -> float:
    if pred_kind != "revolute" or gt_kind != "revolute":
        raise NotRevolute("position error is defined for revolute joints only")
    return line_distance(pred_point, pred_axis, gt_point, gt_axis)


def joint_type_accuracy(pairs) -> float:
    """Fraction of (predicted kind or None, GT kind) pairs that agree."""
    pairs = list(pairs)
    if not pairs:
        raise NoJoints("no ground-truth joints to score")
    return sum(1 for p, g in pairs if p is not None and p == g) / len(pairs)


@dataclass
class MetricsReport:
    part_iou: list[dict] = field(default_factory=list)
    mean_iou: float = 0.0
    joint_type_accuracy: float | None = None
    joints: list[dict] = field(default_factory=list)
    optimal_action_ratio: float | None = None
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(pred_labels, gt_labels, pred_joints: dict, gt_joints: dict) -> MetricsReport:
    """Score a reconstruction.

    ``pred_joints`` maps predicted label -> JointEstimate-like dicts;
    ``gt_joints`` maps GT label -> {kind, axis_dir, axis_point, name}. Only GT
    parts that carry a joint (labels >= 2) enter the joint metrics.
    """
    seg = part_segmentation_score(pred_labels, gt_labels)
    gt_to_pred = {g: p for p, g in seg.matching.items()}
    rows, type_pairs = [], []
    for g, gj in sorted(gt_joints.items()):
        p = gt_to_pred.get(g)
        pj = pred_joints.get(p) if p is not None else None
        row = {"gt_label": g, "pred_label": p, "gt_kind": gj["kind"], "name": gj.get("name")}
        if pj is None:
            row.update(pred_kind=None, angle_error_deg=None, position_error=None, point_to_line_error=None)
        else:
            row["pred_kind"] = pj["kind"]
            row["angle_error_deg"] = joint_angle_error(pj["axis_dir"], gj["axis_dir"])
            if pj["kind"] == "revolute" and gj["kind"] == "revolute":
                row["position_error"] = joint_position_error("revolute", pj["axis_point"], pj["axis_dir"], "revolute", gj["axis_point"], gj["axis_dir"])
                row["point_to_line_error"] = point_to_line_distance(pj["axis_point"], gj["axis_point"], gj["axis_dir"])
            else:
                row["position_error"] = None
                row["point_to_line_error"] = None
        rows.append(row)
        type_pairs.append((row["pred_kind"], gj["kind"]))
    acc = joint_type_accuracy(type_pairs) if type_pairs else None
    return MetricsReport(part_iou=seg.per_part, mean_iou=seg.mean_iou, joint_type_accuracy=acc, joints=rows)
