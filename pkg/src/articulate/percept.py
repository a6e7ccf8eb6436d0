"""Persistent part-volume aggregation.

The part volume holds, per voxel, a probability vector over at most six part
labels (label 1 is the static base). Each interaction step detects the moved
region, decides whether it is a new or a re-identified part, transports that
part's voxels with the fitted rigid motion and keeps everything else: voxels
that fall out of view are never carved away.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.sparse.csgraph import dijkstra
from scipy.spatial import cKDTree

from .errors import DegenerateGeometry, EmptyGrid, MisalignedInputs, NoMotionDetected, PartBudgetExceeded
from .geometry import Pose
from .jointest import K_THRESHOLD, fit_rigid, icp_rigid, icp_translation, screw_decompose
from .sensor import GRID_HI, GRID_LO, GRID_RES, PointCloud, VoxelGrid, voxel_centers, voxel_index

N_LABELS = 6
FLOW_EPS = 1e-3
REID_OVERLAP = 0.5
SMOOTH_SIGMA = 0.75
# fraction of observed points moving together that marks a whole-object slide
GLOBAL_MOTION_FRACTION = 0.9


@dataclass(eq=False)
class PartVolume:
    """Channel ``c`` holds the probability of label ``c + 1``."""

    data: np.ndarray
    lo: float = GRID_LO
    hi: float = GRID_HI

    @classmethod
    def zeros(cls, res: int = GRID_RES, lo: float = GRID_LO, hi: float = GRID_HI) -> "PartVolume":
        return cls(np.zeros((N_LABELS, res, res, res), dtype=np.float32), lo, hi)

    @property
    def resolution(self) -> int:
        return self.data.shape[1]

    @property
    def voxel_size(self) -> float:
        return (self.hi - self.lo) / self.resolution

    def copy(self) -> "PartVolume":
        return PartVolume(self.data.copy(), self.lo, self.hi)

    def total(self) -> np.ndarray:
        return self.data.sum(axis=0)

    def occupied(self) -> np.ndarray:
        return self.total() >= 0.5

    def channel(self, label: int) -> np.ndarray:
        return self.data[label - 1]

    def mass(self, label: int) -> float:
        return float(self.data[label - 1].sum(dtype=np.float64))

    def allocated(self) -> list[int]:
        return [c + 1 for c in range(N_LABELS) if self.data[c].max() > 0]

    def label_map(self) -> np.ndarray:
        """Argmax label per voxel, 0 where the voxel is unoccupied."""
        lab = np.argmax(self.data, axis=0).astype(np.int8) + 1
        lab[~self.occupied()] = 0
        return lab

    def hardened(self) -> np.ndarray:
        """Argmax label where that label's probability is at least 0.5, else 0."""
        best = np.argmax(self.data, axis=0)
        p = np.take_along_axis(self.data, best[None], axis=0)[0]
        lab = (best + 1).astype(np.int8)
        lab[p < 0.5] = 0
        return lab

    # -- serialisation: JSON header line + little-endian float32 payload --
    def save(self, path) -> None:
        header = {
            "format": "part-volume",
            "dtype": "<f4",
            "order": "C",
            "channels": int(self.data.shape[0]),
            "dims": [int(x) for x in self.data.shape[1:]],
            "domain": [[self.lo] * 3, [self.hi] * 3],
        }
        with open(path, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
            fh.write(np.ascontiguousarray(self.data, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "PartVolume":
        raw = Path(path).read_bytes()
        nl = raw.index(b"\n")
        header = json.loads(raw[:nl])
        shape = (header["channels"], *header["dims"])
        data = np.frombuffer(raw[nl + 1 :], dtype="<f4").reshape(shape).astype(np.float32)
        return cls(data, header["domain"][0][0], header["domain"][1][0])


@dataclass(eq=False)
class MovedRegion:
    mask: np.ndarray
    transform: Pose
    source: str
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    mask_after: np.ndarray | None = None
    global_motion: bool = False


def init_part_volume(grid: VoxelGrid) -> PartVolume:
    occ = grid.occupancy
    if not occ.any():
        raise EmptyGrid("initial observation has no occupied voxel")
    H = PartVolume.zeros(grid.resolution, grid.lo, grid.hi)
    H.data[0][occ] = 1.0
    return H


def _mask_from_points(points, res, lo, hi) -> np.ndarray:
    mask = np.zeros((res, res, res), dtype=bool)
    if len(points):
        ijk, inside = voxel_index(points, res, lo, hi)
        ijk = ijk[inside]
        mask[ijk[:, 0], ijk[:, 1], ijk[:, 2]] = True
    return mask


def detect_moved_region(
    cloud_before: PointCloud,
    flow=None,
    *,
    mode: str = "oracle-flow",
    cloud_after: PointCloud | None = None,
    flow_after=None,
    grids: tuple[VoxelGrid, VoxelGrid] | None = None,
    images=None,
    res: int = GRID_RES,
    lo: float = GRID_LO,
    hi: float = GRID_HI,
    eps: float = FLOW_EPS,
) -> MovedRegion:
    """Find what moved between two observations and fit its rigid motion.

    ``oracle-flow`` uses simulated scene flow of the pre-action cloud (and,
    if given, backward flow of the post-action cloud). ``estimated`` works
    from the two observations alone (``cloud_after`` and ``grids``).
    """
    if mode == "oracle-flow":
        if flow is None:
            raise ValueError("oracle-flow mode needs scene flow")
        return _region_from_flow(cloud_before, flow, cloud_after, flow_after, res, lo, hi, eps)
    if mode == "estimated":
        if cloud_after is None or grids is None:
            raise ValueError("estimated mode needs the post-action cloud and both grids")
        return _region_from_observations(cloud_before, cloud_after, grids, eps, images=images)
    raise ValueError(f"unknown perception mode {mode!r}")


def _region_from_flow(cloud_before, flow, cloud_after, flow_after, res, lo, hi, eps) -> MovedRegion:
    flow = np.asarray(flow, dtype=float)
    if flow.shape != cloud_before.positions.shape:
        raise MisalignedInputs(f"flow shape {flow.shape} vs cloud {cloud_before.positions.shape}")
    moving = np.linalg.norm(flow, axis=1) > eps
    if not moving.any():
        raise NoMotionDetected("no point moves by more than the flow threshold")
    src = cloud_before.positions[moving]
    try:
        T = fit_rigid(src, src + flow[moving])
    except DegenerateGeometry as exc:
        raise NoMotionDetected(f"moving points do not determine a rigid motion: {exc}") from exc
    mask = _mask_from_points(src, res, lo, hi)
    if not mask.any():
        raise NoMotionDetected("moving points fall outside the grid")
    mask_after = None
    if cloud_after is not None and flow_after is not None:
        fa = np.asarray(flow_after, dtype=float)
        if fa.shape != cloud_after.positions.shape:
            raise MisalignedInputs("backward flow does not match the post-action cloud")
        mask_after = _mask_from_points(cloud_after.positions[np.linalg.norm(fa, axis=1) > eps], res, lo, hi)
    return MovedRegion(
        mask=mask,
        transform=T,
        source="oracle-flow",
        points=src,
        mask_after=mask_after,
        global_motion=moving.mean() >= GLOBAL_MOTION_FRACTION,
    )


def _prune_small(mask: np.ndarray, min_size: int) -> np.ndarray:
    lab, n = ndimage.label(mask, structure=np.ones((3, 3, 3)))
    if n == 0:
        return mask
    sizes = np.bincount(lab.ravel())
    keep = sizes >= min_size
    keep[0] = False
    return keep[lab]


def _points_in(mask: np.ndarray, cloud: PointCloud, grid: VoxelGrid) -> np.ndarray:
    ijk, inside = voxel_index(cloud.positions, grid.resolution, grid.lo, grid.hi)
    sel = np.zeros(len(cloud), dtype=bool)
    sel[inside] = mask[ijk[inside, 0], ijk[inside, 1], ijk[inside, 2]]
    return sel


GROW_NORMAL_COS = 0.8
ICP_POINTS = 3000


def _thin(points: np.ndarray, k: int) -> np.ndarray:
    """Deterministic stride subsample to at most ``k`` points."""
    if len(points) <= k:
        return points
    return points[np.linspace(0, len(points) - 1, k).astype(int)]


def grow_moving(points, moving, static, radius: float, normals=None) -> np.ndarray:
    """Resolve ambiguous points by their geodesically nearest seed.

    ``moving`` and ``static`` are seed masks; every other point takes the
    side of the closest seed along a radius graph over ``points``. With
    ``normals`` given, edges only join points on similarly oriented surface,
    so growth does not cross creases such as a lid resting on its base.
    Points not connected to any seed stay static.
    """
    seeds = np.nonzero(moving | static)[0]
    out = moving.copy()
    if not moving.any() or len(seeds) == len(points):
        return out
    tree = cKDTree(points)
    graph = tree.sparse_distance_matrix(tree, radius, output_type="coo_matrix")
    if normals is not None:
        n = np.asarray(normals, dtype=float)
        keep = np.abs(np.sum(n[graph.row] * n[graph.col], axis=1)) > GROW_NORMAL_COS
        graph.data = np.where(keep, graph.data, 0.0)
        graph.eliminate_zeros()
    graph = graph.tocsr()
    dist, _, source = dijkstra(graph, directed=False, indices=seeds, min_only=True, return_predecessors=True)
    reached = np.isfinite(dist) & (source >= 0)
    out[reached] = moving[source[reached]]
    return out


def seen_through(points, images, margin: float) -> np.ndarray:
    """Points whose location some depth image observes as empty space.

    A camera sees through a point when the point projects inside its image
    and the measured range there exceeds the point's range by ``margin`` (or
    the pixel has no return at all).
    """
    points = np.asarray(points, dtype=float)
    out = np.zeros(len(points), dtype=bool)
    for im in images or ():
        cam = im.camera
        uv, z = cam.project(points)
        w, h = cam.resolution
        ok = (z > 0) & np.all(np.isfinite(uv), axis=1)
        col = np.floor(np.where(ok, uv[:, 0], -1)).astype(int)
        row = np.floor(np.where(ok, uv[:, 1], -1)).astype(int)
        ok &= (col >= 0) & (col < w) & (row >= 0) & (row < h)
        idx = np.nonzero(ok)[0]
        r, c = row[idx], col[idx]
        dist = np.linalg.norm(points[idx] - cam.pose.translation, axis=1)
        free = ~im.valid[r, c] | (im.range[r, c] > dist + margin)
        out[idx[free]] = True
    return out


def _classify(pb, pa, tree_a, tree_b, T: Pose, tau: float, images=None):
    """Seed masks (moving, static) for the clouds before and after ``T``.

    A point is a moving seed when ``T`` explains it and staying put does not.
    A point that merely became hidden (or newly visible) passes that test
    too, so seeds must also land on seeds of the same kind in the other
    cloud.
    """
    d_static, nn_sa = tree_a.query(pb)
    d_moved, nn_a = tree_a.query(T.apply(pb))
    db_static, nn_sb = tree_b.query(pa)
    db_back, nn_b = tree_b.query(T.inverse().apply(pa))
    mb = (d_moved < tau) & (d_static > tau)
    ma = (db_back < tau) & (db_static > tau)
    sb = (d_static <= tau) & (d_moved >= tau)
    sa = (db_static <= tau) & (db_back >= tau)
    # the same test for static seeds: their counterpart must be static too
    moved, static = mb & ma[nn_a], sb & sa[nn_sa]
    after_moved, after_static = ma & mb[nn_b], sa & sb[nn_sb]
    if images is not None:
        # a vanished point whose spot is now seen empty has left it; an
        # appeared point whose spot was seen empty before has arrived
        before_imgs, after_imgs = images
        gone = (d_static > tau) & ~moved
        moved[gone] |= seen_through(pb[gone], after_imgs, tau)
        new = (db_static > tau) & ~after_moved
        after_moved[new] |= seen_through(pa[new], before_imgs, tau)
    return moved, static, after_moved, after_static


def _region_from_observations(cb: PointCloud, ca: PointCloud, grids, eps, min_voxels: int = 8, refine_iters: int = 3, images=None) -> MovedRegion:
    Vb, Va = grids
    occ_b, occ_a = Vb.occupancy, Va.occupancy
    struct = np.ones((3, 3, 3), dtype=bool)
    removed = _prune_small(occ_b & ~ndimage.binary_dilation(occ_a, struct), min_voxels)
    added = _prune_small(occ_a & ~ndimage.binary_dilation(occ_b, struct), min_voxels)
    if not removed.any() and not added.any():
        raise NoMotionDetected("observations agree up to one voxel")

    pb, pa = cb.positions, ca.positions
    tree_a, tree_b = cKDTree(pa), cKDTree(pb)
    tau = 1.5 * Vb.voxel_size
    src = pb[_points_in(removed, cb, Vb)]
    dst = pa[_points_in(added, ca, Va)]
    if len(src) < 3 and len(dst) < 3:
        raise NoMotionDetected("changed regions too small to register")

    def explained(T: Pose) -> float:
        s = 0.0
        if len(src):
            s += np.mean(tree_a.query(T.apply(src))[0] < tau)
        if len(dst):
            s += np.mean(tree_b.query(T.inverse().apply(dst))[0] < tau)
        return s

    # seed hypotheses: register each changed region against the other changed
    # region and against the full other cloud
    hypotheses = []
    for a, other, full, invert in ((src, dst, pa, False), (dst, src, pb, True)):
        if len(a) < 3:
            continue
        a = _thin(a, ICP_POINTS)
        trials = [(full, Pose())]
        if len(other) >= 3:
            trials += [(other, Pose()), (other, Pose.from_translation(other.mean(axis=0) - a.mean(axis=0)))]
        for target, init in trials:
            try:
                fit = icp_rigid(a, target, init=init, trim=0.7).pose
            except DegenerateGeometry:
                continue
            hypotheses.append(fit.inverse() if invert else fit)
    if not hypotheses:
        raise NoMotionDetected("could not register the changed regions")
    T = max(hypotheses, key=explained)

    for _ in range(refine_iters):
        moved = _classify(pb, pa, tree_a, tree_b, T, tau, images)[0]
        if moved.sum() < 3:
            break
        try:
            T = icp_rigid(_thin(pb[moved], ICP_POINTS), pa, init=T, trim=0.8).pose
        except DegenerateGeometry:
            break
    moved, static, after_moved, after_static = _classify(pb, pa, tree_a, tree_b, T, tau, images)
    if moved.sum() < 3:
        raise NoMotionDetected("no consistent moving part")
    disp = np.linalg.norm(T.apply(pb[moved]) - pb[moved], axis=1)
    if np.median(disp) <= eps:
        raise NoMotionDetected("fitted motion below threshold")
    # points explained equally well by both hypotheses (a surface sliding
    # along itself) follow the nearest unambiguous neighbour
    moved = grow_moving(pb, moved, static, tau, cb.normals)
    if screw_decompose(T).theta <= K_THRESHOLD:
        # a sliding motion: drop the rotational freedom ICP cannot pin down
        # on partially seen planar parts
        c = pb[moved].mean(axis=0)
        T = icp_translation(pb[moved], pa, init=T.apply(c) - c, trim=0.8).pose
        _, _, after_moved, after_static = _classify(pb, pa, tree_a, tree_b, T, tau, images)
    src_pts = pb[moved]
    after_moved = grow_moving(pa, after_moved, after_static, tau, ca.normals)
    return MovedRegion(
        mask=_mask_from_points(src_pts, Vb.resolution, Vb.lo, Vb.hi),
        transform=T,
        source="estimated",
        points=src_pts,
        mask_after=_mask_from_points(pa[after_moved], Va.resolution, Va.lo, Va.hi),
        global_motion=moved.mean() >= GLOBAL_MOTION_FRACTION,
    )


def assign_label(region: MovedRegion, H_prev: PartVolume) -> int:
    """Re-identify an existing part by voxel overlap, else allocate a new label."""
    n = int(region.mask.sum())
    if n == 0:
        raise NoMotionDetected("empty moved region")
    labels = H_prev.label_map()
    best, best_overlap = None, 0.0
    for lab in H_prev.allocated():
        if lab < 2:
            continue
        # relative to the smaller set: a part first seen as a sliver is still
        # itself once more of it comes into view
        size = min(n, np.count_nonzero(labels == lab))
        overlap = np.count_nonzero(labels[region.mask] == lab) / max(size, 1)
        if overlap > best_overlap:
            best, best_overlap = lab, overlap
    if best is not None and best_overlap >= REID_OVERLAP:
        return best
    used = set(H_prev.allocated())
    for lab in range(2, N_LABELS + 1):
        if lab not in used:
            return lab
    raise PartBudgetExceeded(f"all {N_LABELS} part labels are in use")


def _splat_targets(T: Pose, ijk: np.ndarray, H: PartVolume):
    centres = voxel_centers(ijk, H.resolution, H.lo, H.hi)
    dest, inside = voxel_index(T.apply(centres), H.resolution, H.lo, H.hi)
    return dest, inside


def transport(H: PartVolume, src_mask: np.ndarray, T: Pose, label: int | None) -> PartVolume:
    """Move the voxels in ``src_mask`` by ``T`` (nearest-voxel splat, max-merge).

    With ``label`` given, the moved voxels' whole mass is assigned to that
    label; otherwise each channel travels as-is.
    """
    out = H.copy()
    ijk = np.argwhere(src_mask)
    if not len(ijk):
        return out
    vals = H.data[:, src_mask]  # (C, n)
    out.data[:, src_mask] = 0.0
    dest, inside = _splat_targets(T, ijk, H)
    dest, vals = dest[inside], vals[:, inside]
    if label is not None:
        moved = np.zeros_like(vals)
        moved[label - 1] = vals.sum(axis=0)
        vals = moved
    flat = np.ravel_multi_index(dest.T, src_mask.shape)
    data = out.data.reshape(N_LABELS, -1)
    for c in range(N_LABELS):
        if vals[c].any():
            np.maximum.at(data[c], flat, vals[c])
    return out


def smooth(H: PartVolume, sigma: float = SMOOTH_SIGMA) -> PartVolume:
    """Per-channel Gaussian smoothing restricted to the occupied footprint.

    Each voxel keeps its total mass (capped at 1); smoothing only mixes the
    label distribution between neighbouring occupied voxels.
    """
    data = H.data.astype(np.float64)
    total = data.sum(axis=0)
    over = total > 1.0
    data[:, over] /= total[over]
    mass = np.minimum(total, 1.0)
    sm = np.zeros_like(data)
    for c in range(N_LABELS):
        if data[c].any():
            sm[c] = ndimage.gaussian_filter(data[c], sigma, mode="constant", truncate=3.0)
    ssum = sm.sum(axis=0)
    keep = (mass > 0) & (ssum > 1e-12)
    out = np.zeros_like(data)
    out[:, keep] = sm[:, keep] * (mass[keep] / ssum[keep])
    return PartVolume(out.astype(np.float32), H.lo, H.hi)


def attach_hidden(H: PartVolume, moving: np.ndarray, visible: np.ndarray) -> np.ndarray:
    """Extend ``moving`` with base voxels currently out of view.

    Remembered voxels that the pre-action observation does not see cannot
    show motion themselves. Each hidden base voxel joins whichever side (the
    moving voxels or the visible static ones) reaches it first through
    occupied voxels; ties stay static.
    """
    occ = H.total() > 0
    labels = H.label_map()
    moving = moving & occ
    static = occ & visible & ~moving
    open_ = occ & ~visible & ~moving & (labels <= 1)
    struct = np.ones((3, 3, 3), dtype=bool)
    while True:
        gm = ndimage.binary_dilation(moving, struct) & open_
        gs = ndimage.binary_dilation(static, struct) & open_
        if not gm.any() and not gs.any():
            break
        moving = moving | (gm & ~gs)
        static = static | gs
        open_ &= ~(gm | gs)
    return moving


def update_part_volume(
    H_prev: PartVolume,
    region: MovedRegion,
    label: int | None,
    V_after: VoxelGrid,
    sigma: float = SMOOTH_SIGMA,
    V_before: VoxelGrid | None = None,
) -> PartVolume:
    """Transport the moved part, keep everything else, add new observations.

    With the pre-action grid ``V_before`` given, remembered base voxels that
    were out of view are attached to the moving part when they connect to it
    (see :func:`attach_hidden`).
    """
    occ = H_prev.total() > 0
    if region.global_motion:
        H = transport(H_prev, occ, region.transform, None)
    else:
        if label is None or not 2 <= label <= N_LABELS:
            raise ValueError(f"invalid part label {label}")
        src = occ & (region.mask | (H_prev.label_map() == label))
        if V_before is not None:
            src = attach_hidden(H_prev, src, V_before.occupancy)
        H = transport(H_prev, src, region.transform, label)

    # newly observed, unclaimed voxels
    new = V_after.occupancy & (H.total() < 0.5)
    if new.any():
        H.data[:, new] = 0.0
        to_part = new & region.mask_after if (region.mask_after is not None and label is not None and not region.global_motion) else np.zeros_like(new)
        H.data[0][new & ~to_part] = 1.0
        if to_part.any():
            H.data[label - 1][to_part] = 1.0
    return smooth(H, sigma) if sigma > 0 else H


@dataclass(eq=False)
class Observation:
    """A raw (pre-sampling) observation with simulator link annotations."""

    state: object
    cloud: PointCloud


def gt_part_volume(final_state, observations, moved_links, res: int = GRID_RES, lo: float = GRID_LO, hi: float = GRID_HI) -> PartVolume:
    """Ground-truth part labels of every ever-observed voxel at the final state.

    ``moved_links`` lists links in discovery order; each gets labels 2, 3, ...
    and its descendants share its label. Everything else is label 1.
    """
    model = final_state.model
    names = list(model.links)
    label_of = {}
    for ln in names:
        lab = 1
        for j in [None] + model.chain_to_root(ln):
            owner = ln if j is None else j.child
            if owner in moved_links:
                lab = 2 + list(moved_links).index(owner)
                break
        label_of[ln] = lab
    if max(label_of.values()) > N_LABELS:
        raise PartBudgetExceeded(f"{len(moved_links)} moved parts exceed the {N_LABELS}-label budget")

    votes = np.zeros((N_LABELS, res**3), dtype=np.int64)
    final = final_state.link_poses()
    for obs in observations:
        poses = obs.state.link_poses()
        pts, ids = obs.cloud.positions, obs.cloud.link_ids
        for li, ln in enumerate(names):
            m = ids == li
            if not m.any():
                continue
            moved = (final[ln] @ poses[ln].inverse()).apply(pts[m])
            ijk, inside = voxel_index(moved, res, lo, hi)
            flat = np.ravel_multi_index(ijk[inside].T, (res, res, res))
            votes[label_of[ln] - 1] += np.bincount(flat, minlength=res**3)
    seen = votes.sum(axis=0) > 0
    winner = np.argmax(votes, axis=0)
    data = np.zeros((N_LABELS, res**3), dtype=np.float32)
    data[winner[seen], np.nonzero(seen)[0]] = 1.0
    return PartVolume(data.reshape(N_LABELS, res, res, res), lo, hi)
