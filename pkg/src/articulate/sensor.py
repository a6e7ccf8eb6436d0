"""Depth rendering, point-cloud fusion, farthest point sampling, voxelisation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from .errors import AllPointsOutOfBounds, EmptyObservation, IoFailure
from .geometry import Pose, look_at

GRID_RES = 96
GRID_LO = -1.2
GRID_HI = 1.2
N_POINTS = 2048


@dataclass(frozen=True, eq=False)
class Camera:
    pose: Pose
    vfov: float = 60.0
    resolution: tuple[int, int] = (128, 128)
    name: str = ""

    def __post_init__(self):
        if not 0.0 < self.vfov < 180.0:
            raise ValueError("vfov must lie in (0, 180) degrees")
        if min(self.resolution) <= 0:
            raise ValueError("resolution must be positive")

    @property
    def focal(self) -> float:
        return 0.5 * self.resolution[1] / math.tan(math.radians(self.vfov) / 2)

    @property
    def view_dir(self) -> np.ndarray:
        return self.pose.rotation[:, 2].copy()

    def ray_directions(self) -> np.ndarray:
        """Unit world-frame ray per pixel, shape (H*W, 3), row-major."""
        w, h = self.resolution
        f = self.focal
        u, v = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
        d = np.stack([(u - w / 2) / f, (v - h / 2) / f, np.ones_like(u)], axis=-1).reshape(-1, 3)
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return d @ self.pose.rotation.T

    def project(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates (u, v) and camera-frame depth z of world points."""
        pc = self.pose.inverse().apply(points)
        z = pc[:, 2]
        w, h = self.resolution
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = self.focal * pc[:, :2] / z[:, None] + np.array([w / 2, h / 2])
        return uv, z


def default_rig(radius: float = 2.5, elevation: float = 20.0, vfov: float = 60.0, resolution=(128, 128)) -> list[Camera]:
    """One top-down camera plus four side cameras looking at the origin."""
    cams = [Camera(look_at([0.0, 0.0, radius], [0.0, 0.0, 0.0], up=[0.0, 1.0, 0.0]), vfov, tuple(resolution), "top")]
    el = math.radians(elevation)
    for az in (0, 90, 180, 270):
        a = math.radians(az)
        eye = radius * np.array([math.cos(el) * math.cos(a), math.cos(el) * math.sin(a), math.sin(el)])
        cams.append(Camera(look_at(eye, [0.0, 0.0, 0.0]), vfov, tuple(resolution), f"side{az}"))
    return cams


@dataclass(eq=False)
class DepthImage:
    """Per-pixel range along the ray; ``valid`` marks hits."""

    camera: Camera
    range: np.ndarray
    valid: np.ndarray
    link: np.ndarray
    normal: np.ndarray
    color: np.ndarray


def _watertight_hits(org, tri, kx, ky, kz, sx, sy, sz) -> np.ndarray:
    """Watertight ray/triangle test (Woop, Benthin, Wald 2013).

    One triangle against many rays sharing origin ``org``; the per-ray axis
    permutation and shear come precomputed. Returns hit distance (inf on miss).
    """
    A = tri[0] - org
    B = tri[1] - org
    C = tri[2] - org
    Az, Bz, Cz = A[kz], B[kz], C[kz]
    ax = A[kx] - sx * Az
    ay = A[ky] - sy * Az
    bx = B[kx] - sx * Bz
    by = B[ky] - sy * Bz
    cx = C[kx] - sx * Cz
    cy = C[ky] - sy * Cz
    U = cx * by - cy * bx
    V = ax * cy - ay * cx
    W = bx * ay - by * ax
    miss = ((U < 0) | (V < 0) | (W < 0)) & ((U > 0) | (V > 0) | (W > 0))
    det = U + V + W
    miss |= det == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (U * (sz * Az) + V * (sz * Bz) + W * (sz * Cz)) / det
    miss |= ~(t > 1e-9)
    return np.where(miss, np.inf, t)


def render_depth(meshes: dict, camera: Camera, colors: dict | None = None, noise: float = 0.0, rng=None) -> DepthImage:
    """Ray-cast posed link meshes from ``camera``.

    ``meshes`` maps link name -> world-frame TriMesh; link ids in the output
    index ``list(meshes)``. Optional Gaussian range noise with std ``noise``.
    """
    w, h = camera.resolution
    n = w * h
    dirs = camera.ray_directions()
    org = camera.pose.translation
    kz = np.argmax(np.abs(dirs), axis=1)
    kx = (kz + 1) % 3
    ky = (kx + 1) % 3
    rows = np.arange(n)
    dkz = dirs[rows, kz]
    swap = dkz < 0
    kx, ky = np.where(swap, ky, kx), np.where(swap, kx, ky)
    sx = dirs[rows, kx] / dkz
    sy = dirs[rows, ky] / dkz
    sz = 1.0 / dkz

    depth = np.full(n, np.inf)
    link = np.full(n, -1, dtype=np.int64)
    normal = np.zeros((n, 3))
    color = np.zeros((n, 3))
    names = list(meshes)
    for li, name in enumerate(names):
        mesh = meshes[name]
        if mesh.is_empty:
            continue
        tris = mesh.triangle_vertices()
        fn = np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0])
        fnn = np.linalg.norm(fn, axis=1)
        uv, z = camera.project(tris.reshape(-1, 3))
        uv = uv.reshape(-1, 3, 2)
        z = z.reshape(-1, 3)
        c = np.asarray(colors[name]) if colors and name in colors else np.zeros(3)
        for ti in range(len(tris)):
            if fnn[ti] == 0:
                continue
            if np.all(z[ti] > 1e-6):
                u0, v0 = np.floor(uv[ti].min(axis=0)).astype(int) - 1
                u1, v1 = np.ceil(uv[ti].max(axis=0)).astype(int) + 1
                u0, v0 = max(u0, 0), max(v0, 0)
                u1, v1 = min(u1, w), min(v1, h)
                if u0 >= u1 or v0 >= v1:
                    continue
                sel = (np.arange(v0, v1)[:, None] * w + np.arange(u0, u1)[None, :]).ravel()
            elif np.all(z[ti] <= 1e-6):
                continue
            else:
                sel = rows
            t = _watertight_hits(org, tris[ti], kx[sel], ky[sel], kz[sel], sx[sel], sy[sel], sz[sel])
            hit = t < depth[sel]
            if not hit.any():
                continue
            hs = sel[hit]
            depth[hs] = t[hit]
            link[hs] = li
            nrm = fn[ti] / fnn[ti]
            facing = dirs[hs] @ nrm
            normal[hs] = np.where(facing[:, None] > 0, -nrm, nrm)
            color[hs] = c

    valid = np.isfinite(depth)
    if noise > 0 and valid.any():
        rng = rng if rng is not None else np.random.default_rng()
        depth[valid] += rng.normal(0.0, noise, size=int(valid.sum()))
    depth[~valid] = 0.0
    return DepthImage(
        camera=camera,
        range=depth.reshape(h, w),
        valid=valid.reshape(h, w),
        link=link.reshape(h, w),
        normal=normal.reshape(h, w, 3),
        color=color.reshape(h, w, 3),
    )


@dataclass(eq=False)
class PointCloud:
    positions: np.ndarray
    colors: np.ndarray
    normals: np.ndarray
    link_ids: np.ndarray | None = None
    padded: bool = False

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=float).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=float).reshape(-1, 3)
        if self.link_ids is not None:
            self.link_ids = np.asarray(self.link_ids, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.positions)

    def subset(self, idx) -> "PointCloud":
        return PointCloud(
            self.positions[idx],
            self.colors[idx],
            self.normals[idx],
            None if self.link_ids is None else self.link_ids[idx],
            self.padded,
        )

    def features(self) -> np.ndarray:
        """(K, 9) array: position, color, normal."""
        return np.hstack([self.positions, self.colors, self.normals])


def backproject(image: DepthImage) -> PointCloud:
    dirs = image.camera.ray_directions()
    valid = image.valid.ravel()
    r = image.range.ravel()[valid]
    pts = image.camera.pose.translation + dirs[valid] * r[:, None]
    return PointCloud(
        pts,
        image.color.reshape(-1, 3)[valid],
        image.normal.reshape(-1, 3)[valid],
        image.link.ravel()[valid],
    )


def fuse(images) -> PointCloud:
    """Concatenate back-projected points of every image."""
    clouds = [backproject(im) for im in images]
    clouds = [c for c in clouds if len(c)]
    if not clouds:
        raise EmptyObservation("no valid pixel in any depth image")
    return PointCloud(
        np.concatenate([c.positions for c in clouds]),
        np.concatenate([c.colors for c in clouds]),
        np.concatenate([c.normals for c in clouds]),
        np.concatenate([c.link_ids for c in clouds]),
    )


@njit(cache=True)
def _fps_kernel(p, first, k):
    n = p.shape[0]
    idx = np.empty(k, dtype=np.int64)
    dist = np.empty(n)
    idx[0] = first
    for j in range(n):
        dx = p[j, 0] - p[first, 0]
        dy = p[j, 1] - p[first, 1]
        dz = p[j, 2] - p[first, 2]
        dist[j] = dx * dx + dy * dy + dz * dz
    for i in range(1, k):
        best = 0
        for j in range(1, n):
            if dist[j] > dist[best]:
                best = j
        idx[i] = best
        for j in range(n):
            dx = p[j, 0] - p[best, 0]
            dy = p[j, 1] - p[best, 1]
            dz = p[j, 2] - p[best, 2]
            d = dx * dx + dy * dy + dz * dz
            if d < dist[j]:
                dist[j] = d
    return idx


def farthest_point_sample(points, k: int) -> np.ndarray:
    """Indices of ``k`` points chosen greedily to maximise the min distance.

    The first pick is the point farthest from the centroid, so for collinear
    input the two extremes come first. Ties resolve to the lowest index.
    """
    p = np.ascontiguousarray(points, dtype=np.float64)
    n = len(p)
    if k >= n:
        return np.arange(n)
    first = int(np.argmax(np.sum((p - p.mean(axis=0)) ** 2, axis=1)))
    return _fps_kernel(p, first, int(k))


def fuse_and_sample(images, k: int = N_POINTS, seed: int = 0) -> PointCloud:
    raw = fuse(images)
    return sample_cloud(raw, k, seed)


def sample_cloud(raw: PointCloud, k: int = N_POINTS, seed: int = 0) -> PointCloud:
    if len(raw) >= k:
        return raw.subset(farthest_point_sample(raw.positions, k))
    rng = np.random.default_rng(seed)
    extra = rng.integers(0, len(raw), size=k - len(raw))
    out = raw.subset(np.concatenate([np.arange(len(raw)), extra]))
    out.padded = True
    return out


@dataclass(eq=False)
class VoxelGrid:
    """Channels: occupancy, rgb, normal (7, R, R, R) over a cubic domain."""

    data: np.ndarray
    lo: float = GRID_LO
    hi: float = GRID_HI
    discarded: int = 0

    @property
    def resolution(self) -> int:
        return self.data.shape[1]

    @property
    def voxel_size(self) -> float:
        return (self.hi - self.lo) / self.resolution

    @property
    def occupancy(self) -> np.ndarray:
        return self.data[0] > 0.5

    @property
    def colors(self) -> np.ndarray:
        return self.data[1:4]

    @property
    def normals(self) -> np.ndarray:
        return self.data[4:7]


def voxel_index(points, res: int = GRID_RES, lo: float = GRID_LO, hi: float = GRID_HI):
    """Integer voxel index per point and an in-bounds mask."""
    vs = (hi - lo) / res
    ijk = np.floor((np.asarray(points, dtype=float) - lo) / vs).astype(np.int64)
    inside = np.all((ijk >= 0) & (ijk < res), axis=1)
    return ijk, inside


def voxel_centers(ijk, res: int = GRID_RES, lo: float = GRID_LO, hi: float = GRID_HI) -> np.ndarray:
    vs = (hi - lo) / res
    return lo + (np.asarray(ijk, dtype=float) + 0.5) * vs


def voxelize(cloud: PointCloud, res: int = GRID_RES, lo: float = GRID_LO, hi: float = GRID_HI) -> VoxelGrid:
    ijk, inside = voxel_index(cloud.positions, res, lo, hi)
    if not inside.any():
        raise AllPointsOutOfBounds(f"all {len(cloud)} points fall outside [{lo}, {hi}]^3")
    ijk = ijk[inside]
    flat = np.ravel_multi_index(ijk.T, (res, res, res))
    count = np.bincount(flat, minlength=res**3).astype(float)
    data = np.zeros((7, res**3), dtype=np.float32)
    occ = count > 0
    data[0, occ] = 1.0
    for c in range(3):
        data[1 + c] = np.bincount(flat, weights=cloud.colors[inside, c], minlength=res**3)
        data[4 + c] = np.bincount(flat, weights=cloud.normals[inside, c], minlength=res**3)
    data[1:4, occ] /= count[occ]
    nrm = data[4:7, occ]
    length = np.linalg.norm(nrm, axis=0)
    ok = length > 1e-6
    nrm[:, ok] /= length[ok]
    nrm[:, ~ok] = 0.0
    data[4:7, occ] = nrm
    return VoxelGrid(data.reshape(7, res, res, res), lo, hi, discarded=int((~inside).sum()))


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------

_PLY_DTYPE = np.dtype(
    [
        ("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
        ("red", "u1"), ("green", "u1"), ("blue", "u1"),
        ("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4"),
    ]
)


def write_ply(cloud: PointCloud, path) -> None:
    rec = np.empty(len(cloud), dtype=_PLY_DTYPE)
    for i, k in enumerate("xyz"):
        rec[k] = cloud.positions[:, i]
    rgb = np.clip(np.round(cloud.colors * 255), 0, 255).astype(np.uint8)
    for i, k in enumerate(("red", "green", "blue")):
        rec[k] = rgb[:, i]
    for i, k in enumerate(("nx", "ny", "nz")):
        rec[k] = cloud.normals[:, i]
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(cloud)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "property float nx\nproperty float ny\nproperty float nz\n"
        "end_header\n"
    )
    try:
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii"))
            fh.write(rec.tobytes())
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def read_ply(path) -> PointCloud:
    raw = Path(path).read_bytes()
    end = raw.index(b"end_header\n") + len(b"end_header\n")
    header = raw[:end].decode("ascii")
    n = int(next(l for l in header.splitlines() if l.startswith("element vertex")).split()[-1])
    rec = np.frombuffer(raw[end:], dtype=_PLY_DTYPE, count=n)
    pos = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(float)
    col = np.stack([rec["red"], rec["green"], rec["blue"]], axis=1) / 255.0
    nrm = np.stack([rec["nx"], rec["ny"], rec["nz"]], axis=1).astype(float)
    return PointCloud(pos, col, nrm)

