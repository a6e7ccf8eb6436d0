"""Per-part surface extraction from the part-probability volume.

Each label's probability channel is inverted (1 - p), upsampled trilinearly
and contoured at 0.5, i.e. where the part probability crosses one half.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from skimage import measure

from .errors import NoPartsAllocated, UnknownLabel
from .model import TriMesh
from .percept import N_LABELS, PartVolume

log = logging.getLogger(__name__)

ISO = 0.5
UPSAMPLE = 3
TIE_EPS = 1e-9


@dataclass(eq=False)
class ScalarField:
    """Samples at ``origin + i * spacing`` along each axis."""

    values: np.ndarray
    origin: np.ndarray
    spacing: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 3 or min(self.values.shape) < 2:
            raise ValueError("a scalar field needs at least 2 samples per axis")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("scalar field contains non-finite values")
        self.origin = np.asarray(self.origin, dtype=float).reshape(3)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.values.shape


def field_from_channel(H: PartVolume, label: int) -> ScalarField:
    """Probability channel of ``label`` sampled at voxel centres."""
    return ScalarField(H.channel(label).astype(float), np.full(3, H.lo + 0.5 * H.voxel_size), H.voxel_size)


def invert_volume(H: PartVolume, label: int) -> ScalarField:
    if not 1 <= label <= N_LABELS or label not in H.allocated():
        raise UnknownLabel(f"label {label} is not allocated")
    f = field_from_channel(H, label)
    return ScalarField(1.0 - f.values, f.origin, f.spacing)


def _resample_axis(a: np.ndarray, axis: int, factor: int) -> np.ndarray:
    n = a.shape[axis]
    # cell-centred alignment: new sample j sits at old coordinate (j + 0.5) / f - 0.5
    x = (np.arange(n * factor) + 0.5) / factor - 0.5
    i0 = np.clip(np.floor(x).astype(int), 0, n - 2)
    w = x - i0
    shape = [1] * a.ndim
    shape[axis] = -1
    w = w.reshape(shape)
    return np.take(a, i0, axis=axis) * (1.0 - w) + np.take(a, i0 + 1, axis=axis) * w


def upsample_trilinear(field: ScalarField, factor: int = UPSAMPLE) -> ScalarField:
    """Trilinear upsampling by an integer factor.

    Original samples are reproduced exactly (at new index ``f*i + (f-1)/2``
    for odd ``f``); the outermost new samples extrapolate linearly.
    """
    if factor < 1 or int(factor) != factor:
        raise ValueError("upsampling factor must be a positive integer")
    factor = int(factor)
    v = field.values
    for ax in range(3):
        v = _resample_axis(v, ax, factor)
    step = field.spacing / factor
    origin = field.origin + (0.5 / factor - 0.5) * field.spacing
    return ScalarField(v, origin, step)


def marching_cubes(field: ScalarField, iso: float = ISO) -> TriMesh:
    """Iso-surface of ``field``; triangles face toward increasing values."""
    v = field.values
    if not (v.min() < iso < v.max()):
        return TriMesh.empty()
    # nudge exact ties off the iso level so no vertex lands on a grid node
    v = np.where(v == iso, iso + TIE_EPS, v)
    verts, faces, _, _ = measure.marching_cubes(v, level=iso, spacing=(field.spacing,) * 3, method="lewiner")
    verts = verts.astype(float) + field.origin
    faces = faces.astype(np.int64)
    faces = faces[(faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])]
    if len(faces):
        # orient so normals point toward increasing field values
        tri = verts[faces]
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        c = tri.mean(axis=1)
        probe = _trilinear_at(field, c + 0.5 * field.spacing * _safe_unit(n))
        probe_back = _trilinear_at(field, c - 0.5 * field.spacing * _safe_unit(n))
        if np.sum(probe - probe_back) < 0:
            faces = faces[:, [0, 2, 1]]
    return TriMesh(verts, faces)


def _safe_unit(n):
    l = np.linalg.norm(n, axis=1, keepdims=True)
    return np.divide(n, l, out=np.zeros_like(n), where=l > 0)


def _trilinear_at(field: ScalarField, pts) -> np.ndarray:
    g = (np.asarray(pts) - field.origin) / field.spacing
    hi = np.array(field.dims) - 1
    g = np.clip(g, 0, hi - 1e-9)
    i = np.floor(g).astype(int)
    f = g - i
    v = field.values
    out = np.zeros(len(g))
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = (f[:, 0] if dx else 1 - f[:, 0]) * (f[:, 1] if dy else 1 - f[:, 1]) * (f[:, 2] if dz else 1 - f[:, 2])
                out += w * v[i[:, 0] + dx, i[:, 1] + dy, i[:, 2] + dz]
    return out


def _crop(field: ScalarField, iso: float, margin: int = 3) -> ScalarField:
    inside = field.values < iso
    if not inside.any():
        return field
    idx = np.argwhere(inside)
    lo = np.maximum(idx.min(axis=0) - margin, 0)
    hi = np.minimum(idx.max(axis=0) + margin + 1, field.dims)
    hi = np.maximum(hi, lo + 2)
    sl = tuple(slice(a, b) for a, b in zip(lo, hi))
    return ScalarField(field.values[sl], field.origin + lo * field.spacing, field.spacing)


def extract_part_meshes(H: PartVolume, factor: int = UPSAMPLE, iso: float = ISO) -> dict[int, TriMesh]:
    """One world-frame mesh per allocated label; empty surfaces are skipped."""
    labels = H.allocated()
    if not labels:
        raise NoPartsAllocated("part volume has no allocated label")
    out = {}
    for lab in labels:
        inv = invert_volume(H, lab)
        # cropping to the part's neighbourhood leaves the contour unchanged:
        # outside the margin the field is constantly above the iso level
        mesh = marching_cubes(upsample_trilinear(_crop(inv, iso), factor), iso)
        if mesh.is_empty:
            log.warning("label %d produced an empty mesh; omitted", lab)
            continue
        out[lab] = mesh
    return out
