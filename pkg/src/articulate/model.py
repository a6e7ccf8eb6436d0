"""Articulated object representation, URDF subset I/O, FK and normalisation.

Supported URDF subset: ``robot`` > ``link`` > ``visual`` > (``origin``,
``geometry`` > ``mesh``, ``material`` > ``color``), and ``joint`` with
``type``, ``parent``, ``child``, ``origin``, ``axis``, ``limit``. Collision,
inertial and primitive geometry are skipped with a warning.
"""

from __future__ import annotations

import logging
import math
import os
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import (
    CyclicKinematics,
    EmptyGeometry,
    IoFailure,
    JointStateOutOfRange,
    MalformedXml,
    MissingMeshFile,
    UnsupportedJointType,
)
from .geometry import Pose, unit

log = logging.getLogger(__name__)

JOINT_KINDS = ("revolute", "prismatic", "fixed")


@dataclass(frozen=True, eq=False)
class TriMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        f = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("triangle index out of range")
        if len(f) and np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise ValueError("degenerate triangle with repeated indices")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", f)
        if self.colors is not None:
            c = np.asarray(self.colors, dtype=float).reshape(-1, 3)
            if len(c) != len(v):
                raise ValueError("per-vertex colors must match vertex count")
            object.__setattr__(self, "colors", c)

    @classmethod
    def empty(cls) -> "TriMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def transformed(self, pose: Pose) -> "TriMesh":
        return TriMesh(pose.apply(self.vertices), self.triangles, self.colors)

    def scaled(self, s: float) -> "TriMesh":
        return TriMesh(self.vertices * s, self.triangles, self.colors)

    def triangle_vertices(self) -> np.ndarray:
        return self.vertices[self.triangles]

    def area(self) -> float:
        t = self.triangle_vertices()
        if not len(t):
            return 0.0
        return float(0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1).sum())

    def signed_volume(self) -> float:
        t = self.triangle_vertices()
        if not len(t):
            return 0.0
        return float(np.einsum("ij,ij->i", t[:, 0], np.cross(t[:, 1], t[:, 2])).sum() / 6.0)

    @staticmethod
    def concatenate(meshes) -> "TriMesh":
        meshes = [m for m in meshes if len(m.vertices)]
        if not meshes:
            return TriMesh.empty()
        offs = np.cumsum([0] + [len(m.vertices) for m in meshes[:-1]])
        v = np.concatenate([m.vertices for m in meshes])
        f = np.concatenate([m.triangles + o for m, o in zip(meshes, offs)])
        if all(m.colors is not None for m in meshes):
            c = np.concatenate([m.colors for m in meshes])
        else:
            c = None
        return TriMesh(v, f, c)


@dataclass(frozen=True, eq=False)
class JointSpec:
    name: str
    kind: str
    parent: str
    child: str
    axis: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))
    origin: Pose = field(default_factory=Pose)
    limits: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.kind not in JOINT_KINDS:
            raise UnsupportedJointType(f"joint {self.name!r}: unsupported type {self.kind!r}")
        if self.parent == self.child:
            raise CyclicKinematics(f"joint {self.name!r} connects link {self.parent!r} to itself")
        object.__setattr__(self, "axis", unit(self.axis))
        lo, hi = (float(x) for x in self.limits)
        if lo > hi:
            raise ValueError(f"joint {self.name!r}: lower limit {lo} > upper limit {hi}")
        object.__setattr__(self, "limits", (lo, hi))

    @property
    def movable(self) -> bool:
        return self.kind != "fixed"

    @property
    def span(self) -> float:
        return self.limits[1] - self.limits[0]

    def motion(self, q: float) -> Pose:
        """Transform of the child frame relative to the joint frame at value q."""
        if self.kind == "revolute":
            return Pose.from_axis_angle(self.axis, q)
        if self.kind == "prismatic":
            return Pose.from_translation(self.axis * q)
        return Pose()


@dataclass(frozen=True, eq=False)
class ArticulatedModel:
    links: Mapping[str, TriMesh]
    joints: tuple[JointSpec, ...]
    root: str
    name: str = "object"
    free_base: bool = False
    link_colors: Mapping[str, tuple[float, float, float]] = field(default_factory=dict)
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "links", dict(self.links))
        object.__setattr__(self, "joints", tuple(self.joints))
        object.__setattr__(self, "link_colors", dict(self.link_colors))
        object.__setattr__(self, "warnings", tuple(self.warnings))
        self._validate()

    def _validate(self):
        if self.root not in self.links:
            raise CyclicKinematics(f"root link {self.root!r} not defined")
        names = [j.name for j in self.joints]
        if len(set(names)) != len(names):
            raise ValueError("duplicate joint names")
        parent_of: dict[str, str] = {}
        for j in self.joints:
            for ln in (j.parent, j.child):
                if ln not in self.links:
                    raise CyclicKinematics(f"joint {j.name!r} references unknown link {ln!r}")
            if j.child in parent_of:
                raise CyclicKinematics(f"link {j.child!r} is the child of more than one joint")
            if j.child == self.root:
                raise CyclicKinematics(f"root link {self.root!r} appears as a joint child")
            parent_of[j.child] = j.parent
        for ln in self.links:
            if ln == self.root:
                continue
            if ln not in parent_of:
                raise CyclicKinematics(f"link {ln!r} is not attached to the tree")
            seen = {ln}
            cur = ln
            while cur != self.root:
                cur = parent_of[cur]
                if cur in seen:
                    raise CyclicKinematics(f"cycle through link {cur!r}")
                seen.add(cur)

    # -- queries -------------------------------------------------------
    @property
    def movable_joints(self) -> list[JointSpec]:
        return [j for j in self.joints if j.movable]

    def joint(self, name: str) -> JointSpec:
        for j in self.joints:
            if j.name == name:
                return j
        raise KeyError(name)

    def parent_joint(self, link: str) -> JointSpec | None:
        for j in self.joints:
            if j.child == link:
                return j
        return None

    def chain_to_root(self, link: str) -> list[JointSpec]:
        """Joints from ``link`` up to the root, nearest first."""
        out = []
        j = self.parent_joint(link)
        while j is not None:
            out.append(j)
            j = self.parent_joint(j.parent)
        return out

    def subtree(self, link: str) -> set[str]:
        out = {link}
        frontier = [link]
        while frontier:
            cur = frontier.pop()
            for j in self.joints:
                if j.parent == cur:
                    out.add(j.child)
                    frontier.append(j.child)
        return out

    def topological_joints(self) -> list[JointSpec]:
        order, placed = [], {self.root}
        pending = list(self.joints)
        while pending:
            rest = []
            for j in pending:
                if j.parent in placed:
                    order.append(j)
                    placed.add(j.child)
                else:
                    rest.append(j)
            pending = rest
        return order

    def color_of(self, link: str) -> np.ndarray:
        if link in self.link_colors:
            return np.asarray(self.link_colors[link], dtype=float)
        return palette_color(list(self.links).index(link))

    def canonical_state(self) -> dict[str, float]:
        return {j.name: 0.5 * (j.limits[0] + j.limits[1]) for j in self.movable_joints}

    def allclose(self, other: "ArticulatedModel", atol: float = 1e-6) -> bool:
        if set(self.links) != set(other.links) or self.root != other.root:
            return False
        if self.free_base != other.free_base:
            return False
        for k, m in self.links.items():
            o = other.links[k]
            if m.vertices.shape != o.vertices.shape or m.triangles.shape != o.triangles.shape:
                return False
            if not np.allclose(m.vertices, o.vertices, atol=atol) or not np.array_equal(m.triangles, o.triangles):
                return False
        if len(self.joints) != len(other.joints):
            return False
        others = {j.name: j for j in other.joints}
        for j in self.joints:
            o = others.get(j.name)
            if o is None or (j.kind, j.parent, j.child) != (o.kind, o.parent, o.child):
                return False
            if not np.allclose(j.axis, o.axis, atol=atol) or not j.origin.allclose(o.origin, atol=atol):
                return False
            if not np.allclose(j.limits, o.limits, atol=atol):
                return False
        return True


_PALETTE = np.array(
    [
        [0.62, 0.60, 0.56],
        [0.84, 0.30, 0.24],
        [0.22, 0.55, 0.80],
        [0.30, 0.70, 0.35],
        [0.90, 0.70, 0.20],
        [0.58, 0.36, 0.70],
        [0.20, 0.72, 0.70],
        [0.88, 0.48, 0.68],
    ]
)


def palette_color(i: int) -> np.ndarray:
    return _PALETTE[i % len(_PALETTE)].copy()


# ---------------------------------------------------------------------------
# OBJ
# ---------------------------------------------------------------------------


def read_obj(path) -> TriMesh:
    verts, faces, cols = [], [], []
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise MissingMeshFile(f"cannot read mesh {path}: {exc}") from exc
    for line in text.splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
            if len(parts) >= 7:
                cols.append([float(x) for x in parts[4:7]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) for p in parts[1:]]
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            # fan-triangulate polygons
            for k in range(1, len(idx) - 1):
                faces.append([idx[0], idx[k], idx[k + 1]])
    colors = np.array(cols) if cols and len(cols) == len(verts) else None
    return TriMesh(np.array(verts, dtype=float).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3), colors)


def write_obj(mesh: TriMesh, path) -> None:
    lines = []
    if mesh.colors is not None:
        for v, c in zip(mesh.vertices, mesh.colors):
            lines.append("v {!r} {!r} {!r} {!r} {!r} {!r}".format(*map(float, v), *map(float, c)))
    else:
        for v in mesh.vertices:
            lines.append("v {!r} {!r} {!r}".format(*map(float, v)))
    for f in mesh.triangles + 1:
        lines.append(f"f {f[0]} {f[1]} {f[2]}")
    try:
        Path(path).write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# URDF
# ---------------------------------------------------------------------------


def _floats(s: str | None, n: int, default) -> np.ndarray:
    if s is None:
        return np.asarray(default, dtype=float)
    vals = [float(x) for x in s.split()]
    if len(vals) != n:
        raise MalformedXml(f"expected {n} numbers, got {s!r}")
    return np.asarray(vals, dtype=float)


def _origin(el) -> Pose:
    if el is None:
        return Pose()
    return Pose.from_xyz_rpy(_floats(el.get("xyz"), 3, [0, 0, 0]), _floats(el.get("rpy"), 3, [0, 0, 0]))


def parse_urdf(text: str, base_dir: str | os.PathLike | None = None) -> ArticulatedModel:
    """Parse a URDF-subset document into an :class:`ArticulatedModel`.

    Mesh paths are resolved against ``base_dir``. Fixed joints are collapsed
    into their parent link. Warnings about skipped content are collected on
    ``model.warnings``.
    """
    try:
        root_el = ET.fromstring(text)
    except ET.ParseError as exc:
        raise MalformedXml(str(exc)) from exc
    if root_el.tag != "robot":
        raise MalformedXml(f"root element must be <robot>, got <{root_el.tag}>")
    base = Path(base_dir) if base_dir is not None else Path(".")
    warnings: list[str] = []

    links: dict[str, TriMesh] = {}
    colors: dict[str, tuple[float, float, float]] = {}
    for el in root_el:
        if el.tag == "link":
            name = el.get("name")
            if not name:
                raise MalformedXml("link without a name")
            if name in links:
                raise MalformedXml(f"duplicate link {name!r}")
            parts = []
            for child in el:
                if child.tag != "visual":
                    warnings.append(f"link {name}: ignored <{child.tag}>")
                    continue
                pose = _origin(child.find("origin"))
                mat = child.find("material/color")
                if mat is not None and name not in colors:
                    colors[name] = tuple(_floats(mat.get("rgba"), 4, [0, 0, 0, 1])[:3])
                geom = child.find("geometry")
                mesh_el = geom.find("mesh") if geom is not None else None
                if mesh_el is None:
                    warnings.append(f"link {name}: non-mesh visual geometry ignored")
                    continue
                fname = mesh_el.get("filename")
                if not fname:
                    raise MalformedXml(f"link {name}: mesh without filename")
                if fname.startswith("package://") or fname.startswith("file://"):
                    fname = fname.split("://", 1)[1]
                path = base / fname
                if not path.exists():
                    raise MissingMeshFile(f"link {name}: mesh file {path} not found")
                mesh = read_obj(path)
                scale = _floats(mesh_el.get("scale"), 3, [1, 1, 1])
                mesh = TriMesh(mesh.vertices * scale, mesh.triangles, mesh.colors)
                parts.append(mesh.transformed(pose))
            links[name] = TriMesh.concatenate(parts)

    joints: list[JointSpec] = []
    for el in root_el:
        if el.tag != "joint":
            if el.tag not in ("link",):
                warnings.append(f"ignored top-level <{el.tag}>")
            continue
        name = el.get("name")
        kind = el.get("type")
        parent = el.find("parent")
        child = el.find("child")
        if not name or parent is None or child is None:
            raise MalformedXml("joint requires name, parent and child")
        lim = el.find("limit")
        lo = float(lim.get("lower", 0.0)) if lim is not None else 0.0
        hi = float(lim.get("upper", 0.0)) if lim is not None else 0.0
        if kind == "continuous":
            warnings.append(f"joint {name}: continuous mapped to revolute [-pi, pi]")
            kind, lo, hi = "revolute", -math.pi, math.pi
        elif kind not in JOINT_KINDS:
            raise UnsupportedJointType(f"joint {name!r}: unsupported type {kind!r}")
        axis_el = el.find("axis")
        axis = _floats(axis_el.get("xyz") if axis_el is not None else None, 3, [1, 0, 0])
        joints.append(
            JointSpec(
                name=name,
                kind=kind,
                parent=parent.get("link"),
                child=child.get("link"),
                axis=axis,
                origin=_origin(el.find("origin")),
                limits=(lo, hi) if kind != "fixed" else (0.0, 0.0),
            )
        )

    for j in joints:
        for ln in (j.parent, j.child):
            if ln not in links:
                raise MalformedXml(f"joint {j.name!r} references undefined link {ln!r}")
    children = [j.child for j in joints]
    dup = {c for c in children if children.count(c) > 1}
    if dup:
        raise CyclicKinematics(f"link(s) {sorted(dup)} are children of more than one joint")
    roots = [ln for ln in links if ln not in set(children)]
    if len(roots) != 1:
        raise CyclicKinematics(f"expected exactly one root link, found {roots}")

    links, joints = _collapse_fixed(links, joints, roots[0], colors)
    for w in warnings:
        log.warning(w)
    return ArticulatedModel(
        links=links,
        joints=tuple(joints),
        root=roots[0],
        name=root_el.get("name", "object"),
        free_base=root_el.get("free_base", "false").lower() == "true",
        link_colors={k: v for k, v in colors.items() if k in links},
        warnings=tuple(warnings),
    )


def _collapse_fixed(links, joints, root, colors):
    """Merge every fixed-joint child into its parent link."""
    links = dict(links)
    joints = list(joints)
    while True:
        fixed = next((j for j in joints if j.kind == "fixed"), None)
        if fixed is None:
            return links, joints
        child_mesh = links.pop(fixed.child).transformed(fixed.origin)
        links[fixed.parent] = TriMesh.concatenate([links[fixed.parent], child_mesh])
        colors.pop(fixed.child, None)
        rest = []
        for j in joints:
            if j is fixed:
                continue
            if j.parent == fixed.child:
                j = replace(j, parent=fixed.parent, origin=fixed.origin @ j.origin)
            rest.append(j)
        joints = rest


def _fmt(x: float) -> str:
    return repr(float(x))


def write_urdf(model: ArticulatedModel, mesh_dir: str | os.PathLike, urdf_dir: str | os.PathLike | None = None) -> str:
    """Emit URDF text; writes one OBJ per link into ``mesh_dir``.

    Mesh filenames in the document are relative to ``urdf_dir`` (defaults to
    the parent of ``mesh_dir``).
    """
    mesh_dir = Path(mesh_dir)
    urdf_dir = Path(urdf_dir) if urdf_dir is not None else mesh_dir.parent
    try:
        mesh_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc

    robot = ET.Element("robot", name=model.name)
    if model.free_base:
        robot.set("free_base", "true")
    for i, (name, mesh) in enumerate(model.links.items()):
        fname = f"{name}.obj"
        write_obj(mesh, mesh_dir / fname)
        link = ET.SubElement(robot, "link", name=name)
        vis = ET.SubElement(link, "visual")
        geom = ET.SubElement(vis, "geometry")
        rel = os.path.relpath(mesh_dir / fname, urdf_dir)
        ET.SubElement(geom, "mesh", filename=Path(rel).as_posix())
        if name in model.link_colors:
            mat = ET.SubElement(vis, "material", name=f"{name}_color")
            rgba = list(model.link_colors[name]) + [1.0]
            ET.SubElement(mat, "color", rgba=" ".join(_fmt(c) for c in rgba))
    for j in model.joints:
        el = ET.SubElement(robot, "joint", name=j.name, type=j.kind)
        ET.SubElement(el, "parent", link=j.parent)
        ET.SubElement(el, "child", link=j.child)
        ET.SubElement(
            el,
            "origin",
            xyz=" ".join(_fmt(x) for x in j.origin.translation),
            rpy=" ".join(_fmt(x) for x in j.origin.rpy()),
        )
        ET.SubElement(el, "axis", xyz=" ".join(_fmt(x) for x in j.axis))
        if j.kind != "fixed":
            ET.SubElement(el, "limit", lower=_fmt(j.limits[0]), upper=_fmt(j.limits[1]), effort="0", velocity="0")
    ET.indent(robot)
    return ET.tostring(robot, encoding="unicode") + "\n"


def load_urdf(path) -> ArticulatedModel:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return parse_urdf(text, base_dir=path.parent)


def save_urdf(model: ArticulatedModel, path, mesh_subdir: str = "meshes") -> Path:
    path = Path(path)
    text = write_urdf(model, path.parent / mesh_subdir, urdf_dir=path.parent)
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return path


# ---------------------------------------------------------------------------
# kinematics
# ---------------------------------------------------------------------------


def forward_kinematics(model: ArticulatedModel, q: Mapping[str, float] | None = None) -> dict[str, Pose]:
    """Pose of every link in the model frame.

    Joints missing from ``q`` are taken at 0. Supplied values must lie inside
    the joint limits.
    """
    q = dict(q or {})
    for name, val in q.items():
        j = model.joint(name)
        lo, hi = j.limits
        if j.movable and not (lo - 1e-12 <= val <= hi + 1e-12):
            raise JointStateOutOfRange(f"joint {name!r}: {val} outside [{lo}, {hi}]")
    poses = {model.root: Pose()}
    for j in model.topological_joints():
        poses[j.child] = poses[j.parent] @ j.origin @ j.motion(q.get(j.name, 0.0))
    return poses


def joint_frames(model: ArticulatedModel, q: Mapping[str, float] | None = None) -> dict[str, Pose]:
    """World frame of each joint (parent pose composed with the joint origin)."""
    poses = forward_kinematics(model, q)
    return {j.name: poses[j.parent] @ j.origin for j in model.joints}


def posed_meshes(model: ArticulatedModel, q=None, base_pose: Pose | None = None) -> dict[str, TriMesh]:
    base_pose = base_pose or Pose()
    poses = forward_kinematics(model, q)
    return {k: m.transformed(base_pose @ poses[k]) for k, m in model.links.items()}


def bounding_box(model: ArticulatedModel, q=None) -> tuple[np.ndarray, np.ndarray]:
    verts = [m.vertices for m in posed_meshes(model, q).values() if len(m.vertices)]
    if not verts:
        raise EmptyGeometry(f"model {model.name!r} has no geometry")
    v = np.concatenate(verts)
    return v.min(axis=0), v.max(axis=0)


def normalize_to_cube(model: ArticulatedModel, side: float = 2.0) -> tuple[ArticulatedModel, float]:
    """Scale (and centre) the model so its canonical-state AABB has max side ``side``.

    The canonical state puts every joint at the midpoint of its limits. The
    AABB centre is moved to the origin by shifting the root geometry and the
    root's outgoing joint origins.
    """
    lo, hi = bounding_box(model, model.canonical_state())
    extent = float(np.max(hi - lo))
    if extent <= 0:
        raise EmptyGeometry("model geometry has zero extent")
    s = side / extent
    centre = 0.5 * (lo + hi) * s

    links = {}
    for k, m in model.links.items():
        m = m.scaled(s)
        if k == model.root:
            m = TriMesh(m.vertices - centre, m.triangles, m.colors)
        links[k] = m
    joints = []
    for j in model.joints:
        t = j.origin.translation * s
        if j.parent == model.root:
            t = t - centre
        limits = j.limits if j.kind != "prismatic" else (j.limits[0] * s, j.limits[1] * s)
        joints.append(replace(j, origin=Pose(j.origin.rotation, t), limits=limits))
    return replace(model, links=links, joints=tuple(joints)), s
