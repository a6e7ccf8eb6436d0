"""Parameterised synthetic articulated objects with analytic ground truth.

Every object is built from axis-aligned boxes so that ground-truth geometry,
joint axes and joint positions are known exactly.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .geometry import Pose
from .model import ArticulatedModel, JointSpec, TriMesh, save_urdf

_BOX_FACES = np.array(
    [
        [0, 2, 1], [0, 3, 2],  # -z
        [4, 5, 6], [4, 6, 7],  # +z
        [0, 1, 5], [0, 5, 4],  # -y
        [2, 3, 7], [2, 7, 6],  # +y
        [1, 2, 6], [1, 6, 5],  # +x
        [0, 4, 7], [0, 7, 3],  # -x
    ]
)


def box(lo, hi) -> TriMesh:
    """Closed box between corners ``lo`` and ``hi`` with outward winding."""
    (x0, y0, z0), (x1, y1, z1) = lo, hi
    v = np.array(
        [
            [x0, y0, z0], [x1, y0, z0], [x1, y1, z0], [x0, y1, z0],
            [x0, y0, z1], [x1, y0, z1], [x1, y1, z1], [x0, y1, z1],
        ],
        dtype=float,
    )
    return TriMesh(v, _BOX_FACES.copy())


def boxes(*corners) -> TriMesh:
    return TriMesh.concatenate([box(lo, hi) for lo, hi in corners])


def _carcass(depth, width, height, th, dividers_y=(), shelves=()):
    """Open-front cabinet body; front face at x = depth / 2."""
    d, w, h = depth / 2, width / 2, height / 2
    parts = [
        ((-d, -w, -h), (d, w, -h + th)),  # bottom
        ((-d, -w, h - th), (d, w, h)),  # top
        ((-d, -w, -h), (d, -w + th, h)),  # left
        ((-d, w - th, -h), (d, w, h)),  # right
        ((-d, -w, -h), (-d + th, w, h)),  # back
    ]
    for y in dividers_y:
        parts.append(((-d, y - th / 2, -h), (d, y + th / 2, h)))
    for y0, y1, z in shelves:
        parts.append(((-d, y0, z - th / 2), (d, y1, z + th / 2)))
    return boxes(*parts)


def _drawer(depth, width, height, th):
    """Drawer in its joint frame: front panel spans x in [0, th], body behind."""
    w, h = width / 2, height / 2
    body_d = depth - th
    return boxes(
        ((0.0, -w, -h), (th, w, h)),  # front
        ((-body_d, -w + th, -h + th), (0.0, w - th, -h + 2 * th)),  # bottom
        ((-body_d, -w + th, -h + th), (0.0, -w + 2 * th, h - 2 * th)),  # side
        ((-body_d, w - 2 * th, -h + th), (0.0, w - th, h - 2 * th)),  # side
        ((-body_d, -w + th, -h + th), (-body_d + th, w - th, h - 2 * th)),  # back
    )


def cabinet_1drawer() -> ArticulatedModel:
    D, W, H, th = 1.0, 1.2, 0.9, 0.05
    body = _carcass(D, W, H, th)
    drawer = _drawer(D - th, W - 2 * th - 0.02, H - 2 * th - 0.02, th)
    joint = JointSpec(
        name="drawer_slide",
        kind="prismatic",
        parent="body",
        child="drawer",
        axis=[1.0, 0.0, 0.0],
        origin=Pose.from_translation([D / 2, 0.0, 0.0]),
        limits=(0.0, 0.6),
    )
    return ArticulatedModel({"body": body, "drawer": drawer}, (joint,), root="body", name="cabinet_1drawer")


def cabinet_3part() -> ArticulatedModel:
    D, W, H, th = 1.0, 1.6, 2.0, 0.06
    body = _carcass(D, W, H, th, dividers_y=(0.0,), shelves=((0.0, W / 2, 0.0), (-W / 2, 0.0, 0.0)))
    col_w = W / 2 - 1.5 * th - 0.02
    dr_h = H / 2 - 1.5 * th - 0.02
    links = {"body": body}
    joints = []
    for i, zc in enumerate((H / 4, -H / 4)):
        name = f"drawer{i}"
        links[name] = _drawer(D - th, col_w, dr_h, th)
        joints.append(
            JointSpec(
                name=f"{name}_slide",
                kind="prismatic",
                parent="body",
                child=name,
                axis=[1.0, 0.0, 0.0],
                origin=Pose.from_translation([D / 2, -W / 4, zc]),
                limits=(0.0, 0.55),
            )
        )
    # door over the right column; hinge on the outer right edge
    door_w = W / 2 - 0.01
    links["door"] = box((0.0, -door_w, -H / 2 + 0.01), (th, 0.0, H / 2 - 0.01))
    joints.append(
        JointSpec(
            name="door_hinge",
            kind="revolute",
            parent="body",
            child="door",
            axis=[0.0, 0.0, 1.0],
            origin=Pose.from_translation([D / 2, W / 2, 0.0]),
            limits=(0.0, math.pi / 2),
        )
    )
    return ArticulatedModel(links, tuple(joints), root="body", name="cabinet_3part")


def laptop() -> ArticulatedModel:
    L, W, th = 1.0, 1.4, 0.07
    base = box((-L / 2, -W / 2, 0.0), (L / 2, W / 2, th))
    # lid in hinge frame: lies along +x when closed
    lid = boxes(((0.0, -W / 2, 0.0), (L, W / 2, th)), ((0.35, -0.25, th), (0.55, 0.25, th + 0.03)))
    joint = JointSpec(
        name="lid_hinge",
        kind="revolute",
        parent="base",
        child="lid",
        axis=[0.0, -1.0, 0.0],
        origin=Pose.from_translation([-L / 2, 0.0, th]),
        limits=(0.35, 2.0),
    )
    return ArticulatedModel({"base": base, "lid": lid}, (joint,), root="base", name="laptop")


def scissors() -> ArticulatedModel:
    L, w, th = 2.0, 0.3, 0.1
    blade_a = boxes(((-0.35 * L, -w / 2, 0.0), (0.65 * L, w / 2, th)), ((-0.45 * L, -w, 0.0), (-0.3 * L, w, th)))
    blade_b = boxes(((-0.35 * L, -w / 2, 0.0), (0.65 * L, w / 2, th)), ((-0.45 * L, -w, 0.0), (-0.3 * L, w, th)))
    joint = JointSpec(
        name="pivot",
        kind="revolute",
        parent="blade_a",
        child="blade_b",
        axis=[0.0, 0.0, 1.0],
        origin=Pose.from_translation([0.0, 0.0, th]),
        limits=(0.15, 0.9),
    )
    return ArticulatedModel(
        {"blade_a": blade_a, "blade_b": blade_b}, (joint,), root="blade_a", name="scissors", free_base=True
    )


def kitchen_pot() -> ArticulatedModel:
    S, H, th = 1.2, 0.8, 0.07
    s = S / 2
    pot = boxes(
        ((-s, -s, 0.0), (s, s, th)),
        ((-s, -s, 0.0), (-s + th, s, H)),
        ((s - th, -s, 0.0), (s, s, H)),
        ((-s, -s, 0.0), (s, -s + th, H)),
        ((-s, s - th, 0.0), (s, s, H)),
        ((-0.15, -s - 0.2, H - 0.25), (0.15, -s, H - 0.15)),  # handle
        ((-0.15, s, H - 0.25), (0.15, s + 0.2, H - 0.15)),  # handle
    )
    lid = boxes(((0.0, -s - 0.02, 0.0), (S + 0.04, s + 0.02, th)), ((s - 0.1, -0.1, th), (s + 0.1, 0.1, th + 0.12)))
    joint = JointSpec(
        name="lid_hinge",
        kind="revolute",
        parent="pot",
        child="lid",
        axis=[0.0, -1.0, 0.0],
        origin=Pose.from_translation([-s - 0.02, 0.0, H]),
        limits=(0.0, 1.3),
    )
    return ArticulatedModel({"pot": pot, "lid": lid}, (joint,), root="pot", name="kitchen_pot")


def stress_7part() -> ArticulatedModel:
    """Base plus six drawers: one more part than the label budget allows."""
    D, W, H, th = 0.9, 2.0, 1.4, 0.06
    cols, rows = 3, 2
    cw, rh = W / cols, H / rows
    dividers = [-W / 2 + cw * k for k in range(1, cols)]
    shelves = [(-W / 2, W / 2, 0.0)]
    body = _carcass(D, W, H, th, dividers_y=dividers, shelves=shelves)
    links = {"body": body}
    joints = []
    for r in range(rows):
        for c in range(cols):
            name = f"drawer{r * cols + c}"
            yc = -W / 2 + cw * (c + 0.5)
            zc = H / 2 - rh * (r + 0.5)
            links[name] = _drawer(D - th, cw - th - 0.02, rh - th - 0.02, th)
            joints.append(
                JointSpec(
                    name=f"{name}_slide",
                    kind="prismatic",
                    parent="body",
                    child=name,
                    axis=[1.0, 0.0, 0.0],
                    origin=Pose.from_translation([D / 2, yc, zc]),
                    limits=(0.0, 0.5),
                )
            )
    return ArticulatedModel(links, tuple(joints), root="body", name="stress_7part")


FIXTURES = {
    "cabinet_1drawer": cabinet_1drawer,
    "cabinet_3part": cabinet_3part,
    "laptop": laptop,
    "scissors": scissors,
    "kitchen_pot": kitchen_pot,
    "stress_7part": stress_7part,
}


def build_fixture(name: str) -> ArticulatedModel:
    try:
        return FIXTURES[name]()
    except KeyError:
        raise KeyError(f"unknown fixture {name!r}; choose from {sorted(FIXTURES)}") from None


def make_fixtures(out_dir, names=None) -> list[Path]:
    """Write each fixture as ``<out_dir>/<name>/<name>.urdf`` plus OBJ meshes."""
    out_dir = Path(out_dir)
    paths = []
    for name in names or FIXTURES:
        path = out_dir / name / f"{name}.urdf"
        path.parent.mkdir(parents=True, exist_ok=True)
        paths.append(save_urdf(build_fixture(name), path))
    return paths
