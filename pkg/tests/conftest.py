import sys

import numpy as np
import pytest

from articulate.fixtures import box
from articulate.geometry import Pose
from articulate.model import ArticulatedModel, JointSpec


def hinge_model(axis=(0.0, 0.0, 1.0), limits=(0.0, np.pi / 2), origin=None) -> ArticulatedModel:
    """Fixed base block plus a lid on a revolute joint through the joint origin."""
    base = box((-0.5, -0.5, -0.5), (0.5, 0.5, 0.0))
    lid = box((0.0, -0.5, 0.0), (1.0, 0.5, 0.05))
    j = JointSpec("hinge", "revolute", "base", "lid", axis=np.array(axis), origin=origin or Pose(), limits=limits)
    return ArticulatedModel({"base": base, "lid": lid}, (j,), root="base", name="hinge")


def slider_model(limits=(0.0, 0.4)) -> ArticulatedModel:
    base = box((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5))
    drawer = box((0.5, -0.3, -0.3), (0.6, 0.3, 0.3))
    j = JointSpec("slide", "prismatic", "base", "drawer", axis=np.array([1.0, 0.0, 0.0]), limits=limits)
    return ArticulatedModel({"base": base, "drawer": drawer}, (j,), root="base", name="slider")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
