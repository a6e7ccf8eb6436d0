"""Interactive reconstruction of articulated objects from depth observations.

An agent pokes an object with hold+push actions, segments the parts that move,
fuses them into a part-probability volume, estimates each part's joint and
exports the result as a URDF.
"""

from .episode import RunConfig, run_batch, run_episode
from .errors import ArticulateError
from .fixtures import FIXTURES, build_fixture, make_fixtures
from .model import ArticulatedModel, load_urdf, save_urdf

__version__ = "0.1.0"
