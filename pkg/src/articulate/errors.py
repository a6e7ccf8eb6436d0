"""Exception hierarchy shared across the toolkit."""


class ArticulateError(Exception):
    """Base class; ``code`` is the machine-readable name used by the CLI."""

    @property
    def code(self) -> str:
        return type(self).__name__


# model
class MalformedXml(ArticulateError):
    pass


class CyclicKinematics(ArticulateError):
    pass


class MissingMeshFile(ArticulateError):
    pass


class UnsupportedJointType(ArticulateError):
    pass


class IoFailure(ArticulateError):
    pass


class JointStateOutOfRange(ArticulateError):
    pass


class EmptyGeometry(ArticulateError):
    pass


# sim
class FixedJoint(ArticulateError):
    pass


class UnknownJoint(ArticulateError):
    pass


class NoContact(ArticulateError):
    pass


class MisalignedInputs(ArticulateError):
    pass


# sensor
class EmptyObservation(ArticulateError):
    pass


class AllPointsOutOfBounds(ArticulateError):
    pass


# policy
class NoMovableJoint(ArticulateError):
    pass


class NoValidCandidate(ArticulateError):
    pass


class EmptyLog(ArticulateError):
    pass


# percept
class EmptyGrid(ArticulateError):
    pass


class NoMotionDetected(ArticulateError):
    pass


class PartBudgetExceeded(ArticulateError):
    pass


# jointest
class DegenerateGeometry(ArticulateError):
    pass


class ZeroMotion(ArticulateError):
    pass


# meshing
class UnknownLabel(ArticulateError):
    pass


class NoPartsAllocated(ArticulateError):
    pass


# eval
class BothEmpty(ArticulateError):
    pass


class ZeroVector(ArticulateError):
    pass


class NotRevolute(ArticulateError):
    pass


class NoJoints(ArticulateError):
    pass


# cli
class InvalidConfig(ArticulateError):
    pass


class EmptyDataset(ArticulateError):
    pass
