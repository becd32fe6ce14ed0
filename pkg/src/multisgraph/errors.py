"""Exception types raised across the package."""


class MultiSGraphError(Exception):
    pass


class EmptyScan(MultiSGraphError, ValueError):
    pass


class DegeneratePlanes(MultiSGraphError, ValueError):
    pass


class EmptyRoom(MultiSGraphError, ValueError):
    pass


class DimensionMismatch(MultiSGraphError, ValueError):
    pass


class NoOverlap(MultiSGraphError):
    pass


class SingularSystem(MultiSGraphError):
    pass


class MissingTransform(MultiSGraphError):
    pass


class ProtocolViolation(MultiSGraphError):
    pass


class PoseInsideWall(MultiSGraphError, ValueError):
    pass


class InvalidScenario(MultiSGraphError, ValueError):
    pass


class MismatchedWorlds(MultiSGraphError, ValueError):
    pass


# wire-level decode errors
class DecodeError(MultiSGraphError, ValueError):
    pass


class TruncatedFrame(DecodeError):
    pass


class MalformedPayload(DecodeError):
    pass


class UnsupportedVersion(DecodeError):
    pass


class PeerUnreachable(MultiSGraphError, ConnectionError):
    pass
