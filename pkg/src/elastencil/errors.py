"""Error taxonomy shared by the client, coordinator, and workers.

Every error that can cross the wire carries a stable numeric code so the
protocol can round-trip it; purely local errors reuse the same classes.
"""

from __future__ import annotations


class ElastencilError(Exception):
    """Base class for all runtime errors."""

    code = 1


class SelfDependency(ElastencilError):
    """Output array of a statement also appears among its inputs."""

    code = 10


class ShapeMismatch(ElastencilError):
    """Slice extents of a statement disagree, or a slice does not fit its array."""

    code = 11


class StridedSlice(ElastencilError):
    """A slice with step != 1 was requested."""

    code = 12


class InvalidSlice(ElastencilError):
    """Slice bounds are out of range or malformed."""

    code = 13


class InvalidShape(ElastencilError):
    """Array shape has non-positive extents or unsupported rank."""

    code = 14


class UnsupportedOp(ElastencilError):
    """Operator tag outside the kernel grammar."""

    code = 15


class MalformedDag(ElastencilError):
    """DAG failed server-side re-validation (edges, shapes, slot coverage)."""

    code = 16


class UnknownArray(ElastencilError):
    """Command referenced an array id that was never created."""

    code = 17


class IndivisibleShape(ElastencilError):
    """Global extent is not divisible by the tile count along a dimension."""

    code = 20


class OffsetExceedsTileWidth(ElastencilError):
    """Required ghost depth reaches or exceeds the tile interior width."""

    code = 21


class StaleMessage(ElastencilError):
    """Halo message arrived for an exchange round that already completed."""

    code = 30


class PeerLost(ElastencilError):
    """A worker-to-worker connection dropped outside a rescale window."""

    code = 31


class RescaleUnavailable(ElastencilError):
    """Requested worker count cannot be provided by the launcher."""

    code = 40


class DaemonUnreachable(ElastencilError):
    """Memory daemon did not respond; rescale cannot proceed."""

    code = 41


class UnknownAllocation(ElastencilError):
    """Daemon has no payload stored under the given allocation id."""

    code = 42


class RestartFailed(ElastencilError):
    """Launcher could not respawn the worker set."""

    code = 43


class SpawnFailed(ElastencilError):
    """A job process failed to start."""

    code = 50


class PortInUse(ElastencilError):
    """Requested endpoint address is already bound."""

    code = 51


class VersionMismatch(ElastencilError):
    """Wire frame carried an unsupported protocol version."""

    code = 60


class ProtocolError(ElastencilError):
    """Frame or command body could not be decoded."""

    code = 61


class SessionFailed(ElastencilError):
    """A previous batch aborted; the session must be torn down."""

    code = 62


class OracleMismatch(ElastencilError):
    """Benchmark result disagreed with its reference solver."""

    code = 70


_BY_CODE = {
    cls.code: cls
    for cls in [
        ElastencilError, SelfDependency, ShapeMismatch, StridedSlice,
        InvalidSlice, InvalidShape, UnsupportedOp, MalformedDag, UnknownArray,
        IndivisibleShape, OffsetExceedsTileWidth, StaleMessage, PeerLost,
        RescaleUnavailable, DaemonUnreachable, UnknownAllocation,
        RestartFailed, SpawnFailed, PortInUse, VersionMismatch, ProtocolError,
        SessionFailed, OracleMismatch,
    ]
}


def error_from_code(code: int, message: str) -> ElastencilError:
    """Rebuild the typed exception for an error code received off the wire."""
    cls = _BY_CODE.get(code, ElastencilError)
    return cls(message)
