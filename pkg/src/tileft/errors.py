"""Exception hierarchy shared by every tileft module."""


class TileFTError(Exception):
    """Base class for all errors raised by tileft."""


class ConfigError(TileFTError):
    """Invalid scenario, fault schedule or benchmark configuration."""


class InvariantViolation(TileFTError):
    """An internal consistency check failed."""


# validation memory
class SlotOccupied(TileFTError):
    pass


class GroupIdInUse(TileFTError):
    pass


class TooManyGroups(TileFTError):
    pass


class NotOwner(TileFTError):
    """A tile attempted to write another tile's validation memory."""


class BufferOverflow(TileFTError):
    pass


class NoSuchTile(TileFTError):
    pass


class NoSuchSlot(TileFTError):
    pass


class RemoteReadOutsideBarrier(TileFTError):
    """A tile read a sibling's validation memory between checkpoint barriers."""


# voting
class OwnChecksumMissing(TileFTError):
    pass


class ReplicationOne(TileFTError):
    """Voting requested for a group that runs a single replica."""


# runtime
class SourceInvalid(TileFTError):
    """Resync source lacks a valid checksum or is itself recovering."""


class RepairPending(TileFTError):
    pass


class TileNotBroken(TileFTError):
    pass


# fault injection
class TargetInactive(TileFTError):
    pass


class FaultTimingError(TileFTError):
    pass


# workload
class DimensionMismatch(TileFTError):
    pass


class EmptyAccumulator(TileFTError):
    pass


# bench
class MissingReferenceArm(TileFTError):
    pass
