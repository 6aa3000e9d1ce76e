"""Exception types raised across the engine.

Each name signals a distinct protocol or environment failure; handlers match
on the class, never on message text. Anything not listed here escaping a
public operation is a bug.
"""
from __future__ import annotations


class DuraflowError(Exception):
    """Base class for every engine error."""


# --- execution graph -------------------------------------------------------

class GraphError(DuraflowError):
    pass


class UnknownVertex(GraphError):
    pass


class IllegalTransition(GraphError):
    pass


class MessageAlreadyConsumed(GraphError):
    pass


class UnknownMessage(GraphError):
    pass


class PersistedDependsOnAborted(GraphError):
    pass


class TraceFormatError(GraphError):
    pass


# --- orchestration / entities ----------------------------------------------

class OrchestrationError(DuraflowError):
    pass


class NondeterminismDetected(OrchestrationError):
    pass


class HistoryCorrupt(OrchestrationError):
    pass


class UnknownOperation(OrchestrationError):
    pass


class NestedLock(OrchestrationError):
    pass


class ActivityFailed(OrchestrationError):
    """Raised into an orchestration when an awaited task or entity op failed."""


# --- partition state machine ------------------------------------------------

class PartitionError(DuraflowError):
    pass


class NonContiguousEvent(PartitionError):
    pass


class UnknownTaskId(PartitionError):
    pass


class UnknownInstance(PartitionError):
    pass


class QueueGap(PartitionError):
    pass


class NoStepInProgress(PartitionError):
    pass


# --- storage -----------------------------------------------------------------

class StorageError(DuraflowError):
    pass


class LeaseLost(StorageError):
    pass


class LeaseHeld(StorageError):
    pass


class StorageFailure(StorageError):
    """Transient environment failure; callers may retry."""


class CorruptCheckpoint(StorageError):
    pass


class CorruptLog(StorageError):
    pass


# --- transport ----------------------------------------------------------------

class TransportFailure(DuraflowError):
    pass


# --- configuration / bench -----------------------------------------------------

class ConfigInvalid(DuraflowError):
    pass


class EmptySample(DuraflowError):
    pass
