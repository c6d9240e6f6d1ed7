"""Exception types shared across the package."""


class NodeLearnError(Exception):
    """Base class for all package errors."""


class ConfigurationError(NodeLearnError):
    """Invalid configuration value or incompatible option combination."""


class ShapeError(NodeLearnError):
    """Array dimensions inconsistent with the scenario's model geometry."""


class UsageError(NodeLearnError):
    """Operation called with arguments that violate its contract (e.g. empty batch)."""


class IngestionError(NodeLearnError):
    """Problem while loading external data; message carries the offending row."""


class CheckpointError(NodeLearnError):
    """Checkpoint file incompatible with the current run."""


class AuditError(NodeLearnError):
    """Energy bookkeeping failed to balance for some node."""
