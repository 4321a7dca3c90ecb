"""Exception hierarchy shared across the package.

``InputError`` subclasses mark problems with user-supplied files or
configuration (the CLI maps them to exit code 2); everything else is a
runtime failure (exit code 1).
"""


class SpeckleformerError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(SpeckleformerError):
    """Operands have incompatible shapes; the message names both."""


class ContractError(SpeckleformerError):
    """An operation was called outside its documented contract."""


class GraphError(SpeckleformerError):
    """Degenerate graph structure, e.g. an all-zero adjacency row."""


class InputError(SpeckleformerError):
    """Bad user input: missing files, malformed configs or checkpoints."""


class DataError(InputError):
    """Problem reading or interpreting a dataset file."""


class ConfigError(InputError):
    """Invalid or unknown configuration keys/values."""


class CheckpointError(InputError):
    """Corrupt, truncated, or mismatched checkpoint file."""


class TrainingAbort(SpeckleformerError):
    """Training hit a non-finite loss; message carries epoch/batch."""
