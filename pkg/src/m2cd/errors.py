"""Exception types shared across the toolkit.

Each error carries a stable ``category`` string that the CLI prints as a
machine-parseable one-liner before exiting nonzero.
"""


class M2cdError(Exception):
    category = "error"


class ConfigurationError(M2cdError, ValueError):
    category = "config-error"


class DataError(M2cdError, ValueError):
    category = "data-error"


class ShapeError(M2cdError, ValueError):
    category = "input-shape-mismatch"


class CheckpointError(M2cdError, RuntimeError):
    category = "checkpoint-error"


class CheckpointNotFoundError(CheckpointError):
    category = "checkpoint-not-found"


class TrainingInstabilityError(M2cdError, RuntimeError):
    category = "training-instability"
