"""Exception types shared across the package."""


class GSMVPSError(Exception):
    """Base class; ``code`` is the machine-readable tag printed by the CLI."""

    code = "ERROR"


class ParameterCorruptionError(GSMVPSError, ValueError):
    code = "PARAM_CORRUPT"


class ContractError(GSMVPSError, RuntimeError):
    code = "CONTRACT"


class InvalidPixelError(GSMVPSError, ValueError):
    code = "INVALID_PIXEL"


class DatasetError(GSMVPSError, ValueError):
    code = "BAD_DATASET"


class CheckpointError(GSMVPSError, ValueError):
    code = "BAD_CHECKPOINT"


class MissingVisibilityError(GSMVPSError, FileNotFoundError):
    code = "MISSING_VISIBILITY"


class NumericalError(GSMVPSError, FloatingPointError):
    code = "NUMERIC"
