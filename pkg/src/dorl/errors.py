"""Exception hierarchy shared across the package.

Each class carries the CLI exit code it maps to so the command-line layer can
translate failures without a lookup table.
"""


class DorlError(Exception):
    exit_code = 1


class ConfigError(DorlError, ValueError):
    exit_code = 2


class ShapeError(DorlError, ValueError):
    exit_code = 2


class DataError(DorlError, ValueError):
    exit_code = 3


class ParseError(DataError):
    pass


class StratificationError(DataError):
    pass


class NumericError(DorlError, FloatingPointError):
    exit_code = 4

    def __init__(self, op, message=None):
        self.op = op
        super().__init__(message or f"non-finite value produced by op '{op}'")


class UnsupportedOpError(DorlError, KeyError):
    exit_code = 2


class ContractError(DorlError, RuntimeError):
    exit_code = 2


class ModelStateError(DorlError, RuntimeError):
    exit_code = 2


class StageError(DorlError, RuntimeError):
    """A pipeline stage failed; wraps the original exception."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)
        super().__init__(f"stage '{stage}' failed: {cause}")
