"""Shared exception types.

The CLI maps these onto process exit codes: usage problems exit 1,
data/format problems exit 2, diverged training exits 3.
"""


class NfclError(Exception):
    """Base class for all library errors."""


class ShapeError(NfclError, ValueError):
    """Operands have incompatible shapes."""


class ContractError(NfclError, ValueError):
    """A documented precondition was violated."""


class ConfigError(NfclError, ValueError):
    """A model or experiment configuration is invalid."""


class UnknownCoordinateError(NfclError, KeyError):
    """A lookup-table model was queried with a coordinate it has no row for."""


class DegenerateInputError(NfclError, ValueError):
    """Input data admits no meaningful result (e.g. constant volume)."""


class FormatError(NfclError, ValueError):
    """A serialized file is malformed; message includes the byte offset."""


class TrainingDivergedError(NfclError, RuntimeError):
    """Loss became non-finite during optimization."""

    def __init__(self, iteration: int, message: str = ""):
        self.iteration = iteration
        super().__init__(message or f"non-finite loss at iteration {iteration}")
