"""Shared exception types.

Every failure mode surfaces as one of these, so the CLI can map exceptions
to its documented exit codes (usage/contract = 1, data/format = 2,
numeric fault = 3).
"""


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class ShapeError(ContractError):
    """Operands have incompatible shapes; message names the op and shapes."""


class NumericFaultError(ArithmeticError):
    """A computation produced NaN/Inf or was aborted on a non-finite loss."""


class FormatError(ValueError):
    """A serialized container is malformed; message carries the byte offset."""


class DeterminismError(RuntimeError):
    """A function expected to be deterministic returned differing values."""


class PartitionError(ContractError):
    """A model parameter could not be classified into FP32/INT8 (fail closed)."""
