"""Exception hierarchy shared by all fixq modules.

The CLI maps these onto exit codes: format errors -> 2, contract and
configuration errors -> 3, numeric errors (overflow, non-finite) -> 4.
"""


class FixqError(Exception):
    """Base class for all errors raised by fixq."""


class BundleFormatError(FixqError):
    """A tensor bundle is malformed (bad manifest, payload length, dtype)."""


class ContractError(FixqError):
    """An operation was called outside its contract (bad shapes, off-grid
    values, invalid codebook, unsupported axis roles)."""


class ConfigError(ContractError):
    """An unsupported combination of options was requested."""


class NumericError(FixqError):
    """Numeric failure: accumulator overflow, non-finite input or loss."""


class TrainingError(NumericError):
    """Non-finite loss during training; carries the iteration index."""

    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration
