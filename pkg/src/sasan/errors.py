"""Shared exception types.

ContractError signals a violated call contract (bad shapes, invalid values),
ConfigurationError a bad user-supplied configuration, FormatError a corrupt
or unreadable file. The CLI maps all three to exit code 1.
"""


class SasanError(Exception):
    pass


class ContractError(SasanError, ValueError):
    pass


class ConfigurationError(SasanError, ValueError):
    pass


class FormatError(SasanError, ValueError):
    pass


class TrainingDiverged(SasanError, RuntimeError):
    """Raised when a training step produces a non-finite loss."""

    def __init__(self, message, breakdown=None):
        super().__init__(message)
        self.breakdown = dict(breakdown or {})
