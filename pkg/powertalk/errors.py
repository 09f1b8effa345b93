"""Exception types raised by the powertalk library.

Library code raises; only the CLI entry point turns these into exit codes.
"""


class PowerTalkError(Exception):
    """Base class for every error raised by powertalk."""


class InvalidParameterError(PowerTalkError, ValueError):
    """A parameter is outside its admissible range."""


class BudgetUnreachableError(PowerTalkError):
    """No feasible constellation attains the requested power-deviation budget."""


class UnsupportedSizeError(PowerTalkError):
    """The requested number of units is outside the supported code table."""


class NoPreimageError(PowerTalkError):
    """A sum sequence has no preimage under the uniquely decodable code."""


class ConfigError(PowerTalkError):
    """Configuration file or override is malformed or names an unknown key."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key
