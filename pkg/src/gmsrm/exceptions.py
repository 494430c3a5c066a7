"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Raised when an argument violates an operation's precondition."""


class ConfigurationError(RuntimeError):
    """Raised when model/checkpoint/variant configuration is inconsistent."""


class MaskGenerationError(RuntimeError):
    """Raised when an irregular mask cannot be steered into its ratio bucket."""
