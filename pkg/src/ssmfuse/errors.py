"""Exception types shared across the package."""


class SsmfuseError(Exception):
    """Base class for all package errors."""


class ValidationError(SsmfuseError, ValueError):
    """Bad user input: malformed records, configs or arguments."""


class ConfigError(ValidationError):
    """A configuration value is out of its allowed range."""


class DimensionError(ValidationError):
    """Tensor shapes do not line up."""


class ContractError(SsmfuseError):
    """A precondition of an operation was violated by the caller."""


class SchemaError(ValidationError):
    """A serialized record or file does not follow its schema."""


class TrainingDivergedError(SsmfuseError, RuntimeError):
    """Loss became non-finite during training."""
