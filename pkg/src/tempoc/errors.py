"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called with arguments that break its contract."""


class ConfigError(ValueError):
    """A configuration file, CLI argument, or manifest could not be used."""


class CheckpointIntegrityError(RuntimeError):
    """A checkpoint file is corrupt or has an incompatible version."""
