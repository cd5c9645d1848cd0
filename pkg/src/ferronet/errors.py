"""Exception types shared across the package."""


class ContractError(ValueError):
    """A precondition of an operation was violated (bad shape, bad argument)."""


class DataError(RuntimeError):
    """A dataset file is missing, malformed or inconsistent."""


class NumericalError(RuntimeError):
    """A non-finite value appeared during training."""


class CheckpointError(RuntimeError):
    """A checkpoint could not be read back faithfully."""


class ConfigError(ContractError):
    """A training or ablation configuration is invalid."""
