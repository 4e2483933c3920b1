"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericError(ValueError):
    """Non-finite or otherwise invalid numeric input."""


class ConfigError(ValueError):
    """A configuration violates one of its invariants."""


class WiringError(ValueError):
    """Feature maps fed to an attention block do not line up."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class DataFormatError(ValueError):
    """A serialized file does not match its declared format."""


class ChecksumError(DataFormatError):
    """Stored checksum does not match the payload."""


class TrainingDiverged(RuntimeError):
    """Loss or gradients became non-finite during training."""
