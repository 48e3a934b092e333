"""Exception types shared across the package."""


class VarmaeError(Exception):
    """Base class for all package errors."""


class DimensionError(VarmaeError):
    """Tensor extents do not satisfy an operation's shape contract."""


class ConfigurationError(VarmaeError):
    """A configuration value is invalid or inconsistent."""


class ContractError(VarmaeError):
    """A caller violated an operation's precondition."""


class BoundsError(VarmaeError):
    """An index lies outside its valid range."""


class UnknownModalityError(VarmaeError):
    """A modality id is not part of the catalog."""


class TransferError(VarmaeError):
    """Pretrained weights are incompatible with the target model."""


class DivergenceError(VarmaeError):
    """Training produced a non-finite loss or gradient."""


class RvolError(VarmaeError):
    """Base class for volume-file parse errors."""


class MalformedHeaderError(RvolError):
    """The file header is missing, unreadable, or not valid JSON."""


class TruncatedPayloadError(RvolError):
    """The file ends before the declared payload is complete."""


class ChecksumError(RvolError):
    """Payload checksum does not match the stored value."""
