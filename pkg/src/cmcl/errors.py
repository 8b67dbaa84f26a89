"""Exception types shared across the package."""


class CmclError(Exception):
    """Base class for everything this package raises on purpose."""


class ShapeError(CmclError, ValueError):
    """Array dimensions do not line up; the message names both shapes."""


class ContractError(CmclError, ValueError):
    """A documented precondition was violated (empty batch list, non-scalar loss, ...)."""


class InsufficientSamplesError(CmclError, ValueError):
    """A batch is too small for the requested statistic."""


class DivergenceError(CmclError, ValueError):
    """KL divergence is infinite for the given distribution pair."""


class ProbeError(CmclError, RuntimeError):
    """A finite-difference probe produced a non-finite value."""


class FormatError(CmclError, ValueError):
    """A binary file does not parse; the message carries the byte offset."""


class VersionError(FormatError):
    """A binary file has an unsupported version tag."""


class ConfigError(CmclError, ValueError):
    """Invalid configuration; the message names the offending field."""


class NumericError(CmclError, RuntimeError):
    """A training step produced a non-finite loss; the message names the step."""
