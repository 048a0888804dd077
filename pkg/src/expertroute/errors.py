"""Exception types shared across the package."""


class ExpertRouteError(Exception):
    """Base class for all package errors."""


class ShapeError(ExpertRouteError):
    """Operand shapes are incompatible (dimension error)."""


class DomainError(ExpertRouteError):
    """Operand values are outside an operation's domain."""


class TapeError(ExpertRouteError):
    """Autodiff tape contract violated (non-scalar loss, reuse, double grad)."""


class NumericError(ExpertRouteError):
    """A numeric failure: non-finite loss or gradient, rejected step."""


class ConvergenceError(NumericError):
    """An iterative routine failed to converge within its budget."""


class ConfigError(ExpertRouteError):
    """Invalid configuration value or combination."""


class BundleError(ExpertRouteError):
    """Base class for persistence-container failures."""


class FormatVersionError(BundleError):
    """Bundle was written with an unsupported format version."""


class TruncatedArrayError(BundleError):
    """Bundle data file is shorter than its manifest promises."""


class FingerprintMismatchError(BundleError):
    """Bundle was produced against a different backbone."""


class MissingArtifactError(ExpertRouteError):
    """A pipeline stage needs an artifact that has not been built yet."""
