"""Exception types shared across the package."""


class ScanshareError(Exception):
    pass


class DimensionError(ScanshareError, ValueError):
    pass


class ConfigurationError(ScanshareError, ValueError):
    pass


class InputError(ScanshareError, ValueError):
    pass


class ValidationError(InputError):
    pass


class UsageError(ScanshareError, RuntimeError):
    pass


class LoadError(ScanshareError, IOError):
    pass


class FormatError(LoadError):
    pass


class UnsupportedVersionError(LoadError):
    pass


class MissingBaselineError(ScanshareError, KeyError):
    pass
