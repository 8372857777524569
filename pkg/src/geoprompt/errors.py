"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class GeoPromptError(Exception):
    exit_code = 1


class ConfigError(GeoPromptError, ValueError):
    exit_code = 2


class DataError(GeoPromptError):
    exit_code = 3


class IngestionError(DataError):
    pass


class SchemaError(DataError, ValueError):
    pass


class ProviderError(DataError):
    pass


class NumericError(GeoPromptError, FloatingPointError):
    exit_code = 4


class ShapeError(GeoPromptError, ValueError):
    exit_code = 2


class WiringError(ShapeError):
    pass


class LoadError(GeoPromptError):
    exit_code = 2


class CompatibilityError(LoadError):
    pass


class AlignmentError(GeoPromptError, ValueError):
    exit_code = 3
