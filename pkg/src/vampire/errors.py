"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ``DataError``/``ConfigError`` -> 2,
``NumericalError`` -> 3.
"""


class VampireError(Exception):
    pass


class ConfigError(VampireError, ValueError):
    """An invalid configuration value; the message names the field."""


class DataError(VampireError, ValueError):
    pass


class LoadError(DataError):
    pass


class PGMHeaderError(LoadError):
    pass


class ManifestError(LoadError):
    pass


class MissingFileError(LoadError, FileNotFoundError):
    pass


class CheckpointError(LoadError):
    pass


class DimensionError(VampireError, ValueError):
    pass


class StructuralError(VampireError, ValueError):
    pass


class PreconditionError(VampireError, ValueError):
    pass


class VocabularyError(VampireError, KeyError):
    pass


class MetricUndefined(VampireError, ArithmeticError):
    pass


class NumericalError(VampireError, FloatingPointError):
    pass


class OptimizerError(NumericalError):
    pass
