"""Exception hierarchy shared across the package."""


class GmaeError(Exception):
    """Base class for every error raised by this package."""


class DataError(GmaeError, ValueError):
    """Malformed or inconsistent input data."""


class FormatError(DataError):
    """A required file is missing or has the wrong layout."""


class ParseError(DataError):
    """A token or record could not be parsed."""


class IntegrityError(DataError):
    """Records parse individually but contradict each other."""


class ShapeError(GmaeError, ValueError):
    pass


class NumericError(GmaeError, ArithmeticError):
    pass


class ConfigError(GmaeError, ValueError):
    """Invalid hyperparameters or incompatible model/task settings."""


class CheckpointError(GmaeError):
    pass


class StateError(GmaeError, RuntimeError):
    pass
