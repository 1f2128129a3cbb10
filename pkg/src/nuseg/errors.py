"""Exception hierarchy shared by the library and the CLI.

Every error carries an ``exit_code`` that the command line front-end maps
directly onto the process exit status.
"""


class NusegError(Exception):
    exit_code = 1


class ConfigError(NusegError, ValueError):
    exit_code = 2


class DimensionError(NusegError, ValueError):
    """Operands do not share the required shape."""

    exit_code = 3


class DomainError(NusegError, ValueError):
    """Values fall outside the admissible range (e.g. probabilities outside [0, 1])."""

    exit_code = 3


class DegenerateAnnotationError(NusegError, ValueError):
    """Annotations carry no foreground at all."""

    exit_code = 3


class UndefinedMetricError(NusegError, ValueError):
    exit_code = 3


class FormatError(NusegError, IOError):
    """A volume file or corpus directory is malformed."""

    exit_code = 3

    def __init__(self, path, message):
        self.path = str(path)
        super().__init__(f"{path}: {message}")


class UnsupportedDtypeError(FormatError):
    pass


class NumericalError(NusegError, ArithmeticError):
    exit_code = 4


class TrainingDivergedError(NumericalError):
    def __init__(self, epoch, message="non-finite loss"):
        self.epoch = epoch
        super().__init__(f"training diverged at epoch {epoch}: {message}")
