"""Exception hierarchy shared by every gasfusion module.

The CLI maps ``GasFusionError`` subclasses to exit code 2; argument errors
exit with 64.
"""


class GasFusionError(Exception):
    """Base class for all domain errors."""


class InvalidShape(GasFusionError, ValueError):
    pass


class ShapeMismatch(GasFusionError, ValueError):
    pass


class InvalidRange(GasFusionError, ValueError):
    pass


class TapeMismatch(GasFusionError, ValueError):
    """A backward pass was given a tape that does not match its gradient."""


class InvalidRate(GasFusionError, ValueError):
    pass


class EmptySequence(GasFusionError, ValueError):
    pass


class InvalidLabel(GasFusionError, ValueError):
    pass


class InvalidDistribution(GasFusionError, ValueError):
    pass


class ModalityMissing(GasFusionError, ValueError):
    pass


class EmptyDataset(GasFusionError, ValueError):
    pass


class EmptyInput(GasFusionError, ValueError):
    pass


class SplitError(GasFusionError, ValueError):
    pass


class FormatError(GasFusionError):
    """A file on disk could not be parsed.

    ``path`` and ``line`` locate the problem when known.
    """

    def __init__(self, message: str, path=None, line: int | None = None):
        self.path = None if path is None else str(path)
        self.line = line
        where = ""
        if self.path is not None:
            where = self.path if line is None else f"{self.path}:{line}"
            where += ": "
        super().__init__(where + message)
