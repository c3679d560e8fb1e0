"""Exception hierarchy shared across the package.

The CLI maps :class:`BundleMageError` subclasses to exit code 1; argument
problems surface through argparse with exit code 2.
"""


class BundleMageError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(BundleMageError, ValueError):
    pass


class ContractError(BundleMageError):
    """A documented precondition or postcondition did not hold."""


class ParseError(BundleMageError, ValueError):
    def __init__(self, path, lineno, message):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno


class DataError(BundleMageError):
    pass


class IntegrityError(DataError):
    pass


class SplitError(DataError):
    pass


class SamplingError(BundleMageError):
    def __init__(self, message, deficit):
        super().__init__(message)
        self.deficit = deficit


class ProtocolError(BundleMageError):
    pass


class ConfigError(BundleMageError):
    pass


class TrainingAborted(BundleMageError):
    def __init__(self, epoch, phase, batch, message="non-finite loss"):
        super().__init__(f"{message} at epoch {epoch}, phase {phase}, batch {batch}")
        self.epoch = epoch
        self.phase = phase
        self.batch = batch


class UnknownIdError(BundleMageError, LookupError):
    def __init__(self, kind, tokens):
        tokens = list(tokens)
        super().__init__(f"unknown {kind} id(s): {', '.join(map(str, tokens))}")
        self.kind = kind
        self.tokens = tokens
