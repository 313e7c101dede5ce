"""Exception hierarchy shared by every module of the package."""


class SECPError(Exception):
    """Base class for all package errors."""


class ConfigurationError(SECPError, ValueError):
    """Shapes, hyperparameters or plans that cannot be honoured."""


class DataError(SECPError, ValueError):
    """Label values or sample contents outside their valid range."""


class FormatError(SECPError, ValueError):
    """A binary file does not match its declared layout.

    ``offset`` is the byte position where parsing failed.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UsageError(SECPError, ValueError):
    """An API was called with arguments violating its contract."""


class NumericalError(SECPError, FloatingPointError):
    """An operation produced NaN or Inf."""


class TrainingDivergedError(NumericalError):
    """The training loss became non-finite."""

    def __init__(self, epoch, batch, lr, detail=""):
        msg = f"non-finite loss at epoch {epoch}, batch {batch}, lr {lr:.6g}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
        self.epoch = epoch
        self.batch = batch
        self.lr = lr
