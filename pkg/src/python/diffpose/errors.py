class DiffposeError(Exception):
    """Base class for every error raised by diffpose."""


class DegenerateInput(DiffposeError, ValueError):
    """A rotation or point configuration is too close to degenerate to process."""


class InvalidSchedule(DiffposeError, ValueError):
    pass


class OutOfRange(DiffposeError, ValueError):
    """A timestep or index lies outside its valid range."""


class DimensionMismatch(DiffposeError, ValueError):
    pass


class InvalidConfig(DiffposeError, ValueError):
    """A configuration value failed validation.

    The message always names the offending (dotted) field.
    """


class FormatError(DiffposeError, ValueError):
    """A persisted file is truncated, has the wrong version or inconsistent dimensions."""


class EmptyInput(DiffposeError, ValueError):
    pass


class NonFiniteLoss(DiffposeError, RuntimeError):
    """Training produced a NaN or infinite loss; carries the offending step report."""

    def __init__(self, message: str, step: int) -> None:
        super().__init__(message)
        self.step = step
