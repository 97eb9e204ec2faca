class OptselError(Exception):
    """Base class for all errors raised by optsel."""


class ConfigError(OptselError, ValueError):
    """Bad configuration, shapes that do not line up, or invalid arguments."""


class SolverError(OptselError, ArithmeticError):
    """A linear solve could not be carried out."""


class StreamExhausted(OptselError):
    """The training stream ran out of samples before the run finished."""
