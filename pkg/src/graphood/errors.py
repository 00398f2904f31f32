"""Exception types shared across the package."""


class GraphOodError(Exception):
    """Base class for all package errors."""


class ParseError(GraphOodError):
    """Malformed or inconsistent dataset files."""


class ArgumentError(GraphOodError, ValueError):
    """A precondition on an operation's arguments was violated."""


class ShapeError(GraphOodError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class NumericalError(GraphOodError, ArithmeticError):
    """A computation produced or encountered non-finite values."""


class StateError(GraphOodError, RuntimeError):
    """An operation was invoked on a model missing required state."""


class ConfigError(GraphOodError, ValueError):
    """Invalid, unknown, or missing configuration keys."""
