"""Exception types shared across the package."""


class DVPFError(Exception):
    """Base class for all package errors."""


class ValidationError(DVPFError, ValueError):
    """Input violates a documented precondition."""


class DomainError(ValidationError):
    """A quantity is undefined for the given input (e.g. KL with q_i = 0 < p_i)."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class CapacityError(DVPFError):
    """Problem size exceeds what the exact solver handles."""


class NumericError(DVPFError, FloatingPointError):
    """Non-finite values appeared during a forward pass or a training step."""

    def __init__(self, message, layer=None, step=None, component=None):
        super().__init__(message)
        self.layer = layer
        self.step = step
        self.component = component


class DivergenceError(DVPFError):
    """Training tripped the divergence guard."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history


class ParseError(ValidationError):
    """Malformed input file; ``line`` is 1-based."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
