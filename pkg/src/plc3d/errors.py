"""Exception types shared across the toolkit."""


class PLCError(Exception):
    """Base class for all toolkit errors."""


class InvalidInput(PLCError, ValueError):
    pass


class InvalidConfig(PLCError, ValueError):
    pass


class NotFound(PLCError, KeyError):
    def __str__(self):
        # KeyError quotes its argument; keep messages readable
        return str(self.args[0]) if self.args else ""


class DegenerateMean(PLCError, ArithmeticError):
    pass


class PlacementFailure(PLCError, RuntimeError):
    pass


class InvalidParams(PLCError, ValueError):
    pass


class DivergedError(PLCError, RuntimeError):
    """Raised when training produces a non-finite loss."""

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"loss diverged at step {step}")
