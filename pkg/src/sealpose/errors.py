"""Exception and warning types shared across the package."""


class ContractError(ValueError):
    """An argument violates a documented precondition (shape, name, range)."""


class StructuralError(ValueError):
    """A graph-like structure is malformed (cycle, disconnected tree)."""


class NumericError(ArithmeticError):
    """A non-finite or otherwise unusable number was encountered."""


class DiagnosticWarning(UserWarning):
    """Emitted when an input is skipped or excluded instead of raising."""
