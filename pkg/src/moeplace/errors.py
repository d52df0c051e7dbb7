"""Exception types shared across the package."""


class TraceFormatError(ValueError):
    """A trace file line could not be parsed."""

    def __init__(self, message, lineno=None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class IntegrityError(ValueError):
    """Inputs parse but violate a structural invariant (duplicates, ranges, shape mismatch)."""


class InfeasibleGroupingError(ValueError):
    """Group-size bounds cannot be satisfied for the requested number of groups."""
