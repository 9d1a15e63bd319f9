class InvalidArgument(ValueError):
    """Raised when inputs violate an operation's preconditions."""


class NumericFailure(ArithmeticError):
    """Raised when a factorization or solve fails.

    ``index`` carries the offending (ordered) index when one is known.
    """

    def __init__(self, message, index=None, field=None):
        super().__init__(message)
        self.index = index
        self.field = field
