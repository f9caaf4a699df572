"""Exception hierarchy shared by every xaikit module.

The CLI maps these onto process exit codes, so each class carries the code
it should produce.
"""


class XaiError(Exception):
    exit_code = 1


class ConfigurationError(XaiError, ValueError):
    """Caller-supplied settings violate an operation's preconditions."""

    exit_code = 1


class ContractError(XaiError, ValueError):
    """An API was called with arguments outside its contract."""

    exit_code = 1


class DataError(XaiError, ValueError):
    exit_code = 2


class EmptyInputError(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class StratificationError(DataError):
    pass


class TrainingError(DataError):
    pass


class IntegrityError(DataError):
    """A report violates an identity it is required to satisfy."""


class ValidationError(XaiError, ValueError):
    """A report payload does not match the schema of its plot kind."""

    exit_code = 2


class NumericalError(XaiError, ArithmeticError):
    exit_code = 3


class DegenerateNeighborhoodError(NumericalError):
    pass


class FeasibilityError(NumericalError):
    """Exact enumeration was requested beyond its configured size cap."""
