"""Exception taxonomy shared by every odestab module.

Contract violations (bad shapes, bad configs, misuse) are kept distinct
from numerical failures (non-finite values, stiffness, exhausted budgets)
so the CLI can map them to different exit codes.
"""


class OdestabError(Exception):
    """Base class for all library errors."""


class ContractError(OdestabError):
    """A documented precondition was violated by the caller."""


class DimensionError(ContractError):
    """Array shapes do not compose."""


class StateError(ContractError):
    """An object was used outside its legal lifecycle (e.g. unfinalized tape)."""


class ConfigError(ContractError):
    """An experiment configuration is malformed or contains unknown keys."""

    def __init__(self, message, key=None, line=None):
        super().__init__(message)
        self.key = key
        self.line = line


class FormatError(ContractError):
    """A binary or text input file violates its declared format."""


class NumericError(OdestabError):
    """A computation produced non-finite values or an unsolvable system."""

    def __init__(self, message, stage=None):
        super().__init__(message)
        self.stage = stage


class StiffnessError(NumericError):
    """The adaptive controller drove the step size below h_min."""


class BudgetError(NumericError):
    """A step / recursion / query budget was exhausted."""
