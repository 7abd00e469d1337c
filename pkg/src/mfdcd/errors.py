"""Error taxonomy shared by all modules.

Exit-code mapping (used by the CLI): ContractViolation -> 1,
FormatError / OSError -> 2, DivergenceError -> 3.
"""


class ContractViolation(ValueError):
    """A caller broke a documented precondition (bad shape, bad range, ...)."""


class FormatError(IOError):
    """A file does not conform to one of the binary/JSON formats we define."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""
