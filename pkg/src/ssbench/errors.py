"""Exception types shared across the workbench."""


class SSBenchError(Exception):
    """Base class for all workbench errors."""


class ConfigError(SSBenchError):
    """Invalid or infeasible configuration / parameters."""


class ShapeError(SSBenchError):
    """Mismatched widths, ledgers, or vector lengths."""


class TapeError(SSBenchError):
    """A replayed random tape ran out of bits."""


class RangeError(SSBenchError):
    """A clear value does not fit the requested word width."""


class DomainError(SSBenchError):
    """Argument outside a function's mathematical domain."""


class BudgetError(SSBenchError):
    """A statistical-distance term exceeds its allocation."""

    def __init__(self, term, message):
        self.term = term
        super().__init__(message)


class AbortUnfilled(SSBenchError):
    """A coin stack failed to accumulate its target number of coins."""


class AbortRejection(SSBenchError):
    """Rejection sampling accepted fewer samples than requested."""


class CheckRejected(SSBenchError):
    """The in-circuit distribution check flagged the aggregated noise."""


class ParseError(SSBenchError):
    """Malformed scenario config or CSV input."""
