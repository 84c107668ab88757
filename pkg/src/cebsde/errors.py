"""Exception hierarchy shared by all solver components."""

from __future__ import annotations


class CEBSDEError(Exception):
    """Base class for every error raised by the package."""


class SizeExceeded(CEBSDEError, ValueError):
    pass


class StepOrder(CEBSDEError, ValueError):
    pass


class PartitionMismatch(CEBSDEError, ValueError):
    pass


class DimensionMismatch(CEBSDEError, ValueError):
    pass


class IllConditioned(CEBSDEError, ArithmeticError):
    pass


class InnerDivergence(CEBSDEError, ArithmeticError):
    pass


class OuterDivergence(CEBSDEError, ArithmeticError):
    pass


class StepSizeTooLarge(CEBSDEError, ValueError):
    pass


class TerminalConstraintViolated(CEBSDEError, ValueError):
    """Raised when E[xi - S_T | G_T] < 0 on some terminal atom."""

    def __init__(self, message: str, atom: int | None = None, margin: float | None = None):
        super().__init__(message)
        self.atom = atom
        self.margin = margin


class TerminalBelowBarrier(CEBSDEError, ValueError):
    pass


class MeasureInvalid(CEBSDEError, ValueError):
    pass


class PlateauOnly(CEBSDEError, RuntimeError):
    pass


class ConfigParseError(CEBSDEError, ValueError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        loc = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(message + loc)
        self.line = line
        self.column = column


class ConfigValidationError(CEBSDEError, ValueError):
    """Carries every validation problem found, each keyed by its config path."""

    def __init__(self, problems: list[tuple[str, str]]):
        self.problems = list(problems)
        lines = "; ".join(f"{key}: {msg}" for key, msg in self.problems)
        super().__init__(f"{len(self.problems)} config error(s): {lines}")


class HypothesisUnverified(CEBSDEError, RuntimeError):
    """Sampling found a counterexample to a hypothesis the harness relies on."""
