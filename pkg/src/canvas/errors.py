"""Exception types shared across the package."""

from __future__ import annotations


class InvalidArgument(ValueError):
    """A precondition on an argument was violated."""


class DegenerateInput(ValueError):
    """Input is well-formed but numerically degenerate (e.g. zero variance)."""


class NumericDivergence(ArithmeticError):
    """A non-finite value appeared during iteration."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class ParseError(ValueError):
    """Malformed file contents; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


class SpikeAbort(RuntimeError):
    """Training stopped after too many consecutive loss spikes."""

    def __init__(self, message: str, log: list | None = None):
        super().__init__(message)
        self.log = log or []
