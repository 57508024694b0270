"""Exception types raised across the package."""


class HetDiffError(Exception):
    """Base class for package errors."""


class ParameterError(HetDiffError, ValueError):
    """Invalid or infeasible parameters."""


class ShapeError(HetDiffError, ValueError):
    """Array shapes do not agree."""


class NumericDomainError(HetDiffError, ArithmeticError):
    """A computation left its numeric domain (degenerate covariance, NaN, ...)."""

    def __init__(self, message, index=None):
        super().__init__(message if index is None else f"{message} (at index {index})")
        self.index = index


class UndefinedInputError(HetDiffError, ValueError):
    """The quantity is undefined for this input (e.g. no unobserved states)."""


class ParseError(HetDiffError, ValueError):
    """Malformed record in a data file."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class ContractViolation(HetDiffError, ValueError):
    """A documented precondition does not hold."""


class UsageError(HetDiffError, RuntimeError):
    """An API was called out of order."""


class ConfigError(HetDiffError, ValueError):
    """Run configuration failed validation. ``problems`` lists every violation."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class SamplingError(NumericDomainError):
    """Numeric failure inside the reverse sampler, with (mode, step, state) provenance."""

    def __init__(self, message, mode=None, step=None, state=None):
        super().__init__(f"{message} [mode={mode}, step={step}, state={state}]")
        self.mode, self.step, self.state = mode, step, state
