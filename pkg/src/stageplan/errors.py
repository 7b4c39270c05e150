"""Exception types shared across the package.

The CLI maps these onto its exit-code contract: anything a user can fix
(bad files, bad flags, infeasible requests) exits with code 2, everything
else with code 1.
"""


class StageplanError(Exception):
    """Base class for all package errors."""


class InputError(StageplanError):
    """Missing, empty, or structurally unusable input."""


class ParseError(InputError):
    """A record in an input file could not be parsed.

    Carries the one-based line number so CLI messages can point at it.
    """

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        prefix = ""
        if path is not None:
            prefix = f"{path}:"
        if line is not None:
            prefix += f"line {line}: "
        super().__init__(prefix + message)


class StatisticsError(StageplanError):
    """A corpus cannot be reduced to usable domain statistics."""


class AffinityError(StageplanError):
    """Invalid inputs to a pairwise affinity computation or matrix build."""


class ParameterError(StageplanError):
    """A numeric parameter violates its documented range."""


class CapabilityError(StageplanError):
    """The request exceeds what an implementation can do; the message
    names the alternative to use instead."""


class SynthesisError(StageplanError):
    """A synthetic data specification is infeasible as stated."""


class TrainingError(StageplanError):
    """Training produced non-finite values; carries stage/step context."""
