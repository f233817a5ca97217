"""Exception hierarchy shared by all modules.

The CLI maps :class:`InvalidConfig` (and its subclasses) to exit code 2 and
:class:`InfeasibleSynthesis` to exit code 3.
"""


class ShieldkitError(Exception):
    """Base class for every error raised by the toolkit."""


class InvalidConfig(ShieldkitError):
    """A parameter or file is malformed or out of range."""


class InvalidInput(InvalidConfig):
    """A query does not match the object it is asked of (wrong length, bad id)."""


class InvalidPolicy(InvalidConfig):
    """A policy has an empty support or picks a disabled action."""


class MissingData(InvalidConfig):
    """A fitting cell or a required sample is absent."""


class InfeasibleSynthesis(ShieldkitError):
    """Synthesis produced no admissible shield (for example an infinite root value)."""


class InfeasibleState(InfeasibleSynthesis):
    """A shield was queried at a point where its allowed set is empty."""


class UndefinedQuotient(ShieldkitError):
    """The intention quotient is undefined because the agency is zero."""
