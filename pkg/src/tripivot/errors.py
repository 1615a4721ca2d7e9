"""Contract-violation errors shared across the package."""


class ContractViolation(ValueError):
    """A caller broke a documented precondition or invariant.

    The CLI maps these to exit code 1, printing the message as the
    diagnostic.  Subclassing ValueError keeps plain `except ValueError`
    working for library users.
    """


class QuarantineError(ContractViolation):
    """The gold audio-text set was touched by a stage that may not see it."""


class FrozenPivotError(ContractViolation):
    """An operation required a frozen encoder but got a trainable one."""
