"""Exception types shared across the package."""


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class CapExceeded(RuntimeError):
    """A configured size cap (enumeration, DP window, step budget) was exceeded.

    The message always says which cap and what to use instead.
    """


class EmptySupport(RuntimeError):
    """A conditioning event has no localized completion."""


class NotReversible(RuntimeError):
    """Detailed balance failed; the message names a violating pair of states."""
