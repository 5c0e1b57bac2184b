"""Exception hierarchy shared by all modules."""


class ContractError(ValueError):
    """An input violated a documented precondition."""


class EmptyTallyError(ContractError):
    """A vote was requested on a tally with no mass."""


class CapacityError(ContractError):
    """The requested computation exceeds a documented size limit."""


class UnfittableCurveError(ContractError):
    """A self-consistency curve carries no slope information."""


class StreamExhaustedError(ContractError):
    """A stream step was requested after the last question."""


class BudgetExhaustedError(ContractError):
    """Selection was requested with no remaining budget."""


class TraceSourceError(RuntimeError):
    """A trace source failed transiently; the draw may be retried."""


class PoolParseError(ValueError):
    """A trace-pool file is malformed."""

    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


class ShortfallError(CapacityError):
    """A trace pool holds fewer traces than a run needs."""
