"""Exception hierarchy shared by all pfqn modules."""


class PfqnError(Exception):
    """Base class for every error raised by pfqn."""

    exit_code = 3


class TopologyError(PfqnError, ValueError):
    exit_code = 2

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = list(diagnostics or [message])


class EmptyRoute(TopologyError):
    pass


class DuplicateQueueInRoute(TopologyError):
    pass


class UnknownQueueIndex(TopologyError):
    pass


class NoRoutes(TopologyError):
    pass


class ConfigError(PfqnError, ValueError):
    exit_code = 2


class ResourceCapError(PfqnError):
    exit_code = 4


class StateSpaceTooLarge(ResourceCapError):
    pass


class TableTooLarge(ResourceCapError):
    pass


class TableMiss(PfqnError, KeyError):
    pass


class UnstableNetwork(PfqnError):
    pass


class StateNotInSn(PfqnError, ValueError):
    pass


class DidNotConverge(PfqnError):
    pass


class NumericallySingular(PfqnError):
    pass


class SolverFault(PfqnError):
    """Two independent solution routes disagree beyond tolerance."""


class UnstableDrift(RuntimeWarning):
    """Simulated state spent a large share of time outside the truncation box."""
