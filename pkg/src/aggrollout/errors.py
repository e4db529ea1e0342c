"""Exception types shared across the package."""


class AggRolloutError(Exception):
    """Base class for all package errors."""


class ZeroLikelihood(AggRolloutError):
    """The observation has probability zero under the current belief and control."""


class CapacityExceeded(AggRolloutError):
    """A combinatorial object or work budget would exceed its configured limit."""


class NonConvergence(AggRolloutError):
    """An iterative solver hit its iteration cap before meeting the threshold."""


class BudgetExceeded(AggRolloutError):
    """A lookahead tree would exceed the configured node budget."""


class MetricUndefined(AggRolloutError):
    """The adaptation-completion metric is undefined (J0 == J1)."""


class ConfigError(AggRolloutError):
    """An experiment configuration failed validation."""
