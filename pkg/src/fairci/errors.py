class InvalidParameterError(ValueError):
    """An argument violates an operation's precondition."""


class UndefinedMetricError(ValueError):
    """A metric is undefined on the given data (e.g. a class is absent)."""


class ConfigError(ValueError):
    """An experiment configuration field is invalid; the message names the field path."""
