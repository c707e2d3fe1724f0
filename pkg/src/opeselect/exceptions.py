"""Exception types raised by opeselect."""


class OPEError(Exception):
    """Base class for all package errors."""


class DataError(OPEError, ValueError):
    """Logged data is malformed or violates a dataset invariant.

    Parameters
    ----------
    messages: list of str
        One message per problem found, each naming the offending row where
        one applies.
    """

    def __init__(self, messages):
        if isinstance(messages, str):
            messages = [messages]
        self.messages = list(messages)
        super().__init__("; ".join(self.messages))


class ConfigError(OPEError, ValueError):
    """A run configuration is missing keys or holds invalid values."""


class ModelFitError(OPEError, ValueError):
    """A nuisance model (outcome or propensity) cannot be fitted."""


class EstimatorError(OPEError, ValueError):
    """An estimator's preconditions do not hold for the given inputs."""


class ZeroGroundTruthError(OPEError, ValueError):
    """Relative error is undefined because the ground-truth value is zero."""
