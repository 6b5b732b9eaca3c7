"""Exception types shared across the package."""

import numpy as np


class InvalidInputError(ValueError):
    """Malformed or out-of-domain input (shapes, bounds, labels)."""


class ConfigurationError(ValueError):
    """An experiment or method configuration that cannot be honoured."""


class UndefinedMetricError(ValueError):
    """A metric whose denominator vanishes (e.g. constant reference outputs)."""


class IllConditionedError(np.linalg.LinAlgError):
    """Cholesky factorization failed for every jitter on the ladder."""

    def __init__(self, message, ladder=()):
        super().__init__(f"{message} (jitter ladder tried: {list(ladder)})")
        self.ladder = tuple(ladder)
