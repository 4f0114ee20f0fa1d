"""Exception hierarchy.

Errors split into two families so that callers (the CLI in particular) can
tell a bad input apart from a numerical failure:

* :class:`ModelError` -- the inputs are inconsistent or out of range.
* :class:`NumericalError` -- valid inputs, but a solver or integrator failed.
"""


class SeqmonError(Exception):
    """Base class for every error raised by this package."""


class ModelError(SeqmonError, ValueError):
    pass


class DimensionMismatch(ModelError):
    pass


class NonSymmetricD(ModelError):
    """Diffusion matrix is not symmetric positive semi-definite."""


class InvalidParam(ModelError):
    pass


class NonPositiveThreshold(ModelError):
    pass


class ConfigError(ModelError):
    pass


class NumericalError(SeqmonError, ArithmeticError):
    pass


class NonFinite(NumericalError):
    pass


class NoConvergence(NumericalError):
    pass


class NotHurwitz(NumericalError):
    pass


class SingularSystem(NumericalError):
    pass


class ZeroDrift(NumericalError):
    pass


class EmptyEnsemble(NumericalError):
    pass


class TooFewSamples(NumericalError):
    pass
