"""Exception hierarchy shared by all tdfsim modules."""


class TdfsError(Exception):
    """Base class for every error raised by tdfsim."""


class DegenerateSet(TdfsError, ValueError):
    """Input vectors are linearly dependent below the requested tolerance."""


class NonSquare(TdfsError, ValueError):
    pass


class DimensionMismatch(TdfsError, ValueError):
    pass


class StateInvariantViolated(TdfsError, ArithmeticError):
    """A density matrix lost trace, Hermiticity or positivity beyond tolerance."""


class DimensionChangeCrossed(TdfsError, ValueError):
    """A frame was requested across an instant where the subspace dimension jumps."""


class DerivativeUnavailable(TdfsError, ValueError):
    pass


class EigenconditionViolated(TdfsError, ValueError):
    pass


class ConditionsViolated(TdfsError, ArithmeticError):
    pass


class EmptyKernel(TdfsError, ValueError):
    pass
