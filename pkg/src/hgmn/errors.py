"""Exception hierarchy shared by every hgmn module."""


class HgmnError(Exception):
    """Base class for all library errors."""


class DimensionError(HgmnError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(HgmnError, ValueError):
    """A precondition of an operation was violated."""


class NonFiniteError(HgmnError, ArithmeticError):
    """A computation produced NaN or Inf."""


class GraphValidationError(HgmnError, ValueError):
    """A graph document failed validation."""


class UnknownTypeError(GraphValidationError):
    pass


class SignatureError(GraphValidationError):
    pass


class RaggedFeaturesError(GraphValidationError):
    pass


class DuplicateNodeError(GraphValidationError):
    pass


class DuplicateEdgeError(GraphValidationError):
    pass


class GenerationError(HgmnError, RuntimeError):
    """Synthetic graph generation gave up after exhausting its retries."""


class TrainingDiverged(NonFiniteError):
    """Training hit a non-finite loss or gradient."""

    def __init__(self, message, epoch=None, worst_parameter=None):
        super().__init__(message)
        self.epoch = epoch
        self.worst_parameter = worst_parameter
