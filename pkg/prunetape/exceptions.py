class PruneTapeError(Exception):
    """Base exception for all PruneTape errors."""
    pass

class ShapeMismatchError(PruneTapeError, ValueError):
    """Exception raised when operand shapes do not conform for an operation."""
    pass

class NonScalarLossError(PruneTapeError, ValueError):
    """Exception raised when backward is requested from a non-scalar node."""
    pass

class InvalidMaskError(PruneTapeError, ValueError):
    """Exception raised when a mask violates its projection contract (negative entry, bit mask outside [0, 1])."""
    pass

class InvalidRangeError(PruneTapeError, ValueError):
    """Exception raised for an empty quantization range or a non-positive bit width."""
    pass

class UnsupportedParameterizationError(PruneTapeError, ValueError):
    """Exception raised when a cost model or surrogate is not defined for a layer kind."""
    pass

class DecompositionError(PruneTapeError, ArithmeticError):
    """Exception raised when the SVD warm start cannot be computed."""
    pass

class NonFiniteGradientError(PruneTapeError, ArithmeticError):
    """Exception raised when a gradient contains NaN/Inf. The optimizer step is aborted."""

    def __init__(self, parameter_name: str):
        super().__init__(f"Non-finite gradient for parameter '{parameter_name}'. Step aborted.")
        self.parameter_name = parameter_name

class TrainingDivergedError(PruneTapeError, ArithmeticError):
    """Exception raised when the training loss becomes NaN/Inf.

    Carries the last good parameter state and the history recorded so far.
    """

    def __init__(self, message: str, step: int, last_good_state=None, history=None):
        super().__init__(message)
        self.step = step
        self.last_good_state = last_good_state
        self.history = history or []

class DeadLayerError(PruneTapeError):
    """Exception raised when a mask dies mid-training under the 'abort' policy."""
    pass

class DegenerateModelError(PruneTapeError):
    """Exception raised when extraction meets a layer with no surviving neuron, rank or bit."""
    pass

class TableFormatError(PruneTapeError, ValueError):
    """Exception raised when a latency table file is malformed."""
    pass

class TableCoverageError(PruneTapeError, ValueError):
    """Exception raised when a latency table does not cover the dims of a model."""
    pass

class DatasetFormatError(PruneTapeError, ValueError):
    """Exception raised when an IDX file is malformed."""
    pass

class ConfigError(PruneTapeError, ValueError):
    """Exception raised for an invalid or missing configuration."""
    pass

class CatalogNotFoundError(PruneTapeError):
    """Exception raised when a run catalog cannot be found in a directory."""
    pass

class CatalogVersionError(PruneTapeError):
    """Exception raised when a run catalog was written with a different schema version."""
    pass

class BatchSizeError(PruneTapeError, ValueError):
    """Exception raised when batch statistics are requested for a batch that is too small."""
    pass

class LabelRangeError(PruneTapeError, ValueError):
    """Exception raised when a class label falls outside the logits' class range."""
    pass
