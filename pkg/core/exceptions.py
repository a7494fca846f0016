"""
Exception hierarchy shared by every package in the project.

All errors carry an optional field / value / suggestion triple so that the
CLI can print an actionable multi-line message.
"""

from typing import Optional


class SamsVaeError(Exception):
    """Base error with enhanced context"""

    def __init__(self, message: str, field: Optional[str] = None, value: Optional[str] = None,
                 suggestion: Optional[str] = None):
        super().__init__(message)
        self.field = field
        self.value = value
        self.suggestion = suggestion

    @property
    def label(self) -> str:
        return "Error"

    def __str__(self):
        parts = [f"{self.label}: {super().__str__()}"]

        if self.field:
            parts.append(f"Field: {self.field}")
        if self.value is not None:
            parts.append(f"Value: {self.value}")
        if self.suggestion:
            parts.append(f"Suggestion: {self.suggestion}")

        return "\n".join(parts)


# =============================================================================
# CONFIGURATION
# =============================================================================

class ConfigError(SamsVaeError):
    """Configuration error"""

    @property
    def label(self) -> str:
        return "Configuration Error"


class ValidationError(ConfigError):
    """Configuration validation error"""
    pass


# =============================================================================
# NUMERICS
# =============================================================================

class ShapeError(SamsVaeError):
    """Operand shapes are incompatible for an operation"""

    def __init__(self, op: str, left, right, suggestion: Optional[str] = None):
        super().__init__(
            f"shape mismatch in '{op}': {tuple(left)} vs {tuple(right)}",
            field=op, suggestion=suggestion,
        )
        self.op = op
        self.shapes = (tuple(left), tuple(right))


class GradientError(SamsVaeError):
    """Backward pass cannot run"""
    pass


class DistributionError(SamsVaeError):
    """Invalid distribution parameters or support violation"""
    pass


class NonFiniteError(SamsVaeError):
    """An objective term evaluated to NaN or infinity"""

    def __init__(self, term: str, message: Optional[str] = None):
        super().__init__(message or f"non-finite value in term '{term}'", field=term)
        self.term = term


# =============================================================================
# DATA
# =============================================================================

class DatasetError(SamsVaeError):
    """Dataset ingestion or validation error"""

    @property
    def label(self) -> str:
        return "Dataset Error"


class MissingFileError(DatasetError):
    pass


class RaggedRowError(DatasetError):
    pass


class DosageValueError(DatasetError):
    pass


class NegativeCountError(DatasetError):
    pass


class EmptyLibraryError(DatasetError):
    pass


class SplitError(DatasetError):
    pass


# =============================================================================
# MODELS / TRAINING / EVALUATION
# =============================================================================

class ModelError(SamsVaeError):
    """Model or variational family misuse"""
    pass


class CheckpointError(SamsVaeError):
    """Checkpoint cannot be written or read"""
    pass


class TrainingError(SamsVaeError):
    """Training aborted"""

    def __init__(self, message: str, step: Optional[int] = None, term: Optional[str] = None):
        super().__init__(message, field=term, value=None if step is None else str(step),
                         suggestion="Lower the learning rate or check the input data")
        self.step = step
        self.term = term

    @property
    def label(self) -> str:
        return "Training Error"


class EvaluationError(SamsVaeError):
    """Evaluation metric is undefined for the given inputs"""
    pass


class StudyError(SamsVaeError):
    """A recovery-study grid cell failed"""
    pass
