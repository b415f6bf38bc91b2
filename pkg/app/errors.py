"""
Exception hierarchy shared by every package.

Each error carries a stable ``error_type`` string and the process
``exit_code`` the CLI returns for it.
"""
from typing import Optional


class KPAlignError(Exception):
    error_type = "RUNTIME_ERROR"
    exit_code = 1

    def __init__(self, message: str, error_type: Optional[str] = None):
        super().__init__(message)
        self.message = message
        if error_type:
            self.error_type = error_type


class ConfigError(KPAlignError):
    """Invalid configuration; message carries the dotted field path."""
    error_type = "CONFIG_ERROR"
    exit_code = 2

    def __init__(self, message: str, field_path: Optional[str] = None):
        if field_path:
            message = f"{field_path}: {message}"
        super().__init__(message)
        self.field_path = field_path


class VariantError(ConfigError):
    error_type = "VARIANT_ERROR"


class DimensionError(KPAlignError):
    error_type = "DIMENSION_ERROR"


class BackwardError(KPAlignError):
    error_type = "BACKWARD_ERROR"


class GradCheckError(KPAlignError):
    error_type = "GRADCHECK_ERROR"

    def __init__(self, message: str, index: Optional[int] = None):
        super().__init__(message)
        self.index = index


class AnnotationError(KPAlignError):
    error_type = "ANNOTATION_ERROR"


class DatasetError(KPAlignError):
    error_type = "DATASET_ERROR"


class ManifestVersionError(DatasetError):
    error_type = "MANIFEST_VERSION_ERROR"
    exit_code = 2


class CheckpointError(KPAlignError):
    error_type = "CHECKPOINT_ERROR"


class CheckpointVersionError(CheckpointError):
    error_type = "CHECKPOINT_VERSION_ERROR"
    exit_code = 2


class CheckpointTruncatedError(CheckpointError):
    error_type = "CHECKPOINT_TRUNCATED"


class CheckpointShapeError(CheckpointError):
    error_type = "CHECKPOINT_SHAPE_MISMATCH"


class NonFiniteLossError(KPAlignError):
    error_type = "NON_FINITE_LOSS"

    def __init__(self, term: str, iteration: int):
        super().__init__(f"Loss term '{term}' is not finite at iteration {iteration}")
        self.term = term
        self.iteration = iteration
