"""
Custom exceptions for the Variational Imaging Prior toolkit
"""

from fastapi import status
from typing import Optional, Dict, Any


class VariationalImagingException(Exception):
    """Base exception for variational imaging errors"""

    def __init__(
        self,
        message: str,
        error_code: str = "variational_imaging_error",
        status_code: int = status.HTTP_400_BAD_REQUEST,
        exit_code: int = 1,
        details: Optional[Dict[str, Any]] = None
    ):
        self.message = message
        self.error_code = error_code
        self.status_code = status_code
        self.exit_code = exit_code
        self.details = details or {}
        super().__init__(self.message)


class ConfigurationError(VariationalImagingException):
    """Invalid experiment or component configuration"""

    def __init__(self, message: str, field_errors: Optional[Dict[str, str]] = None):
        super().__init__(
            message=message,
            error_code="configuration_error",
            status_code=status.HTTP_422_UNPROCESSABLE_ENTITY,
            exit_code=2,
            details={"field_errors": field_errors}
        )


class GeneratorConfigError(ConfigurationError):
    """Deep Decoder geometry cannot be realized"""

    def __init__(self, message: str, output_size: Optional[Any] = None, seed_size: Optional[Any] = None):
        super().__init__(message, field_errors={"output_size": str(output_size), "seed_spatial_size": str(seed_size)})
        self.error_code = "generator_config_error"


class DatasetError(ConfigurationError):
    """Unknown or unreadable dataset"""

    def __init__(self, message: str, name: Optional[str] = None):
        super().__init__(message, field_errors={"name": name} if name else None)
        self.error_code = "dataset_error"


class ArtifactNotFoundError(ConfigurationError):
    """A required artifact of an earlier stage is missing"""

    def __init__(self, message: str, path: Optional[str] = None):
        super().__init__(message, field_errors={"path": path} if path else None)
        self.error_code = "artifact_not_found"
        self.status_code = status.HTTP_404_NOT_FOUND


class ShapeMismatchError(VariationalImagingException):
    """Operand shapes are incompatible"""

    def __init__(self, message: str, shapes: Optional[Any] = None):
        super().__init__(
            message=message,
            error_code="shape_mismatch",
            status_code=status.HTTP_422_UNPROCESSABLE_ENTITY,
            exit_code=2,
            details={"shapes": [list(s) for s in shapes] if shapes else None}
        )


class TapeError(VariationalImagingException):
    """Misuse of the differentiation tape"""

    def __init__(self, message: str):
        super().__init__(
            message=message,
            error_code="tape_error",
            status_code=status.HTTP_500_INTERNAL_SERVER_ERROR,
            exit_code=3
        )


class NumericalError(VariationalImagingException):
    """Numerical failure during computation"""

    def __init__(self, message: str, error_code: str = "numerical_error", details: Optional[Dict[str, Any]] = None):
        super().__init__(
            message=message,
            error_code=error_code,
            status_code=status.HTTP_422_UNPROCESSABLE_ENTITY,
            exit_code=3,
            details=details
        )


class NonFiniteError(NumericalError):
    """NaN or Inf produced by an operation"""

    def __init__(self, message: str, operation: Optional[str] = None):
        super().__init__(message, error_code="non_finite", details={"operation": operation})


class DomainError(NumericalError):
    """Input outside the domain of an operation (log/sqrt of negative, division by zero)"""

    def __init__(self, message: str, operation: Optional[str] = None):
        super().__init__(message, error_code="domain_error", details={"operation": operation})


class CholeskyError(NumericalError):
    """Covariance factorization failed"""

    def __init__(self, message: str):
        super().__init__(message, error_code="cholesky_error")


class ObjectiveError(NumericalError):
    """Non-finite ELBO proxy estimate"""

    def __init__(self, message: str, terms: Optional[Dict[str, float]] = None):
        super().__init__(message, error_code="objective_error", details={"terms": terms})


class TrainingDivergedError(NumericalError):
    """Training produced a non-finite objective"""

    def __init__(self, message: str, iteration: int, last_good: Optional[Any] = None):
        super().__init__(message, error_code="training_diverged", details={"iteration": iteration})
        self.iteration = iteration
        self.last_good = last_good


class ForwardModelError(VariationalImagingException):
    """Invalid measurement operator usage"""

    def __init__(self, message: str, kind: Optional[str] = None):
        super().__init__(
            message=message,
            error_code="forward_model_error",
            status_code=status.HTTP_422_UNPROCESSABLE_ENTITY,
            exit_code=2,
            details={"kind": kind}
        )


class RingOutOfBoundsError(VariationalImagingException):
    """Sampling ring leaves the image"""

    def __init__(self, message: str, center: Optional[Any] = None, radius: Optional[float] = None):
        super().__init__(
            message=message,
            error_code="ring_out_of_bounds",
            status_code=status.HTTP_422_UNPROCESSABLE_ENTITY,
            exit_code=2,
            details={"center": center, "radius": radius}
        )


class ArtifactFormatError(VariationalImagingException):
    """Malformed array, image or checkpoint file"""

    def __init__(self, message: str, path: Optional[str] = None):
        super().__init__(
            message=message,
            error_code="artifact_format_error",
            status_code=status.HTTP_422_UNPROCESSABLE_ENTITY,
            exit_code=2,
            details={"path": path}
        )
