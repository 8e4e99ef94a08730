"""Error codes, exceptions and structured outcomes for seqnas."""

from dataclasses import dataclass, field
from typing import Any, Dict, Optional


# Error code constants
class ErrorCode:
    """Error codes attached to every seqnas failure."""

    # Search-space errors
    INVALID_SPACE = "ERROR_INVALID_SPACE"
    PARSE = "ERROR_PARSE"
    ILLEGAL_OP = "ERROR_ILLEGAL_OP"
    SHAPE = "ERROR_SHAPE"

    # Numerical errors
    DOMAIN = "ERROR_DOMAIN"
    DIVERGENCE = "ERROR_DIVERGENCE"

    # Search errors
    INFEASIBLE = "ERROR_INFEASIBLE"
    CANDIDATE_FAILED = "ERROR_CANDIDATE_FAILED"

    # Input errors
    CONFIG = "ERROR_CONFIG"
    DATA_FORMAT = "ERROR_DATA_FORMAT"

    # Unknown errors
    UNKNOWN = "ERROR_UNKNOWN"


# Process exit codes used by the CLI
EXIT_OK = 0
EXIT_INVALID = 2
EXIT_INFEASIBLE = 3
EXIT_DIVERGENCE = 4


@dataclass
class ErrorInfo:
    """Structured error information for a failed evaluation."""

    code: str
    message: str
    recoverable: bool = True
    suggestion: str = ""
    details: Optional[Dict[str, Any]] = None

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for JSON serialization."""
        result = {
            "code": self.code,
            "message": self.message,
            "recoverable": self.recoverable,
            "suggestion": self.suggestion,
        }
        if self.details:
            result["details"] = self.details
        return result


@dataclass
class CandidateOutcome:
    """Result of evaluating one search candidate."""

    success: bool
    result: Any = None
    error: Optional[ErrorInfo] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for JSON serialization."""
        output = {
            "success": self.success,
            "metadata": self.metadata,
        }

        if self.success:
            output["result"] = self.result
        else:
            output["error"] = self.error.to_dict() if self.error else None

        return output

    @classmethod
    def success_result(
        cls, result: Any, metadata: Optional[Dict[str, Any]] = None
    ) -> "CandidateOutcome":
        """Create a successful outcome."""
        return cls(success=True, result=result, metadata=metadata or {})

    @classmethod
    def error_result(
        cls,
        code: str,
        message: str,
        recoverable: bool = False,
        suggestion: str = "",
        details: Optional[Dict[str, Any]] = None,
        metadata: Optional[Dict[str, Any]] = None,
    ) -> "CandidateOutcome":
        """Create a failed outcome."""
        return cls(
            success=False,
            error=ErrorInfo(
                code=code,
                message=message,
                recoverable=recoverable,
                suggestion=suggestion,
                details=details,
            ),
            metadata=metadata or {},
        )


# Custom exceptions
class SeqNASError(Exception):
    """Base class for all seqnas failures."""

    code = ErrorCode.UNKNOWN
    exit_code = EXIT_INVALID

    def __init__(
        self,
        message: str,
        suggestion: str = "",
        details: Optional[Dict[str, Any]] = None,
    ):
        super().__init__(message)
        self.message = message
        self.suggestion = suggestion
        self.details = details or {}


class SpaceValidationError(SeqNASError, ValueError):
    """Raised when a search-space definition is infeasible."""

    code = ErrorCode.INVALID_SPACE


class ArchParseError(SeqNASError, ValueError):
    """Raised when architecture text is malformed."""

    code = ErrorCode.PARSE

    def __init__(self, message: str, position: int, **kwargs: Any):
        super().__init__(f"{message} (at position {position})", **kwargs)
        self.position = position


class IllegalOperationError(SeqNASError, ValueError):
    """Raised when an operation is placed where it cannot run."""

    code = ErrorCode.ILLEGAL_OP


class ShapeError(SeqNASError, ValueError):
    """Raised when tensors or layer geometry do not line up."""

    code = ErrorCode.SHAPE

    def __init__(self, message: str, layer: Optional[int] = None, **kwargs: Any):
        super().__init__(message, **kwargs)
        self.layer = layer


class RegularizerDomainError(SeqNASError, ValueError):
    """Raised when the FLOPS regularizer is evaluated outside its domain."""

    code = ErrorCode.DOMAIN


class ConfigError(SeqNASError, ValueError):
    """Raised for missing or invalid configuration."""

    code = ErrorCode.CONFIG


class DataFormatError(SeqNASError, ValueError):
    """Raised when a dataset file or dataset geometry is invalid."""

    code = ErrorCode.DATA_FORMAT


class InfeasibleError(SeqNASError):
    """Raised when no legal architecture satisfies the FLOPS budget."""

    code = ErrorCode.INFEASIBLE
    exit_code = EXIT_INFEASIBLE


class DivergenceError(SeqNASError, ArithmeticError):
    """Raised when a training loss becomes non-finite."""

    code = ErrorCode.DIVERGENCE
    exit_code = EXIT_DIVERGENCE

    def __init__(self, message: str, epoch: int, **kwargs: Any):
        super().__init__(message, **kwargs)
        self.epoch = epoch


class CandidateFailure(SeqNASError):
    """Raised when a search candidate fails and the run aborts."""

    code = ErrorCode.CANDIDATE_FAILED
    exit_code = EXIT_DIVERGENCE

    def __init__(
        self,
        message: str,
        candidate_id: int,
        exit_code: int = EXIT_DIVERGENCE,
        **kwargs: Any,
    ):
        super().__init__(message, **kwargs)
        self.candidate_id = candidate_id
        self.exit_code = exit_code
