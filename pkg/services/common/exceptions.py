"""
Exception hierarchy for xview

Every failure raised by the engine, models, data layer and trainer derives
from XViewError so the CLI can map it to a clean message and exit code.
"""

from typing import Any, Dict, Optional, Sequence


class XViewError(Exception):
    """Base exception for xview"""

    def __init__(
        self,
        message: str,
        error_code: str = "INTERNAL_ERROR",
        details: Optional[Dict[str, Any]] = None,
    ):
        self.message = message
        self.error_code = error_code
        self.details = details or {}
        super().__init__(self.message)

    def to_dict(self) -> Dict[str, Any]:
        return {"code": self.error_code, "message": self.message, "details": self.details}


class DimensionError(XViewError):
    """Shape, channel or resolution mismatch"""

    def __init__(
        self,
        message: str,
        expected: Any = None,
        actual: Any = None,
        level: Optional[str] = None,
    ):
        details: Dict[str, Any] = {}
        if expected is not None:
            details["expected"] = _jsonable(expected)
        if actual is not None:
            details["actual"] = _jsonable(actual)
        if level is not None:
            details["level"] = level
        super().__init__(message, error_code="DIMENSION_ERROR", details=details)


class ConfigError(XViewError):
    """Invalid configuration value, key or variant"""

    def __init__(self, message: str, field: Optional[str] = None):
        super().__init__(
            message,
            error_code="CONFIG_ERROR",
            details={"field": field} if field else {},
        )


class ContractError(XViewError):
    """API used outside its preconditions"""

    def __init__(self, message: str, **details: Any):
        super().__init__(message, error_code="CONTRACT_ERROR", details=details)


class NonFiniteError(XViewError):
    """NaN or Inf where a finite value is required"""

    def __init__(
        self,
        message: str,
        op: Optional[str] = None,
        index: Optional[Sequence[int]] = None,
        step: Optional[int] = None,
        component: Optional[str] = None,
    ):
        details: Dict[str, Any] = {}
        if op is not None:
            details["op"] = op
        if index is not None:
            details["index"] = [int(i) for i in index]
        if step is not None:
            details["step"] = step
        if component is not None:
            details["component"] = component
        super().__init__(message, error_code="NON_FINITE", details=details)


class FormatError(XViewError):
    """Malformed PPM or checkpoint bytes"""

    def __init__(
        self,
        message: str,
        offset: int,
        expected: Optional[int] = None,
        actual: Optional[int] = None,
        path: Optional[str] = None,
    ):
        self.offset = offset
        details: Dict[str, Any] = {"offset": offset}
        if expected is not None:
            details["expected_bytes"] = expected
        if actual is not None:
            details["actual_bytes"] = actual
        if path is not None:
            details["path"] = path
        super().__init__(message, error_code="FORMAT_ERROR", details=details)


class DatasetError(XViewError):
    """Dataset directory is incomplete or inconsistent"""

    def __init__(self, message: str, sample_id: Optional[str] = None):
        self.sample_id = sample_id
        super().__init__(
            message,
            error_code="DATASET_ERROR",
            details={"id": sample_id} if sample_id else {},
        )


def _jsonable(value: Any) -> Any:
    if isinstance(value, tuple):
        return [_jsonable(v) for v in value]
    return value
