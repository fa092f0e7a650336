from typing import Any, Dict, Optional


class KatanaError(Exception):
    """Base exception for all katana-lab errors."""

    def __init__(self, message: str, stage: Optional[str] = None, detail: Optional[str] = None):
        super().__init__(message)
        self.stage = stage
        self.detail = detail

    def __str__(self):
        parts = [super().__str__()]
        if self.stage:
            parts.append(f"({self.stage})")
        if self.detail:
            parts.append(f"- {self.detail[:200]}")
        return " ".join(parts)

    def to_record(self) -> Dict[str, Any]:
        """Machine-readable form, printed by the CLI as one JSON line."""
        record: Dict[str, Any] = {
            "error": type(self).__name__,
            "message": self.args[0] if self.args else "",
        }
        if self.stage:
            record["stage"] = self.stage
        if self.detail:
            record["detail"] = self.detail
        return record


class ShapeError(KatanaError):
    """Tensor shape does not match what an operation or layer expects."""

    def __init__(self, node: str, expected, actual):
        super().__init__(
            f"shape mismatch at '{node}': expected {tuple(expected)}, got {tuple(actual)}",
            stage=node,
        )
        self.node = node
        self.expected = tuple(expected)
        self.actual = tuple(actual)


class GradientError(KatanaError):
    """Backward requested without a forward pass, or a non-finite gradient or loss."""


class TrainingError(KatanaError):
    """Training could not run or diverged."""


class ConfigError(KatanaError):
    """Configuration file or value is invalid."""

    def __init__(self, message: str, field: Optional[str] = None, line: Optional[int] = None):
        where = []
        if field:
            where.append(f"field '{field}'")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(message, stage="config", detail=", ".join(where) or None)
        self.field = field
        self.line = line

    def to_record(self) -> Dict[str, Any]:
        record = super().to_record()
        if self.field:
            record["field"] = self.field
        if self.line is not None:
            record["line"] = self.line
        return record


class FormatError(KatanaError):
    """Binary file has a bad magic, unsupported version, is truncated or carries mismatched metadata."""

    def __init__(self, message: str, path: Optional[str] = None, offset: Optional[int] = None):
        detail = None
        if path is not None:
            detail = path if offset is None else f"{path} @ byte {offset}"
        elif offset is not None:
            detail = f"byte {offset}"
        super().__init__(message, stage="format", detail=detail)
        self.path = path
        self.offset = offset


class DatasetError(KatanaError):
    """Dataset is empty, inconsistent, or cannot be split as requested."""


class LayoutError(KatanaError):
    """TTA feature matrix does not match a KATANA model's layout."""

    def __init__(self, message: str, expected: Optional[Dict[str, Any]] = None,
                 actual: Optional[Dict[str, Any]] = None):
        detail = None
        if expected is not None or actual is not None:
            detail = f"expected {expected}, actual {actual}"
        super().__init__(message, stage="katana", detail=detail)
        self.expected = expected or {}
        self.actual = actual or {}


class ProtocolError(KatanaError):
    """Evaluation protocol violated, e.g. test-split samples reached a KATANA fit."""


class CacheError(KatanaError):
    """Logits cache could not be read or written."""
