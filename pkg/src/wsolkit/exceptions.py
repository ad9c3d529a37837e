"""Custom exception hierarchy for wsolkit."""

from __future__ import annotations

from pathlib import Path


class WsolkitError(Exception):
    """Base exception for all wsolkit errors."""

    def __init__(self, message: str, path: Path | None = None) -> None:
        self.message = message
        self.path = path
        super().__init__(self._format_message())

    def _format_message(self) -> str:
        if self.path:
            return f"{self.message} (path: {self.path})"
        return self.message


class ConfigError(WsolkitError):
    """Raised when configuration is invalid."""

    pass


class ConfigMismatchError(ConfigError):
    """Raised when an upstream artifact was produced under a different config lineage."""

    def __init__(self, stage: str, upstream: str, expected: str, found: str) -> None:
        self.stage = stage
        self.upstream = upstream
        self.expected = expected
        self.found = found
        super().__init__(
            f"Stage '{stage}' expects upstream '{upstream}' with config hash "
            f"{expected[:12]}, found {found[:12]}; rerun '{upstream}' or pass --force"
        )


class MissingArtifactError(WsolkitError):
    """Raised when a stage cannot find the artifact an upstream stage should have written."""

    def __init__(self, path: Path, stage: str) -> None:
        self.stage = stage
        super().__init__(f"Missing artifact, run `wsolkit {stage}` first", path)


class ParseError(WsolkitError):
    """Raised when an artifact file is malformed."""

    def __init__(self, message: str, path: Path | None = None, line: int | None = None) -> None:
        self.line = line
        super().__init__(message, path)

    def _format_message(self) -> str:
        location = str(self.path) if self.path is not None else ""
        if self.line is not None:
            location = f"{location}:{self.line}" if location else f"line {self.line}"
        if not location:
            return f"Parse error: {self.message}"
        return f"Parse error: {self.message} ({location})"


class GeometryError(WsolkitError):
    """Raised for degenerate or out-of-bounds boxes."""

    pass


class ModelError(WsolkitError):
    """Raised when a model is uninitialised, ill-shaped or used out of range."""

    pass


class TrainingError(WsolkitError):
    """Raised when an optimiser diverges."""

    def __init__(self, message: str, iteration: int) -> None:
        self.iteration = iteration
        super().__init__(f"{message} at iteration {iteration}")


class MilError(WsolkitError):
    """Raised when multiple-instance training preconditions fail."""

    pass


class DetectorError(WsolkitError):
    """Raised when the detector cannot be trained or applied."""

    pass
