"""Structured logging configuration for wsolkit."""

from __future__ import annotations

import logging
import sys
from pathlib import Path
from typing import Any

import structlog
from rich.console import Console
from rich.logging import RichHandler
from structlog.types import Processor


def configure_logging(verbose: bool = False, json_output: bool = False) -> None:
    """
    Configure structured logging for pipeline runs.

    Args:
        verbose: Enable DEBUG level logging (per-iteration losses, per-class MIL rounds)
        json_output: Emit one JSON object per event instead of console lines
    """
    log_level = logging.DEBUG if verbose else logging.INFO

    processors: list[Processor]
    if json_output:
        processors = [
            structlog.contextvars.merge_contextvars,
            structlog.processors.add_log_level,
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.processors.StackInfoRenderer(),
            structlog.processors.format_exc_info,
            structlog.processors.JSONRenderer(sort_keys=True),
        ]
        logging.basicConfig(format="%(message)s", stream=sys.stdout, level=log_level, force=True)
    else:
        console = Console(stderr=True)
        processors = [
            structlog.contextvars.merge_contextvars,
            structlog.processors.add_log_level,
            structlog.processors.TimeStamper(fmt="%H:%M:%S"),
            structlog.dev.ConsoleRenderer(colors=True),
        ]
        logging.basicConfig(
            format="%(message)s",
            handlers=[RichHandler(console=console, rich_tracebacks=True, markup=True)],
            level=log_level,
            force=True,
        )

    structlog.configure(
        processors=processors,
        wrapper_class=structlog.make_filtering_bound_logger(log_level),
        context_class=dict,
        logger_factory=structlog.PrintLoggerFactory(file=sys.stderr),
        cache_logger_on_first_use=False,
    )


def get_logger(name: str) -> structlog.BoundLogger:
    """Return a structured logger bound to ``name``."""
    return structlog.get_logger(name)


class LogContext:
    """Bind key/value context (stage, seed, class) for the duration of a block."""

    def __init__(self, **context: Any) -> None:
        self.context = context

    def __enter__(self) -> LogContext:
        structlog.contextvars.bind_contextvars(**self.context)
        return self

    def __exit__(self, *args: Any) -> None:
        structlog.contextvars.unbind_contextvars(*self.context)


def log_artifact(operation: str, path: Path, **extra: Any) -> None:
    """Log an artifact read or write with structured context."""
    logger = get_logger(__name__)
    logger.info(operation, path=str(path), **extra)


def log_error(error: Exception, context: dict[str, Any] | None = None) -> None:
    """Log an error with its type and message."""
    logger = get_logger(__name__)
    logger.error(
        "error",
        error_type=type(error).__name__,
        error_message=str(error),
        **(context or {}),
    )
