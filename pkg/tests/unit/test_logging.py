"""Tests for structured logging helpers."""

from pathlib import Path

import pytest

from wsolkit.logging import LogContext, configure_logging, get_logger, log_artifact, log_error


def test_logging_helpers(monkeypatch: pytest.MonkeyPatch, tmp_path: Path) -> None:
    configure_logging(verbose=False, json_output=True)
    configure_logging(verbose=True, json_output=False)

    ctx_calls: list[tuple[str, object]] = []

    def _bind_contextvars(**kwargs: object) -> None:
        for k, v in kwargs.items():
            ctx_calls.append((k, v))

    def _unbind_contextvars(*keys: str) -> None:
        for key in keys:
            ctx_calls.append(("unbind", key))

    monkeypatch.setattr("structlog.contextvars.bind_contextvars", _bind_contextvars)
    monkeypatch.setattr("structlog.contextvars.unbind_contextvars", _unbind_contextvars)

    with LogContext(stage="mine", seed=3):
        pass

    assert ("stage", "mine") in ctx_calls
    assert ("seed", 3) in ctx_calls
    assert ("unbind", "stage") in ctx_calls
    assert ("unbind", "seed") in ctx_calls

    logger = get_logger(__name__)
    assert logger is not None

    log_artifact("write", tmp_path / "mined.csv", rows=12)
    log_error(RuntimeError("boom"), {"stage": "mil"})
