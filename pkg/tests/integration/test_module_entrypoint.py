"""`python -m wsolkit` entry point."""

import sys

import pytest

from wsolkit.__main__ import main


def test_python_module_entrypoint_help(monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.setattr(sys, "argv", ["wsolkit", "--help"])
    with pytest.raises(SystemExit) as exc:
        main()
    assert exc.value.code == 0
