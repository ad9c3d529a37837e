"""Module entry point for `python -m wsolkit`."""

from __future__ import annotations

from .cli import app


def main() -> None:
    app(prog_name="wsolkit")


if __name__ == "__main__":
    main()
