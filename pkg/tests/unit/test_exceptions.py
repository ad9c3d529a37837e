"""Tests for the wsolkit exception hierarchy."""

from pathlib import Path

from wsolkit.exceptions import (
    ConfigError,
    ConfigMismatchError,
    GeometryError,
    MissingArtifactError,
    ParseError,
    TrainingError,
    WsolkitError,
)


def test_wsolkit_error_with_path() -> None:
    path = Path("/tmp/mined.csv")
    err = WsolkitError("Something went wrong", path)
    assert "Something went wrong" in str(err)
    assert str(path) in str(err)
    assert err.path == path


def test_wsolkit_error_without_path() -> None:
    err = WsolkitError("Something went wrong")
    assert str(err) == "Something went wrong"
    assert err.path is None


def test_config_mismatch_is_config_error() -> None:
    err = ConfigMismatchError("mil", "mine", "a" * 64, "b" * 64)
    assert isinstance(err, ConfigError)
    assert "'mil'" in str(err)
    assert "aaaaaaaaaaaa" in str(err)
    assert "--force" in str(err)
    assert err.upstream == "mine"


def test_missing_artifact_names_producer() -> None:
    err = MissingArtifactError(Path("run/mined.csv"), "mine")
    assert "wsolkit mine" in str(err)
    assert "run/mined.csv" in str(err)
    assert err.stage == "mine"


def test_parse_error_location() -> None:
    assert str(ParseError("bad row", Path("x.csv"), 3)) == "Parse error: bad row (x.csv:3)"
    assert str(ParseError("bad row", line=3)) == "Parse error: bad row (line 3)"
    assert str(ParseError("bad row")) == "Parse error: bad row"


def test_training_error_iteration() -> None:
    err = TrainingError("Loss became NaN", 17)
    assert err.iteration == 17
    assert "iteration 17" in str(err)


def test_hierarchy() -> None:
    for cls in (ConfigError, GeometryError, ParseError, MissingArtifactError):
        assert issubclass(cls, WsolkitError)
