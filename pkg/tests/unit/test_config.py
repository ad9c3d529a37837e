"""Tests for wsolkit configuration loading, validation and lineage hashing."""

from pathlib import Path

import pytest

from wsolkit.config import (
    PIPELINE_STAGES,
    apply_overrides,
    get_default_config,
    lineage_hash,
    load_config,
    merge_configs,
    stage_ancestors,
    stage_seed,
    validate_config,
)
from wsolkit.exceptions import ConfigError


def test_get_default_config_shape() -> None:
    config = get_default_config()

    assert config["seed"] == 0
    assert config["mining"]["mask_out"] == "in-out"
    assert config["mining"]["alpha"] == 5.0
    assert config["detect"]["score_threshold"] == 0.8
    assert config["detect"]["nms_iou"] == 0.5
    assert config["eval"]["ap_method"] == "all-points"
    assert config["mil"]["solver"] in ("sgd", "lbfgs")
    validate_config(config)


def test_merge_configs_deep_merge_overrides_nested_values() -> None:
    default = {"mining": {"top_m": 50, "alpha": 5.0}, "seed": 0}
    user = {"mining": {"alpha": 2.0}}

    merged = merge_configs(default, user)

    assert merged["mining"]["alpha"] == 2.0
    assert merged["mining"]["top_m"] == 50
    assert merged["seed"] == 0
    # Inputs are not mutated
    assert default["mining"]["alpha"] == 5.0


def test_load_config_without_file_returns_default(
    tmp_path: Path, monkeypatch: pytest.MonkeyPatch
) -> None:
    monkeypatch.delenv("WSOLKIT_SEED", raising=False)
    assert load_config(cwd=tmp_path) == get_default_config()


def test_load_config_picks_up_project_file(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.delenv("WSOLKIT_SEED", raising=False)
    (tmp_path / "wsolkit.yaml").write_text("seed: 7\nmining:\n  top_m: 5\n", encoding="utf-8")

    config = load_config(cwd=tmp_path)

    assert config["seed"] == 7
    assert config["mining"]["top_m"] == 5
    assert config["mining"]["alpha"] == 5.0


def test_load_config_explicit_missing_file_raises(tmp_path: Path) -> None:
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.yaml")


def test_load_config_rejects_unknown_section(tmp_path: Path) -> None:
    path = tmp_path / "bad.yaml"
    path.write_text("colour: blue\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="Unknown config sections"):
        load_config(path)


def test_load_config_rejects_non_mapping(tmp_path: Path) -> None:
    path = tmp_path / "bad.yaml"
    path.write_text("- 1\n- 2\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="mapping"):
        load_config(path)


def test_load_config_seed_env_override(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.setenv("WSOLKIT_SEED", "42")
    assert load_config(cwd=tmp_path)["seed"] == 42

    monkeypatch.setenv("WSOLKIT_SEED", "forty-two")
    with pytest.raises(ConfigError, match="WSOLKIT_SEED"):
        load_config(cwd=tmp_path)


@pytest.mark.parametrize(
    ("section", "key", "value"),
    [
        ("mining", "mask_out", "sideways"),
        ("mining", "top_m", 0),
        ("mil", "solver", "adam"),
        ("mil", "regularization", 0.0),
        ("detector", "bg_iou_low", 0.6),
        ("detect", "score_threshold", 1.5),
        ("eval", "ap_method", "coco"),
        ("data", "image_format", "jpeg"),
    ],
)
def test_validate_config_rejects_out_of_range(section: str, key: str, value: object) -> None:
    config = get_default_config()
    config[section][key] = value
    with pytest.raises(ConfigError):
        validate_config(config)


def test_fusion_weights_cannot_both_be_zero() -> None:
    config = get_default_config()
    config["mining"]["contrast_weight"] = 0.0
    config["mining"]["activation_weight"] = 0.0
    with pytest.raises(ConfigError, match="fusion weights"):
        validate_config(config)


def test_stage_ancestors_follow_pipeline_order() -> None:
    assert stage_ancestors("gen-data") == ["gen-data"]
    assert stage_ancestors("mil") == ["gen-data", "train-cls", "mine", "mil"]
    assert stage_ancestors("compare-maskout") == ["gen-data", "train-cls", "compare-maskout"]
    assert PIPELINE_STAGES[-1] == "report"
    with pytest.raises(ConfigError):
        stage_ancestors("paint")


def test_lineage_hash_only_depends_on_upstream_sections() -> None:
    base = get_default_config()
    changed = merge_configs(base, {"detector": {"iterations": 3}})

    # Upstream of the detector: unchanged.
    assert lineage_hash(base, "mine") == lineage_hash(changed, "mine")
    # The detector and everything downstream of it: changed.
    assert lineage_hash(base, "train-det") != lineage_hash(changed, "train-det")
    assert lineage_hash(base, "eval") != lineage_hash(changed, "eval")


def test_lineage_hash_depends_on_seed() -> None:
    base = get_default_config()
    reseeded = merge_configs(base, {"seed": 1})
    assert lineage_hash(base, "gen-data") != lineage_hash(reseeded, "gen-data")


def test_stage_seed_is_deterministic_and_distinct() -> None:
    config = get_default_config()
    assert stage_seed(config, "mine") == stage_seed(config, "mine")
    assert stage_seed(config, "mine") != stage_seed(config, "mil")


def test_apply_overrides_drops_none_values() -> None:
    config = get_default_config()
    merged, applied = apply_overrides(
        config, {"mining": {"top_m": 3, "alpha": None}, "mil": {"solver": None}}
    )

    assert merged["mining"]["top_m"] == 3
    assert merged["mining"]["alpha"] == config["mining"]["alpha"]
    assert applied == {"mining": {"top_m": 3}}


def test_apply_overrides_validates() -> None:
    with pytest.raises(ConfigError):
        apply_overrides(get_default_config(), {"mining": {"mask_out": "nowhere"}})
