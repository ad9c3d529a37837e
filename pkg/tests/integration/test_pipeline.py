"""Stage orchestration: workspace layout, upstream checks, manifests and reproducibility."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any

import pytest

from wsolkit.config import get_default_config, lineage_hash, merge_configs, stage_seed
from wsolkit.exceptions import ConfigMismatchError, MissingArtifactError
from wsolkit.logging import configure_logging
from wsolkit.pipeline import (
    PRODUCERS,
    STAGE_INPUTS,
    STAGE_RUNNERS,
    Workspace,
    check_upstream,
    derive_seed,
    execute_stage,
    file_hash,
)

SMALL = {
    "seed": 11,
    "data": {
        "num_images": 6,
        "num_test_images": 3,
        "image_width": 32,
        "image_height": 32,
        "objects_per_image": [1, 1],
        "object_size": [8, 12],
    },
    "proposals": {"scales": [8, 16], "jitter_boxes": 4, "max_per_image": 40},
    "classifier": {
        "input_size": 8,
        "conv1_filters": 3,
        "num_maps": 4,
        "iterations": 3,
        "batch_size": 3,
    },
}


def _config(**sections: Any) -> dict[str, Any]:
    configure_logging()
    return merge_configs(merge_configs(get_default_config(), SMALL), sections)


def _relative_outputs(outputs: dict[str, str], root: Path) -> dict[str, str]:
    return {str(Path(path).relative_to(root)): digest for path, digest in outputs.items()}


def test_every_stage_has_a_runner_and_known_inputs() -> None:
    assert set(STAGE_RUNNERS) == set(STAGE_INPUTS)
    for inputs in STAGE_INPUTS.values():
        assert set(inputs) <= set(PRODUCERS)


def test_workspace_prefers_external_inputs(tmp_path: Path) -> None:
    external = tmp_path / "elsewhere" / "manifest.json"
    config = {"paths": {"workdir": "ignored", "dataset": str(external)}}
    workspace = Workspace.from_config(config, tmp_path / "run")
    assert workspace.root == tmp_path / "run"
    assert workspace.train_manifest == external
    assert workspace.test_manifest == tmp_path / "run" / "data" / "test" / "manifest.json"
    assert workspace.manifest("mine") == tmp_path / "run" / "manifests" / "mine.json"


def test_file_hash_is_sha256(tmp_path: Path) -> None:
    path = tmp_path / "blob.bin"
    path.write_bytes(b"wsolkit" * 1000)
    assert file_hash(path) == hashlib.sha256(b"wsolkit" * 1000).hexdigest()


def test_derive_seed_is_stable_and_key_dependent() -> None:
    assert derive_seed(5, 0) == derive_seed(5, 0)
    assert derive_seed(5, 0) != derive_seed(5, 1)


def test_missing_input_names_the_producing_stage(tmp_path: Path) -> None:
    config = _config()
    with pytest.raises(MissingArtifactError) as exc:
        check_upstream("mine", config, Workspace.from_config(config, tmp_path))
    assert exc.value.stage == "train-cls"


def test_gen_data_is_reproducible_and_recorded(tmp_path: Path) -> None:
    config = _config()
    first = execute_stage("gen-data", config, workdir=tmp_path / "a")
    second = execute_stage("gen-data", config, workdir=tmp_path / "b")

    assert first.seed == stage_seed(config, "gen-data")
    assert first.lineage_hash == lineage_hash(config, "gen-data")
    assert _relative_outputs(first.outputs, tmp_path / "a") == _relative_outputs(
        second.outputs, tmp_path / "b"
    )

    recorded = json.loads((tmp_path / "a" / "manifests" / "gen-data.json").read_text("utf-8"))
    assert recorded["lineage_hash"] == first.lineage_hash
    assert recorded["config"]["seed"] == 11
    assert set(recorded["config"]) == {"seed", "data", "proposals"}


def test_seed_change_alters_generated_data(tmp_path: Path) -> None:
    first = execute_stage("gen-data", _config(), workdir=tmp_path / "a")
    second = execute_stage("gen-data", _config(seed=12), workdir=tmp_path / "b")
    assert _relative_outputs(first.outputs, tmp_path / "a") != _relative_outputs(
        second.outputs, tmp_path / "b"
    )


def test_upstream_lineage_is_checked(tmp_path: Path) -> None:
    config = _config()
    execute_stage("gen-data", config, workdir=tmp_path)
    changed = _config(data={"noise": 0.1})
    workspace = Workspace.from_config(changed, tmp_path)

    with pytest.raises(ConfigMismatchError) as exc:
        check_upstream("train-cls", changed, workspace)
    assert exc.value.upstream == "gen-data"

    check_upstream("train-cls", changed, workspace, force=True)
    # classifier settings are not part of the gen-data lineage
    check_upstream("train-cls", _config(classifier={"iterations": 4}), workspace)


def test_train_cls_records_its_input_hashes(tmp_path: Path) -> None:
    config = _config()
    execute_stage("gen-data", config, workdir=tmp_path)
    manifest = execute_stage("train-cls", config, workdir=tmp_path)
    train_manifest = tmp_path / "data" / "train" / "manifest.json"
    assert manifest.inputs == {str(train_manifest): file_hash(train_manifest)}
    assert (tmp_path / "classifier.wscm").exists()
