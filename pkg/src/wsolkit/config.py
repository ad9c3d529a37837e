"""Configuration management for wsolkit."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .exceptions import ConfigError

DEFAULT_CONFIG_NAME = "wsolkit.yaml"
SEED_ENV_VAR = "WSOLKIT_SEED"

MASK_OUT_STRATEGIES = ("in-out", "whole-out", "in")
AP_METHODS = ("all-points", "voc07")
MIL_SOLVERS = ("sgd", "lbfgs")
IMAGE_FORMATS = ("png", "raw")

# Stage name -> (config sections it consumes, direct upstream stages).
STAGES: dict[str, tuple[tuple[str, ...], tuple[str, ...]]] = {
    "gen-data": (("data", "proposals"), ()),
    "train-cls": (("classifier",), ("gen-data",)),
    "mine": (("mining",), ("train-cls",)),
    "mil": (("mil",), ("mine",)),
    "refine": (("refine",), ("mil",)),
    "train-det": (("detector",), ("refine",)),
    "detect": (("detect",), ("train-det",)),
    "eval": (("eval",), ("detect",)),
    "report": ((), ("eval",)),
    "compare-maskout": (("mining", "eval"), ("train-cls",)),
}
STAGE_ORDER = tuple(STAGES)
PIPELINE_STAGES = STAGE_ORDER[: STAGE_ORDER.index("report") + 1]


def load_config(config_path: Path | None = None, cwd: Path | None = None) -> dict[str, Any]:
    """
    Load configuration and deep-merge it over the defaults.

    An explicit ``config_path`` must exist and parse. Without one, ``wsolkit.yaml`` in
    ``cwd`` is used when present, otherwise the defaults are returned. The
    ``WSOLKIT_SEED`` environment variable overrides ``seed`` in every case.
    """
    if config_path is None:
        candidate = (cwd or Path.cwd()) / DEFAULT_CONFIG_NAME
        config_path = candidate if candidate.exists() else None

    config = get_default_config()
    if config_path is not None:
        if not config_path.exists():
            raise ConfigError("Config file not found", config_path)
        try:
            with open(config_path, encoding="utf-8") as f:
                user_config = yaml.safe_load(f) or {}
        except (yaml.YAMLError, OSError) as exc:
            raise ConfigError(f"Could not read config: {exc}", config_path) from exc
        if not isinstance(user_config, dict):
            raise ConfigError("Config root must be a mapping", config_path)
        unknown = sorted(set(user_config) - set(config))
        if unknown:
            raise ConfigError(f"Unknown config sections: {', '.join(unknown)}", config_path)
        config = merge_configs(config, user_config)

    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        try:
            config["seed"] = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {env_seed!r}") from exc

    validate_config(config)
    return config


def get_default_config() -> dict[str, Any]:
    """Return the default configuration."""
    return {
        "seed": 0,
        "runtime": {
            "threads": 1,
        },
        "paths": {
            "workdir": "wsolkit-run",
            "dataset": None,
            "proposals": None,
            "test_dataset": None,
            "test_proposals": None,
        },
        "data": {
            "num_images": 200,
            "num_test_images": 50,
            "image_width": 64,
            "image_height": 64,
            "num_classes": 2,
            "objects_per_image": [1, 2],
            "object_size": [16, 26],
            "clutter_density": 0.0,
            "noise": 0.02,
            "image_format": "png",
            "palette": None,
        },
        "proposals": {
            "scales": [14, 20, 28, 40],
            "aspect_ratios": [1.0],
            "stride_fraction": 0.5,
            "jitter_boxes": 40,
            "jitter_scale": 0.15,
            "max_per_image": 2000,
        },
        "classifier": {
            "input_size": 64,
            "conv1_filters": 16,
            "num_maps": 32,
            "learning_rate": 0.005,
            "iterations": 500,
            "batch_size": 32,
            "momentum": 0.0,
            "weight_decay": 0.0,
            "init_scale": 0.05,
        },
        "mining": {
            "top_m": 50,
            "alpha": 5.0,
            "contrast_weight": 10.0,
            "activation_weight": 1.0,
            "mask_out": "in-out",
            "batch_size": 64,
        },
        "mil": {
            "enabled": True,
            "outer_iterations": 10,
            "inner_epochs": 20,
            "learning_rate": 0.1,
            "regularization": 1e-3,
            "negative_cap": 2000,
            "select_threshold": 0.5,
            "solver": "sgd",
            "exhaustive_limit": 4096,
        },
        "refine": {
            "enabled": True,
            "expand": 0.25,
            "max_iterations": 20,
            "dump_masks": False,
        },
        "detector": {
            "learning_rate": 0.05,
            "iterations": 2000,
            "batch_size": 64,
            "fg_fraction": 0.25,
            "reg_weight": 1.0,
            "fg_iou": 0.5,
            "bg_iou_low": 0.1,
            "init_scale": 0.01,
        },
        "detect": {
            "score_threshold": 0.8,
            "nms_iou": 0.5,
        },
        "eval": {
            "iou_threshold": 0.5,
            "mining_overlap": 0.5,
            "ap_method": "all-points",
            "similar_groups": None,
            "m_values": [1, 10, 50],
            "sweep_overlaps": [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
        },
    }


def merge_configs(default: dict[str, Any], user: dict[str, Any]) -> dict[str, Any]:
    """Deep merge user config into default config."""
    result = copy.deepcopy(default)
    for key, value in user.items():
        if key in result and isinstance(result[key], dict) and isinstance(value, dict):
            result[key] = merge_configs(result[key], value)
        else:
            result[key] = value
    return result


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


def validate_config(config: dict[str, Any]) -> None:
    """Raise ``ConfigError`` for values outside their meaningful range."""
    _require(isinstance(config.get("seed"), int), "seed must be an integer")
    _require(int(config["runtime"]["threads"]) >= 1, "runtime.threads must be >= 1")

    mining = config["mining"]
    _require(int(mining["top_m"]) >= 1, "mining.top_m must be >= 1")
    _require(float(mining["alpha"]) >= 0, "mining.alpha must be >= 0")
    _require(float(mining["contrast_weight"]) >= 0, "mining.contrast_weight must be >= 0")
    _require(float(mining["activation_weight"]) >= 0, "mining.activation_weight must be >= 0")
    _require(
        float(mining["contrast_weight"]) + float(mining["activation_weight"]) > 0,
        "mining fusion weights must not both be zero",
    )
    _require(
        mining["mask_out"] in MASK_OUT_STRATEGIES,
        f"mining.mask_out must be one of {', '.join(MASK_OUT_STRATEGIES)}",
    )

    mil = config["mil"]
    _require(mil["solver"] in MIL_SOLVERS, f"mil.solver must be one of {', '.join(MIL_SOLVERS)}")
    _require(float(mil["regularization"]) > 0, "mil.regularization must be > 0")
    _require(int(mil["outer_iterations"]) >= 1, "mil.outer_iterations must be >= 1")
    _require(int(mil.get("exhaustive_limit", 0)) >= 0, "mil.exhaustive_limit must be >= 0")

    _require(float(config["refine"]["expand"]) >= 0, "refine.expand must be >= 0")

    detector = config["detector"]
    _require(
        0 < float(detector["bg_iou_low"]) < float(detector["fg_iou"]) <= 1,
        "detector IoU bands must satisfy 0 < bg_iou_low < fg_iou <= 1",
    )
    _require(0 < float(detector["fg_fraction"]) < 1, "detector.fg_fraction must be in (0, 1)")

    detect = config["detect"]
    _require(0 <= float(detect["score_threshold"]) <= 1, "detect.score_threshold must be in [0, 1]")
    _require(0 < float(detect["nms_iou"]) <= 1, "detect.nms_iou must be in (0, 1]")

    evaluation = config["eval"]
    _require(0 < float(evaluation["iou_threshold"]) <= 1, "eval.iou_threshold must be in (0, 1]")
    _require(0 < float(evaluation["mining_overlap"]) <= 1, "eval.mining_overlap must be in (0, 1]")
    _require(
        evaluation["ap_method"] in AP_METHODS,
        f"eval.ap_method must be one of {', '.join(AP_METHODS)}",
    )
    _require(all(int(m) >= 1 for m in evaluation["m_values"]), "eval.m_values must be >= 1")

    _require(
        config["data"]["image_format"] in IMAGE_FORMATS,
        f"data.image_format must be one of {', '.join(IMAGE_FORMATS)}",
    )


def canonical_hash(payload: Any) -> str:
    """SHA-256 of the canonical (sorted-key) JSON encoding of ``payload``."""
    encoded = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(encoded.encode("utf-8")).hexdigest()


def section_hash(config: dict[str, Any], section: str) -> str:
    return canonical_hash(config.get(section))


def stage_ancestors(stage: str) -> list[str]:
    """Return ``stage`` and every stage upstream of it, in pipeline order."""
    if stage not in STAGES:
        raise ConfigError(f"Unknown stage: {stage}")
    seen: set[str] = set()
    pending = [stage]
    while pending:
        current = pending.pop()
        if current in seen:
            continue
        seen.add(current)
        pending.extend(STAGES[current][1])
    return [name for name in STAGE_ORDER if name in seen]


def lineage_hash(config: dict[str, Any], stage: str) -> str:
    """
    Hash the config sections a stage and all of its ancestors consume, plus the seed.

    Two runs of a stage agree on this hash exactly when every input that could change the
    stage's artifacts agrees.
    """
    sections: dict[str, Any] = {"seed": config["seed"]}
    for name in stage_ancestors(stage):
        for section in STAGES[name][0]:
            sections[section] = config.get(section)
    return canonical_hash(sections)


def stage_seed(config: dict[str, Any], stage: str) -> int:
    """Derive an independent per-stage seed from the global seed."""
    index = STAGE_ORDER.index(stage)
    state = np.random.SeedSequence([int(config["seed"]), index]).generate_state(1)
    return int(state[0])


def apply_overrides(
    config: dict[str, Any], overrides: dict[str, dict[str, Any]]
) -> tuple[dict[str, Any], dict[str, dict[str, Any]]]:
    """
    Merge CLI flag overrides (``{section: {key: value}}``) whose value is not None.

    Returns the merged config and the overrides that were actually applied.
    """
    cleaned = {
        section: {key: value for key, value in values.items() if value is not None}
        for section, values in overrides.items()
    }
    cleaned = {section: values for section, values in cleaned.items() if values}
    merged = merge_configs(config, cleaned)
    validate_config(merged)
    return merged, cleaned
