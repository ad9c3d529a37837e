"""
Stage orchestration.

Each stage reads its upstream artifacts from the work directory, writes its own artifacts and
records a manifest under ``manifests/<stage>.json`` with file hashes, the lineage hash of the
configuration that produced it, the seed and the wall time.
"""

from __future__ import annotations

import hashlib
import json
import time
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .classifier import (
    ClassifierConfig,
    load_checkpoint,
    multilabel_accuracy,
    save_checkpoint,
    train_classifier,
)
from .config import STAGES, lineage_hash, stage_seed
from .dataset import (
    ProposalConfig,
    SyntheticConfig,
    generate_proposal_sets,
    generate_synthetic,
    load_manifest,
    load_proposals,
    save_dataset,
    save_proposals,
    similar_groups,
)
from .detector import (
    DetectConfig,
    DetectorConfig,
    build_training_set,
    detect_dataset,
    load_detector,
    localize,
    read_detections,
    save_detector,
    train_detector,
    write_detections,
)
from .evaluation import (
    EvalConfig,
    corloc,
    corloc_at_m,
    evaluate_detections,
    overlap_sweep,
    precision_recall,
    recall_at_m,
    top_localizations,
    write_pr_curve,
)
from .exceptions import ConfigMismatchError, MissingArtifactError, ParseError
from .logging import LogContext, get_logger, log_artifact
from .mil import MilConfig, read_selected, solve_all_classes, write_selected
from .mining import (
    MaskOutStrategy,
    MiningConfig,
    mine_dataset,
    ranked_by_image,
    read_mined,
    write_mined,
)
from .models import BoundingBox, Dataset, ProposalSet, ScoredProposal, StageManifest
from .refine import RefineConfig, refine_instances, save_mask_png
from .report import ReportGenerator

logger = get_logger(__name__)

# Workspace attribute -> stage that produces it.
PRODUCERS = {
    "train_manifest": "gen-data",
    "test_manifest": "gen-data",
    "train_proposals": "gen-data",
    "test_proposals": "gen-data",
    "classifier": "train-cls",
    "mined": "mine",
    "mined_contrast": "mine",
    "selected": "mil",
    "refined": "refine",
    "detector": "train-det",
    "detections": "detect",
    "eval_json": "eval",
}

STAGE_INPUTS: dict[str, tuple[str, ...]] = {
    "gen-data": (),
    "train-cls": ("train_manifest",),
    "mine": ("classifier", "train_manifest", "train_proposals"),
    "mil": ("mined", "classifier", "train_manifest"),
    "refine": ("selected", "train_manifest"),
    "train-det": ("refined", "classifier", "train_manifest", "train_proposals"),
    "detect": ("detector", "test_manifest", "test_proposals"),
    "eval": (
        "detections",
        "test_manifest",
        "mined",
        "mined_contrast",
        "selected",
        "refined",
        "detector",
        "train_manifest",
        "train_proposals",
    ),
    "report": ("eval_json",),
    "compare-maskout": ("classifier", "train_manifest", "train_proposals"),
}


@dataclass(frozen=True)
class Workspace:
    """Artifact locations under one work directory; external inputs come from ``paths``."""

    root: Path
    paths: Mapping[str, Any]

    @classmethod
    def from_config(cls, config: Mapping[str, Any], workdir: Path | None = None) -> Workspace:
        paths = config.get("paths", {})
        return cls(Path(workdir or paths.get("workdir") or "wsolkit-run"), paths)

    def _external(self, key: str, default: Path) -> Path:
        value = self.paths.get(key)
        return Path(value) if value else default

    @property
    def train_manifest(self) -> Path:
        return self._external("dataset", self.root / "data" / "train" / "manifest.json")

    @property
    def test_manifest(self) -> Path:
        return self._external("test_dataset", self.root / "data" / "test" / "manifest.json")

    @property
    def train_proposals(self) -> Path:
        return self._external("proposals", self.root / "proposals" / "train.csv")

    @property
    def test_proposals(self) -> Path:
        return self._external("test_proposals", self.root / "proposals" / "test.csv")

    @property
    def classifier(self) -> Path:
        return self.root / "classifier.wscm"

    @property
    def mined(self) -> Path:
        return self.root / "mined.csv"

    @property
    def mined_contrast(self) -> Path:
        return self.root / "mined_contrast.csv"

    @property
    def selected(self) -> Path:
        return self.root / "selected.csv"

    @property
    def refined(self) -> Path:
        return self.root / "refined.csv"

    @property
    def masks(self) -> Path:
        return self.root / "masks"

    @property
    def detector(self) -> Path:
        return self.root / "detector.wsdm"

    @property
    def detections(self) -> Path:
        return self.root / "detections.csv"

    @property
    def eval_json(self) -> Path:
        return self.root / "eval.json"

    @property
    def pr_curves(self) -> Path:
        return self.root / "pr_curves"

    @property
    def report_json(self) -> Path:
        return self.root / "report.json"

    @property
    def report_md(self) -> Path:
        return self.root / "report.md"

    @property
    def maskout_json(self) -> Path:
        return self.root / "maskout_comparison.json"

    def manifest(self, stage: str) -> Path:
        return self.root / "manifests" / f"{stage}.json"


@dataclass(frozen=True)
class StageContext:
    stage: str
    config: dict[str, Any]
    overrides: dict[str, Any]
    workspace: Workspace
    seed: int
    threads: int
    include: tuple[Path, ...] = ()


StageRunner = Callable[[StageContext], dict[str, Path]]


def file_hash(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_json(payload: Any, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_json(path: Path) -> Any:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"Unreadable JSON: {exc}", path) from exc


def check_upstream(
    stage: str, config: dict[str, Any], workspace: Workspace, force: bool = False
) -> None:
    """
    Verify the stage's inputs exist and that upstream manifests match the current config.

    A missing manifest is not an error, so externally produced inputs are accepted.
    """
    for name in STAGE_INPUTS[stage]:
        path = getattr(workspace, name)
        if not path.exists():
            raise MissingArtifactError(path, PRODUCERS[name])

    for upstream in STAGES[stage][1]:
        manifest_path = workspace.manifest(upstream)
        if not manifest_path.exists():
            continue
        found = str(_read_json(manifest_path).get("lineage_hash", ""))
        expected = lineage_hash(config, upstream)
        if found == expected:
            continue
        if not force:
            raise ConfigMismatchError(stage, upstream, expected, found)
        logger.warning(
            "Upstream config mismatch ignored",
            stage=stage,
            upstream=upstream,
            expected=expected[:12],
            found=found[:12],
        )


def execute_stage(
    stage: str,
    config: dict[str, Any],
    overrides: dict[str, Any] | None = None,
    *,
    workdir: Path | None = None,
    force: bool = False,
    threads: int | None = None,
    include: Sequence[Path] = (),
) -> StageManifest:
    """Run one stage end to end and write its manifest."""
    workspace = Workspace.from_config(config, workdir)
    check_upstream(stage, config, workspace, force)
    context = StageContext(
        stage=stage,
        config=config,
        overrides=dict(overrides or {}),
        workspace=workspace,
        seed=stage_seed(config, stage),
        threads=int(threads or config["runtime"]["threads"]),
        include=tuple(include),
    )
    workspace.root.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    with LogContext(stage=stage, seed=context.seed):
        logger.info("Stage started", workdir=str(workspace.root))
        outputs = STAGE_RUNNERS[stage](context)
        elapsed = time.perf_counter() - started
        manifest = StageManifest(
            stage=stage,
            lineage_hash=lineage_hash(config, stage),
            seed=context.seed,
            inputs={
                str(getattr(workspace, name)): file_hash(getattr(workspace, name))
                for name in STAGE_INPUTS[stage]
            },
            outputs={str(path): file_hash(path) for path in outputs.values() if path.is_file()},
            config={
                "seed": config["seed"],
                **{section: config.get(section) for section in STAGES[stage][0]},
            },
            overrides=context.overrides,
            wall_time_sec=round(elapsed, 3),
        )
        _write_json(manifest.to_public_dict(), workspace.manifest(stage))
        logger.info("Stage finished", seconds=round(elapsed, 3), outputs=len(outputs))
    return manifest


# --- stages --------------------------------------------------------------------------------


def derive_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


def run_gen_data(ctx: StageContext) -> dict[str, Path]:
    data = ctx.config["data"]
    proposal_config = ProposalConfig.from_config(ctx.config["proposals"])
    ws = ctx.workspace
    outputs: dict[str, Path] = {}
    for split, count, key in (
        ("train", data["num_images"], 0),
        ("test", data["num_test_images"], 1),
    ):
        synthetic = SyntheticConfig.from_config(data, ctx.seed, num_images=int(count))
        dataset = generate_synthetic(synthetic, split)
        manifest = save_dataset(dataset, ws.root / "data" / split, data["image_format"])
        proposals = generate_proposal_sets(dataset, proposal_config, derive_seed(ctx.seed, key))
        proposal_path = ws.root / "proposals" / f"{split}.csv"
        save_proposals(proposals, proposal_path)
        outputs[f"{split}_manifest"] = manifest
        outputs[f"{split}_proposals"] = proposal_path
    return outputs


def run_train_cls(ctx: StageContext) -> dict[str, Path]:
    dataset = load_manifest(ctx.workspace.train_manifest)
    cls_config = ClassifierConfig.from_config(ctx.config["classifier"])
    result = train_classifier(dataset, cls_config, ctx.seed)
    save_checkpoint(result.model, ctx.workspace.classifier)
    logger.info(
        "Classifier trained",
        final_loss=result.loss_history[-1] if result.loss_history else None,
        accuracy=multilabel_accuracy(result.model, dataset),
    )
    return {"classifier": ctx.workspace.classifier}


def run_mine(ctx: StageContext) -> dict[str, Path]:
    ws = ctx.workspace
    model = load_checkpoint(ws.classifier)
    dataset = load_manifest(ws.train_manifest)
    proposals = load_proposals(ws.train_proposals, dataset)
    config = MiningConfig.from_config(ctx.config["mining"])
    result = mine_dataset(model, dataset, proposals, config, model.mean, ctx.threads)
    write_mined(result.mined, ws.mined)
    write_mined(result.contrast_top, ws.mined_contrast)
    return {"mined": ws.mined, "mined_contrast": ws.mined_contrast}


def run_mil(ctx: StageContext) -> dict[str, Path]:
    ws = ctx.workspace
    mined = read_mined(ws.mined)
    model = load_checkpoint(ws.classifier)
    dataset = load_manifest(ws.train_manifest)
    config = MilConfig.from_config(ctx.config["mil"])
    chosen = solve_all_classes(mined, dataset, model, config, ctx.seed, ctx.threads)
    write_selected(chosen, ws.selected)
    return {"selected": ws.selected}


def run_refine(ctx: StageContext) -> dict[str, Path]:
    ws = ctx.workspace
    selected = read_selected(ws.selected)
    dataset = load_manifest(ws.train_manifest)
    config = RefineConfig.from_config(ctx.config["refine"])
    refined = refine_instances(selected, dataset, config, ctx.threads)
    write_selected([item.instance for item in refined], ws.refined)
    if config.dump_masks:
        for index, item in enumerate(refined):
            if item.mask is not None:
                name = f"{item.instance.image_id}_c{item.instance.class_index}_{index:05d}.png"
                save_mask_png(item.mask, ws.masks / name)
    return {"refined": ws.refined}


def run_train_det(ctx: StageContext) -> dict[str, Path]:
    ws = ctx.workspace
    refined = read_selected(ws.refined)
    backbone = load_checkpoint(ws.classifier)
    dataset = load_manifest(ws.train_manifest)
    proposals = load_proposals(ws.train_proposals, dataset)
    config = DetectorConfig.from_config(ctx.config["detector"])
    training = build_training_set(backbone, dataset, proposals, refined, config, ctx.threads)
    result = train_detector(training, backbone, config, ctx.seed)
    save_detector(result.model, ws.detector)
    return {"detector": ws.detector}


def run_detect(ctx: StageContext) -> dict[str, Path]:
    ws = ctx.workspace
    model = load_detector(ws.detector)
    dataset = load_manifest(ws.test_manifest)
    proposals = load_proposals(ws.test_proposals, dataset)
    detections = detect_dataset(
        model, dataset, proposals, DetectConfig.from_config(ctx.config["detect"]), ctx.threads
    )
    write_detections(detections, ws.detections)
    return {"detections": ws.detections}


def _rank_one(rows: Sequence[ScoredProposal]) -> dict[int, dict[str, BoundingBox]]:
    out: dict[int, dict[str, BoundingBox]] = {}
    for (image_id, c), group in ranked_by_image(rows).items():
        out.setdefault(c, {})[image_id] = group[0].box
    return out


def _ranked_boxes(rows: Sequence[ScoredProposal]) -> dict[tuple[str, int], list[BoundingBox]]:
    return {key: [p.box for p in group] for key, group in ranked_by_image(rows).items()}


def _class_means(dataset: Dataset, values: Mapping[int, float]) -> dict[str, Any]:
    per_class = {dataset.class_names[c]: round(float(v), 6) for c, v in sorted(values.items())}
    mean = round(float(np.mean(list(values.values()))), 6) if values else None
    return {"per_class": per_class, "mean": mean}


def _eval_config(config: Mapping[str, Any]) -> EvalConfig:
    data = config["data"]
    synthetic = SyntheticConfig.from_config(data, 0, num_images=0)
    groups = similar_groups(synthetic.palette, synthetic.num_classes)
    return EvalConfig.from_config(config["eval"], groups)


def ablation_rows(
    ctx: StageContext, train: Dataset, eval_config: EvalConfig
) -> list[dict[str, Any]]:
    """CorLoc on the training set after each stage, with the toggles active at that point."""
    ws = ctx.workspace
    proposals = load_proposals(ws.train_proposals, train)
    detector = load_detector(ws.detector)
    empty = ProposalSet(boxes=())
    finetuned: dict[int, dict[str, BoundingBox]] = {}
    for c in range(train.num_classes):
        for image in train.positives(c):
            box = localize(detector, image, proposals.get(image.id, empty), c)
            if box is not None:
                finetuned.setdefault(c, {})[image.id] = box

    toggles = {"CS": True, "AS": False, "MIL": False, "Seg": False, "FT": False}
    steps = [
        ("CS", {}, _rank_one(read_mined(ws.mined_contrast))),
        (
            "AS",
            {"AS": float(ctx.config["mining"]["activation_weight"]) > 0},
            _rank_one(read_mined(ws.mined)),
        ),
        (
            "MIL",
            {"MIL": bool(ctx.config["mil"]["enabled"])},
            top_localizations(read_selected(ws.selected)),
        ),
        (
            "Seg",
            {"Seg": bool(ctx.config["refine"]["enabled"])},
            top_localizations(read_selected(ws.refined)),
        ),
        ("FT", {"FT": True}, finetuned),
    ]
    rows: list[dict[str, Any]] = []
    for step, change, localizations in steps:
        toggles = {**toggles, **change}
        scores = corloc(localizations, train, eval_config.iou_threshold)
        rows.append({"step": step, "toggles": dict(toggles), "corloc": _class_means(train, scores)})
    return rows


def run_eval(ctx: StageContext) -> dict[str, Path]:
    ws = ctx.workspace
    eval_config = _eval_config(ctx.config)
    test = load_manifest(ws.test_manifest)
    train = load_manifest(ws.train_manifest)
    detections = read_detections(ws.detections)

    detection = evaluate_detections(detections, test, eval_config)
    outputs: dict[str, Path] = {"eval": ws.eval_json}
    for c in range(test.num_classes):
        curve = precision_recall(detections, test, c, eval_config.iou_threshold)
        path = ws.pr_curves / f"{test.class_names[c]}.csv"
        write_pr_curve(curve, path)
        outputs[f"pr_{c}"] = path

    ranked = _ranked_boxes(read_mined(ws.mined))
    t = eval_config.mining_overlap
    m_values = eval_config.m_values
    mining = {
        "overlap": t,
        "corloc_at_m": {
            str(m): _class_means(train, corloc_at_m(ranked, train, m, t)) for m in m_values
        },
        "recall_at_m": {
            str(m): _class_means(train, recall_at_m(ranked, train, m, t)) for m in m_values
        },
        "sweep": overlap_sweep(ranked, train, eval_config.m_values, eval_config.sweep_overlaps),
    }
    rows = ablation_rows(ctx, train, eval_config)
    rows[-1]["map"] = detection["map"]
    payload = {
        "class_names": list(test.class_names),
        "iou_threshold": eval_config.iou_threshold,
        "ablation": rows,
        "detection": detection,
        "mining": mining,
    }
    _write_json(payload, ws.eval_json)
    log_artifact("Wrote evaluation", ws.eval_json, map=detection["map"])
    return outputs


def run_report(ctx: StageContext) -> dict[str, Path]:
    ws = ctx.workspace
    payload = _read_json(ws.eval_json)
    rows = [{**row, "source": str(ws.root)} for row in payload.get("ablation", [])]
    for path in ctx.include:
        if not path.exists():
            raise MissingArtifactError(path, "report")
        other = _read_json(path)
        source = str(path.parent)
        rows.extend({**row, "source": source} for row in other.get("ablation", []))
    report = {**payload, "ablation": rows}
    _write_json(report, ws.report_json)
    ReportGenerator().generate(report, ws.report_md)
    return {"report_json": ws.report_json, "report_md": ws.report_md}


def run_compare_maskout(ctx: StageContext) -> dict[str, Path]:
    """Mine with every mask-out strategy and compare CorLoc@M and recall@M."""
    ws = ctx.workspace
    model = load_checkpoint(ws.classifier)
    dataset = load_manifest(ws.train_manifest)
    proposals = load_proposals(ws.train_proposals, dataset)
    eval_config = _eval_config(ctx.config)
    t = eval_config.mining_overlap
    strategies: dict[str, Any] = {}
    for strategy in MaskOutStrategy:
        section = {**ctx.config["mining"], "mask_out": strategy.value}
        result = mine_dataset(
            model, dataset, proposals, MiningConfig.from_config(section), model.mean, ctx.threads
        )
        ranked = _ranked_boxes(result.mined)
        strategies[strategy.value] = {
            "corloc_at_m": {
                str(m): _class_means(dataset, corloc_at_m(ranked, dataset, m, t))
                for m in eval_config.m_values
            },
            "recall_at_m": {
                str(m): _class_means(dataset, recall_at_m(ranked, dataset, m, t))
                for m in eval_config.m_values
            },
        }
    _write_json({"overlap": t, "strategies": strategies}, ws.maskout_json)
    log_artifact("Wrote mask-out comparison", ws.maskout_json)
    return {"maskout": ws.maskout_json}


STAGE_RUNNERS: dict[str, StageRunner] = {
    "gen-data": run_gen_data,
    "train-cls": run_train_cls,
    "mine": run_mine,
    "mil": run_mil,
    "refine": run_refine,
    "train-det": run_train_det,
    "detect": run_detect,
    "eval": run_eval,
    "report": run_report,
    "compare-maskout": run_compare_maskout,
}
