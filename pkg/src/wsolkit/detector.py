"""
Detection adaptation.

Refined boxes become foreground ROIs, proposals overlapping them loosely become background,
and a (C+1)-way softmax head with per-class box regression is trained on region features of
the frozen classifier. Inference scores every proposal, applies the regression, thresholds
and runs per-class greedy NMS.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from collections.abc import Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from scipy.special import softmax

from .classifier import (
    CHECKPOINT_VERSION,
    PARAM_ORDER,
    ClassifierModel,
    read_blobs,
    read_header,
)
from .exceptions import (
    ConfigError,
    DetectorError,
    GeometryError,
    ModelError,
    ParseError,
    TrainingError,
)
from .features import RegionFeatures
from .geometry import boxes_to_array, clip_box, iou_matrix
from .logging import get_logger, log_artifact
from .models import BoundingBox, Dataset, Detection, LabeledImage, ProposalSet, SelectedInstance

logger = get_logger(__name__)

DETECTOR_MAGIC = b"WSDM"
HEAD_ORDER = ("cls_w", "cls_b", "reg_w", "reg_b", "feature_mean", "feature_std")
DETECTIONS_HEADER = ["image_id", "class", "x1", "y1", "x2", "y2", "score"]
BACKGROUND = 0
LOG_EVERY = 200


@dataclass(frozen=True)
class DetectorConfig:
    learning_rate: float = 0.05
    iterations: int = 2000
    batch_size: int = 64
    fg_fraction: float = 0.25
    reg_weight: float = 1.0
    fg_iou: float = 0.5
    bg_iou_low: float = 0.1
    init_scale: float = 0.01

    def __post_init__(self) -> None:
        if not 0.0 <= self.bg_iou_low < self.fg_iou <= 1.0:
            raise ConfigError("detector IoU bands need 0 <= bg_iou_low < fg_iou <= 1")
        if not 0.0 < self.fg_fraction <= 1.0:
            raise ConfigError("detector.fg_fraction must be in (0, 1]")
        if self.batch_size < 1 or self.iterations < 0:
            raise ConfigError("detector.batch_size must be >= 1 and iterations >= 0")

    @classmethod
    def from_config(cls, section: Mapping[str, Any]) -> DetectorConfig:
        return cls(
            learning_rate=float(section["learning_rate"]),
            iterations=int(section["iterations"]),
            batch_size=int(section["batch_size"]),
            fg_fraction=float(section["fg_fraction"]),
            reg_weight=float(section["reg_weight"]),
            fg_iou=float(section["fg_iou"]),
            bg_iou_low=float(section["bg_iou_low"]),
            init_scale=float(section["init_scale"]),
        )


@dataclass(frozen=True)
class DetectConfig:
    score_threshold: float = 0.8
    nms_iou: float = 0.5

    @classmethod
    def from_config(cls, section: Mapping[str, Any]) -> DetectConfig:
        return cls(
            score_threshold=float(section["score_threshold"]),
            nms_iou=float(section["nms_iou"]),
        )


# --- losses and box coding -----------------------------------------------------------------


def smooth_l1(x: float | np.ndarray) -> tuple[Any, Any]:
    """0.5 x^2 inside (-1, 1), |x| - 0.5 outside; returns (loss, derivative)."""
    arr = np.asarray(x, dtype=np.float64)
    small = np.abs(arr) < 1.0
    loss = np.where(small, 0.5 * arr**2, np.abs(arr) - 0.5)
    grad = np.where(small, arr, np.sign(arr))
    if np.ndim(x) == 0:
        return float(loss), float(grad)
    return loss, grad


def _centres(boxes: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    return boxes[:, 0] + 0.5 * w, boxes[:, 1] + 0.5 * h, w, h


def encode_targets(proposals: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Offsets (dx, dy, dw, dh) taking each proposal onto its target box."""
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 4)
    pcx, pcy, pw, ph = _centres(proposals)
    tcx, tcy, tw, th = _centres(targets)
    return np.stack(
        [(tcx - pcx) / pw, (tcy - pcy) / ph, np.log(tw / pw), np.log(th / ph)], axis=1
    )


def decode_targets(proposals: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    pcx, pcy, pw, ph = _centres(proposals)
    cx = pcx + deltas[:, 0] * pw
    cy = pcy + deltas[:, 1] * ph
    # exp overflow would turn into inf boxes that clip to the whole image
    w = pw * np.exp(np.minimum(deltas[:, 2], math.log(1000.0)))
    h = ph * np.exp(np.minimum(deltas[:, 3], math.log(1000.0)))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def round_box(coords: Sequence[float], width: int, height: int) -> BoundingBox | None:
    """Snap decoded float coordinates outward to pixels and clip to the image."""
    x1, y1, x2, y2 = coords
    return clip_box((math.floor(x1), math.floor(y1), math.ceil(x2), math.ceil(y2)), width, height)


# --- ROI sets ------------------------------------------------------------------------------


@dataclass(frozen=True)
class RoiSample:
    """
    One training ROI. ``label`` is 0 for background and ``class + 1`` for foreground;
    ``target`` holds the regression offsets of foreground samples.
    """

    image_id: str
    box: BoundingBox
    label: int
    target: tuple[float, float, float, float] | None = None

    @property
    def is_foreground(self) -> bool:
        return self.label != BACKGROUND


def build_roi_set(
    image_id: str,
    proposals: Sequence[BoundingBox],
    mined: Sequence[tuple[int, BoundingBox]],
    config: DetectorConfig | None = None,
    include_mined: bool = True,
) -> list[RoiSample]:
    """
    Label proposals of one image against its mined ``(class, box)`` pairs.

    Max IoU of at least ``fg_iou`` gives the class of the best-overlapping mined box,
    ``[bg_iou_low, fg_iou)`` gives background and anything lower is discarded. Mined boxes
    themselves are added as exact foreground samples unless ``include_mined`` is off.
    """
    config = config or DetectorConfig()
    if not mined:
        return []
    candidates = list(proposals)
    if include_mined:
        candidates.extend(box for _, box in mined)
    if not candidates:
        return []
    mined_boxes = boxes_to_array([box for _, box in mined])
    overlaps = iou_matrix(boxes_to_array(candidates), mined_boxes)
    best = overlaps.argmax(axis=1)
    best_iou = overlaps.max(axis=1)
    offsets = encode_targets(boxes_to_array(candidates), mined_boxes[best])

    samples: list[RoiSample] = []
    for i, box in enumerate(candidates):
        if best_iou[i] >= config.fg_iou:
            dx, dy, dw, dh = (float(v) for v in offsets[i])
            samples.append(RoiSample(image_id, box, mined[best[i]][0] + 1, (dx, dy, dw, dh)))
        elif best_iou[i] >= config.bg_iou_low:
            samples.append(RoiSample(image_id, box, BACKGROUND))
    return samples


@dataclass(frozen=True, eq=False)
class RoiTrainingSet:
    samples: tuple[RoiSample, ...]
    features: np.ndarray
    labels: np.ndarray
    targets: np.ndarray
    num_classes: int

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def foreground(self) -> np.ndarray:
        return np.flatnonzero(self.labels != BACKGROUND)

    @property
    def background(self) -> np.ndarray:
        return np.flatnonzero(self.labels == BACKGROUND)


def build_training_set(
    backbone: ClassifierModel,
    dataset: Dataset,
    proposals: Mapping[str, ProposalSet],
    instances: Sequence[SelectedInstance],
    config: DetectorConfig,
    threads: int = 1,
) -> RoiTrainingSet:
    """ROI samples with region features for every image that has refined instances."""
    by_image: dict[str, list[tuple[int, BoundingBox]]] = {}
    for instance in instances:
        by_image.setdefault(instance.image_id, []).append((instance.class_index, instance.box))
    images = [image for image in dataset if image.id in by_image]
    empty = ProposalSet(boxes=())

    def work(image: LabeledImage) -> tuple[list[RoiSample], np.ndarray]:
        samples = build_roi_set(
            image.id, proposals.get(image.id, empty).boxes, by_image[image.id], config
        )
        feats = RegionFeatures(backbone, image.pixels)([s.box for s in samples])
        return samples, feats

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        parts = list(pool.map(work, images))

    samples = [s for part, _ in parts for s in part]
    dim = backbone.num_maps + 4
    features = np.vstack([f for _, f in parts]) if parts else np.zeros((0, dim))
    labels = np.array([s.label for s in samples], dtype=np.int64)
    targets = np.array([s.target or (0.0, 0.0, 0.0, 0.0) for s in samples], dtype=np.float64)
    return RoiTrainingSet(
        tuple(samples), features, labels, targets.reshape(-1, 4), dataset.num_classes
    )


# --- model ---------------------------------------------------------------------------------


@dataclass
class DetectorModel:
    """Frozen classifier backbone plus a (C+1)-way head and per-class regressors."""

    backbone: ClassifierModel
    num_classes: int
    head: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def feature_dim(self) -> int:
        return self.backbone.num_maps + 4

    def head_shapes(self) -> dict[str, tuple[int, ...]]:
        c, d = self.num_classes, self.feature_dim
        return {
            "cls_w": (c + 1, d),
            "cls_b": (c + 1,),
            "reg_w": (4 * c, d),
            "reg_b": (4 * c,),
            "feature_mean": (d,),
            "feature_std": (d,),
        }

    def require_initialized(self) -> None:
        for name, shape in self.head_shapes().items():
            value = self.head.get(name)
            if value is None or value.shape != shape:
                raise ModelError(f"Detector parameter '{name}' is missing or has the wrong shape")

    def score(self, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Softmax probabilities (n, C+1) and regression offsets (n, C, 4)."""
        x = (features - self.head["feature_mean"]) / self.head["feature_std"]
        probs = softmax(x @ self.head["cls_w"].T + self.head["cls_b"], axis=1)
        deltas = (x @ self.head["reg_w"].T + self.head["reg_b"]).reshape(-1, self.num_classes, 4)
        return probs, deltas


def init_detector(
    backbone: ClassifierModel,
    num_classes: int,
    config: DetectorConfig,
    rng: np.random.Generator,
    feature_mean: np.ndarray,
    feature_std: np.ndarray,
) -> DetectorModel:
    model = DetectorModel(backbone=backbone, num_classes=num_classes)
    shapes = model.head_shapes()
    model.head = {
        "cls_w": rng.normal(0.0, config.init_scale, size=shapes["cls_w"]),
        "cls_b": np.zeros(shapes["cls_b"]),
        "reg_w": rng.normal(0.0, config.init_scale, size=shapes["reg_w"]),
        "reg_b": np.zeros(shapes["reg_b"]),
        "feature_mean": np.asarray(feature_mean, dtype=np.float64),
        "feature_std": np.asarray(feature_std, dtype=np.float64),
    }
    return model


def head_loss_and_gradients(
    model: DetectorModel,
    features: np.ndarray,
    labels: np.ndarray,
    targets: np.ndarray,
    reg_weight: float,
) -> tuple[float, dict[str, np.ndarray]]:
    """
    Mean softmax cross-entropy plus ``reg_weight`` times the smooth-L1 regression loss of
    foreground samples (summed over coordinates, averaged over the batch).
    """
    n = features.shape[0]
    x = (features - model.head["feature_mean"]) / model.head["feature_std"]
    probs, deltas = model.score(features)
    picked = np.clip(probs[np.arange(n), labels], 1e-12, None)
    loss = float(-np.log(picked).mean())

    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    grads = {
        "cls_w": dlogits.T @ x,
        "cls_b": dlogits.sum(axis=0),
        "reg_w": np.zeros_like(model.head["reg_w"]),
        "reg_b": np.zeros_like(model.head["reg_b"]),
    }

    fg = np.flatnonzero(labels != BACKGROUND)
    if fg.size and reg_weight > 0:
        cls = labels[fg] - 1
        residual = deltas[fg, cls, :] - targets[fg]
        reg_loss, reg_grad = smooth_l1(residual)
        loss += reg_weight * float(reg_loss.sum()) / n
        dpred = np.zeros((n, model.num_classes, 4))
        dpred[fg, cls, :] = reg_weight * reg_grad / n
        dpred = dpred.reshape(n, -1)
        grads["reg_w"] = dpred.T @ x
        grads["reg_b"] = dpred.sum(axis=0)
    return loss, grads


@dataclass
class DetectorTrainingResult:
    model: DetectorModel
    loss_history: list[float]
    accuracy: float


def _sample_batch(
    training: RoiTrainingSet, config: DetectorConfig, rng: np.random.Generator
) -> np.ndarray:
    fg, bg = training.foreground, training.background
    fg_count = min(max(1, int(round(config.fg_fraction * config.batch_size))), fg.size)
    bg_count = min(config.batch_size - fg_count, bg.size)
    if bg_count < 1:
        bg_count = 1
    chosen_fg = rng.choice(fg, size=fg_count, replace=False)
    chosen_bg = rng.choice(bg, size=bg_count, replace=False)
    return np.concatenate([chosen_fg, chosen_bg])


def train_detector(
    training: RoiTrainingSet,
    backbone: ClassifierModel,
    config: DetectorConfig,
    seed: int,
) -> DetectorTrainingResult:
    """Seeded mini-batch SGD on the detection head; the backbone stays frozen."""
    if training.foreground.size == 0:
        raise DetectorError("ROI set has no foreground samples")
    if training.background.size == 0:
        raise DetectorError("ROI set has no background samples")
    present = set(int(v) for v in training.labels[training.foreground] - 1)
    for c in range(training.num_classes):
        if c not in present:
            logger.warning("Class absent from the ROI set", class_index=c)

    mean = training.features.mean(axis=0)
    std = training.features.std(axis=0)
    std[std == 0] = 1.0
    rng = np.random.default_rng(seed)
    model = init_detector(backbone, training.num_classes, config, rng, mean, std)

    history: list[float] = []
    for iteration in range(config.iterations):
        batch = _sample_batch(training, config, rng)
        loss, grads = head_loss_and_gradients(
            model,
            training.features[batch],
            training.labels[batch],
            training.targets[batch],
            config.reg_weight,
        )
        if not math.isfinite(loss):
            raise TrainingError("Detector loss is not finite", iteration)
        for name, grad in grads.items():
            model.head[name] -= config.learning_rate * grad
        history.append(loss)
        if iteration % LOG_EVERY == 0:
            logger.debug("Detector iteration", iteration=iteration, loss=loss)

    accuracy = roi_accuracy(model, training)
    logger.info(
        "Trained detector",
        samples=len(training),
        foreground=int(training.foreground.size),
        accuracy=accuracy,
    )
    return DetectorTrainingResult(model, history, accuracy)


def roi_accuracy(model: DetectorModel, training: RoiTrainingSet) -> float:
    if len(training) == 0:
        return 0.0
    probs, _ = model.score(training.features)
    return float((probs.argmax(axis=1) == training.labels).mean())


# --- inference -----------------------------------------------------------------------------


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> list[int]:
    """
    Greedy suppression, highest score first (ties by lower index).

    Returns kept indices in score order; kept boxes overlap pairwise below ``iou_threshold``.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    if not order:
        return []
    overlaps = iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(scores), dtype=bool)
    keep: list[int] = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= overlaps[i] >= iou_threshold
    return keep


def _pixels(image: LabeledImage | np.ndarray) -> np.ndarray:
    return image.pixels if isinstance(image, LabeledImage) else np.asarray(image)


def _regressed(
    pixels: np.ndarray, boxes: Sequence[BoundingBox], scores: np.ndarray, deltas: np.ndarray
) -> list[tuple[BoundingBox, float]]:
    """Apply one class's offsets; boxes that clip to nothing are dropped."""
    height, width = pixels.shape[:2]
    decoded = decode_targets(boxes_to_array(boxes), deltas)
    out: list[tuple[BoundingBox, float]] = []
    for coords, score in zip(decoded, scores, strict=True):
        box = round_box(coords, width, height)
        if box is not None:
            out.append((box, float(score)))
    return out


def detect(
    model: DetectorModel,
    image: LabeledImage | np.ndarray,
    proposals: Sequence[BoundingBox] | ProposalSet,
    score_threshold: float = 0.8,
    nms_iou: float = 0.5,
    image_id: str | None = None,
) -> list[Detection]:
    """Per-class scoring, regression, thresholding and NMS; sorted by score descending."""
    model.require_initialized()
    boxes = list(proposals.boxes if isinstance(proposals, ProposalSet) else proposals)
    if not boxes:
        return []
    pixels = _pixels(image)
    name = image_id if image_id is not None else getattr(image, "id", "")
    probs, deltas = model.score(RegionFeatures(model.backbone, pixels)(boxes))

    detections: list[Detection] = []
    for c in range(model.num_classes):
        candidates = [
            (box, score)
            for box, score in _regressed(pixels, boxes, probs[:, c + 1], deltas[:, c, :])
            if score >= score_threshold
        ]
        kept_boxes = [box for box, _ in candidates]
        kept_scores = [score for _, score in candidates]
        for i in nms(boxes_to_array(kept_boxes), np.array(kept_scores), nms_iou):
            detections.append(Detection(name, c, kept_boxes[i], kept_scores[i]))
    detections.sort(key=lambda d: (-d.score, d.class_index, d.box.as_tuple()))
    return detections


def localize(
    model: DetectorModel,
    image: LabeledImage | np.ndarray,
    proposals: Sequence[BoundingBox] | ProposalSet,
    class_index: int,
) -> BoundingBox | None:
    """The single best regressed box for one class, with no threshold or NMS."""
    boxes = list(proposals.boxes if isinstance(proposals, ProposalSet) else proposals)
    if not boxes:
        return None
    pixels = _pixels(image)
    probs, deltas = model.score(RegionFeatures(model.backbone, pixels)(boxes))
    candidates = _regressed(pixels, boxes, probs[:, class_index + 1], deltas[:, class_index, :])
    if not candidates:
        return None
    return max(candidates, key=lambda pair: pair[1])[0]


def detect_dataset(
    model: DetectorModel,
    dataset: Dataset,
    proposals: Mapping[str, ProposalSet],
    config: DetectConfig,
    threads: int = 1,
) -> list[Detection]:
    empty = ProposalSet(boxes=())

    def work(image: LabeledImage) -> list[Detection]:
        return detect(
            model,
            image,
            proposals.get(image.id, empty),
            config.score_threshold,
            config.nms_iou,
        )

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        per_image = list(pool.map(work, dataset.images))
    detections = [d for part in per_image for d in part]
    logger.info("Detected objects", images=len(dataset), detections=len(detections))
    return detections


# --- persistence ---------------------------------------------------------------------------


def save_detector(model: DetectorModel, path: Path) -> None:
    """Backbone and head in one ``WSDM`` file, same layout as the classifier checkpoint."""
    model.require_initialized()
    model.backbone.require_initialized()
    backbone = model.backbone
    header = {
        "num_classes": model.num_classes,
        "backbone": {
            "num_classes": backbone.num_classes,
            "input_size": backbone.input_size,
            "conv1_filters": backbone.conv1_filters,
            "num_maps": backbone.num_maps,
            "mean": [float(v) for v in backbone.mean],
        },
        "params": [
            {"name": f"backbone.{name}", "shape": list(backbone.params[name].shape)}
            for name in PARAM_ORDER
        ]
        + [{"name": name, "shape": list(model.head[name].shape)} for name in HEAD_ORDER],
    }
    encoded = json.dumps(header, sort_keys=True).encode("utf-8")
    blobs = b"".join(
        np.ascontiguousarray(value, dtype="<f4").tobytes()
        for value in [backbone.params[name] for name in PARAM_ORDER]
        + [model.head[name] for name in HEAD_ORDER]
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(
        DETECTOR_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(encoded)) + encoded + blobs
    )
    log_artifact("Wrote detector checkpoint", path, bytes=path.stat().st_size)


def load_detector(path: Path) -> DetectorModel:
    data = path.read_bytes()
    header, offset = read_header(data, DETECTOR_MAGIC, path)
    params, end = read_blobs(data, offset, header["params"], path)
    if end != len(data):
        raise ParseError("Trailing bytes after detector parameters", path)
    spec = header["backbone"]
    backbone = ClassifierModel(
        num_classes=int(spec["num_classes"]),
        input_size=int(spec["input_size"]),
        conv1_filters=int(spec["conv1_filters"]),
        num_maps=int(spec["num_maps"]),
        mean=np.array(spec["mean"], dtype=np.float64),
        params={name: params[f"backbone.{name}"] for name in PARAM_ORDER},
    )
    model = DetectorModel(
        backbone=backbone,
        num_classes=int(header["num_classes"]),
        head={name: params[name] for name in HEAD_ORDER},
    )
    try:
        backbone.require_initialized()
        model.require_initialized()
    except ModelError as exc:
        raise ParseError(str(exc), path) from exc
    log_artifact("Loaded detector checkpoint", path)
    return model


def write_detections(rows: Iterable[Detection], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(DETECTIONS_HEADER)
        for row in rows:
            writer.writerow(row.to_row())
            count += 1
    log_artifact("Wrote detections", path, rows=count)


def read_detections(path: Path) -> list[Detection]:
    rows: list[Detection] = []
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        if next(reader, None) != DETECTIONS_HEADER:
            raise ParseError("Unexpected detections header", path, 1)
        for line_number, record in enumerate(reader, start=2):
            if not record:
                continue
            if len(record) != len(DETECTIONS_HEADER):
                raise ParseError(f"expected {len(DETECTIONS_HEADER)} fields", path, line_number)
            try:
                box = BoundingBox(*(int(v) for v in record[2:6]))
                rows.append(Detection(record[0], int(record[1]), box, float(record[6])))
            except (ValueError, GeometryError) as exc:
                raise ParseError(str(exc), path, line_number) from exc
    return rows
