"""Localization and detection metrics: CorLoc, CorLoc@M, recall@M, AP and error analysis."""

from __future__ import annotations

import csv
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .exceptions import ConfigError
from .geometry import boxes_to_array, iou, iou_matrix
from .logging import get_logger, log_artifact
from .models import BoundingBox, Dataset, Detection, ErrorBreakdown

__all__ = [
    "EvalConfig",
    "PrCurve",
    "average_precision",
    "corloc",
    "corloc_at_m",
    "error_analysis",
    "error_profile",
    "iou",
    "mean_ap",
    "overlap_sweep",
    "precision_recall",
    "recall_at_m",
    "top_localizations",
    "write_pr_curve",
]

logger = get_logger(__name__)

WEAK_OVERLAP = 0.1
CATEGORY_NAMES = {
    "cor": "Cor",
    "loc": "Loc",
    "sim": "Sim",
    "oth": "Oth",
    "bg": "BG",
    "dup": "Dup",
}


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = 0.5
    mining_overlap: float = 0.5
    ap_method: str = "all-points"
    similar_groups: tuple[tuple[int, ...], ...] = ()
    m_values: tuple[int, ...] = (1, 10, 50)
    sweep_overlaps: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)

    def __post_init__(self) -> None:
        if not 0.0 < self.iou_threshold <= 1.0 or not 0.0 < self.mining_overlap <= 1.0:
            raise ConfigError("Evaluation thresholds must lie in (0, 1]")
        if self.ap_method not in ("all-points", "voc07"):
            raise ConfigError(f"Unknown AP method {self.ap_method!r}")

    @classmethod
    def from_config(
        cls, section: Mapping[str, Any], default_groups: Sequence[Sequence[int]] = ()
    ) -> EvalConfig:
        groups = section.get("similar_groups")
        if groups is None:
            groups = default_groups
        return cls(
            iou_threshold=float(section["iou_threshold"]),
            mining_overlap=float(section["mining_overlap"]),
            ap_method=str(section["ap_method"]),
            similar_groups=tuple(tuple(int(c) for c in group) for group in groups),
            m_values=tuple(int(m) for m in section.get("m_values", (1, 10, 50))),
            sweep_overlaps=tuple(float(t) for t in section.get("sweep_overlaps", ())),
        )

    def similar_to(self, class_index: int) -> set[int]:
        """Classes sharing a group with ``class_index``; a class outside every group is alone."""
        similar: set[int] = set()
        for group in self.similar_groups:
            if class_index in group:
                similar.update(group)
        similar.discard(class_index)
        return similar


# --- CorLoc --------------------------------------------------------------------------------


def top_localizations(
    rows: Iterable[Any], score_attr: str = "score"
) -> dict[int, dict[str, BoundingBox]]:
    """
    Best box per (class, image) from rows carrying ``class_index``, ``image_id``, ``box``.

    The first row wins on equal scores, so rank-ordered input keeps its order.
    """
    best: dict[tuple[int, str], tuple[float, BoundingBox]] = {}
    for row in rows:
        key = (row.class_index, row.image_id)
        score = float(getattr(row, score_attr))
        if key not in best or score > best[key][0]:
            best[key] = (score, row.box)
    out: dict[int, dict[str, BoundingBox]] = {}
    for (c, image_id), (_, box) in best.items():
        out.setdefault(c, {})[image_id] = box
    return out


def _hit(box: BoundingBox, gt: Sequence[BoundingBox], threshold: float) -> bool:
    return any(iou(box, target) >= threshold for target in gt)


def corloc(
    localizations: Mapping[int, Mapping[str, BoundingBox]],
    dataset: Dataset,
    iou_threshold: float = 0.5,
) -> dict[int, float]:
    """
    Per class, the fraction of positive images whose predicted box hits a gt box.

    IoU equal to the threshold counts as correct. A positive image without a prediction
    counts as a miss; predictions on other images are ignored with a warning.
    """
    scores: dict[int, float] = {}
    for c in range(dataset.num_classes):
        predicted = localizations.get(c, {})
        positives = dataset.positives(c)
        positive_ids = {image.id for image in positives}
        ignored = sum(1 for image_id in predicted if image_id not in positive_ids)
        if ignored:
            logger.warning(
                "Ignoring predictions on non-positive images", class_index=c, count=ignored
            )
        if not positives:
            logger.warning("Class has no positive images, CorLoc undefined", class_index=c)
            continue
        hits = sum(
            1
            for image in positives
            if image.id in predicted and _hit(predicted[image.id], image.gt_boxes(c), iou_threshold)
        )
        scores[c] = hits / len(positives)
    return scores


def corloc_at_m(
    ranked: Mapping[tuple[str, int], Sequence[BoundingBox]],
    dataset: Dataset,
    m: int,
    overlap: float = 0.5,
) -> dict[int, float]:
    """Fraction of positive images with at least one gt hit among the top ``m`` boxes."""
    if m < 1:
        raise ConfigError(f"M must be >= 1, got {m}")
    scores: dict[int, float] = {}
    for c in range(dataset.num_classes):
        positives = dataset.positives(c)
        if not positives:
            continue
        hits = 0
        for image in positives:
            gt = image.gt_boxes(c)
            if any(_hit(box, gt, overlap) for box in ranked.get((image.id, c), ())[:m]):
                hits += 1
        scores[c] = hits / len(positives)
    return scores


def _greedy_matches(boxes: Sequence[BoundingBox], gt: Sequence[BoundingBox], overlap: float) -> int:
    """One-to-one matches at IoU >= overlap, taking the highest IoU pairs first."""
    if not boxes or not gt:
        return 0
    overlaps = iou_matrix(boxes_to_array(boxes), boxes_to_array(gt))
    pairs = sorted(
        ((overlaps[i, j], i, j) for i in range(len(boxes)) for j in range(len(gt))),
        key=lambda item: (-item[0], item[1], item[2]),
    )
    used_boxes: set[int] = set()
    used_gt: set[int] = set()
    for value, i, j in pairs:
        if value < overlap:
            break
        if i in used_boxes or j in used_gt:
            continue
        used_boxes.add(i)
        used_gt.add(j)
    return len(used_gt)


def recall_at_m(
    ranked: Mapping[tuple[str, int], Sequence[BoundingBox]],
    dataset: Dataset,
    m: int,
    overlap: float = 0.5,
) -> dict[int, float]:
    """Fraction of gt boxes matched by the top ``m`` boxes of their image."""
    if m < 1:
        raise ConfigError(f"M must be >= 1, got {m}")
    scores: dict[int, float] = {}
    for c in range(dataset.num_classes):
        total = 0
        matched = 0
        for image in dataset:
            gt = image.gt_boxes(c)
            if not gt:
                continue
            total += len(gt)
            matched += _greedy_matches(list(ranked.get((image.id, c), ()))[:m], gt, overlap)
        if total:
            scores[c] = matched / total
    return scores


def overlap_sweep(
    ranked: Mapping[tuple[str, int], Sequence[BoundingBox]],
    dataset: Dataset,
    m_values: Sequence[int],
    overlaps: Sequence[float],
) -> list[dict[str, float]]:
    """Class-mean CorLoc@M and recall@M for every (t, M) pair."""
    rows: list[dict[str, float]] = []
    for t in overlaps:
        for m in m_values:
            cl = corloc_at_m(ranked, dataset, m, t)
            rc = recall_at_m(ranked, dataset, m, t)
            rows.append(
                {
                    "overlap": float(t),
                    "m": int(m),
                    "corloc": float(np.mean(list(cl.values()))) if cl else 0.0,
                    "recall": float(np.mean(list(rc.values()))) if rc else 0.0,
                }
            )
    return rows


# --- AP ------------------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PrCurve:
    class_index: int
    scores: np.ndarray
    true_positive: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    num_gt: int
    detections: tuple[Detection, ...] = field(default=())


def _class_gt(dataset: Dataset, class_index: int) -> dict[str, list[BoundingBox]]:
    boxes = {image.id: image.gt_boxes(class_index) for image in dataset}
    return {image_id: found for image_id, found in boxes.items() if found}


def _match(
    detections: Sequence[Detection], gt: Mapping[str, list[BoundingBox]], iou_threshold: float
) -> tuple[list[Detection], np.ndarray]:
    """
    Greedy matching in score order: each detection claims the highest-overlap gt box that
    is still unclaimed and overlaps at least ``iou_threshold``, and is then TP.

    A detection whose only qualifying boxes are already claimed is an FP. This differs from
    the VOC devkit, which looks only at the single best-overlap box and counts an FP when
    that one is claimed, even if another unclaimed box qualifies.
    """
    ordered = sorted(enumerate(detections), key=lambda pair: (-pair[1].score, pair[0]))
    claimed = {image_id: np.zeros(len(boxes), dtype=bool) for image_id, boxes in gt.items()}
    tp = np.zeros(len(ordered), dtype=bool)
    for k, (_, det) in enumerate(ordered):
        boxes = gt.get(det.image_id, [])
        if not boxes:
            continue
        overlaps = np.array([iou(det.box, box) for box in boxes])
        overlaps[claimed[det.image_id]] = -1.0
        j = int(np.argmax(overlaps))
        if overlaps[j] >= iou_threshold:
            claimed[det.image_id][j] = True
            tp[k] = True
    return [det for _, det in ordered], tp


def precision_recall(
    detections: Iterable[Detection],
    dataset: Dataset,
    class_index: int,
    iou_threshold: float = 0.5,
) -> PrCurve:
    own = [d for d in detections if d.class_index == class_index]
    gt = _class_gt(dataset, class_index)
    num_gt = sum(len(boxes) for boxes in gt.values())
    ordered, tp = _match(own, gt, iou_threshold)
    tp_cum = np.cumsum(tp).astype(np.float64)
    fp_cum = np.cumsum(~tp).astype(np.float64)
    precision = tp_cum / np.maximum(tp_cum + fp_cum, np.finfo(np.float64).eps)
    recall = tp_cum / num_gt if num_gt else np.zeros_like(tp_cum)
    return PrCurve(
        class_index=class_index,
        scores=np.array([d.score for d in ordered]),
        true_positive=tp,
        precision=precision,
        recall=recall,
        num_gt=num_gt,
        detections=tuple(ordered),
    )


def ap_from_curve(recall: np.ndarray, precision: np.ndarray, method: str = "all-points") -> float:
    """Area under the PR curve: precision envelope over all points, or 11-point sampling."""
    recall = np.asarray(recall, dtype=np.float64)
    precision = np.asarray(precision, dtype=np.float64)
    if method == "voc07":
        total = 0.0
        for t in np.linspace(0.0, 1.0, 11):
            above = precision[recall >= t]
            total += float(above.max()) if above.size else 0.0
        return total / 11.0
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def average_precision(
    detections: Iterable[Detection],
    dataset: Dataset,
    class_index: int,
    iou_threshold: float = 0.5,
    method: str = "all-points",
) -> float | None:
    """AP of one class; ``None`` when the class has no gt boxes."""
    curve = precision_recall(detections, dataset, class_index, iou_threshold)
    if curve.num_gt == 0:
        return None
    return ap_from_curve(curve.recall, curve.precision, method)


def mean_ap(
    detections: Iterable[Detection],
    dataset: Dataset,
    iou_threshold: float = 0.5,
    method: str = "all-points",
) -> tuple[float | None, dict[int, float | None]]:
    """Unweighted class mean of AP; classes without gt are reported as ``None`` and skipped."""
    rows = list(detections)
    per_class = {
        c: average_precision(rows, dataset, c, iou_threshold, method)
        for c in range(dataset.num_classes)
    }
    defined = [ap for ap in per_class.values() if ap is not None]
    skipped = [c for c, ap in per_class.items() if ap is None]
    if skipped:
        logger.warning("Classes without ground truth excluded from mAP", classes=skipped)
    return (float(np.mean(defined)) if defined else None), per_class


def write_pr_curve(curve: PrCurve, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["rank", "score", "tp", "precision", "recall"])
        for k in range(len(curve.scores)):
            writer.writerow(
                [
                    k + 1,
                    repr(float(curve.scores[k])),
                    int(curve.true_positive[k]),
                    repr(float(curve.precision[k])),
                    repr(float(curve.recall[k])),
                ]
            )
    log_artifact("Wrote PR curve", path, points=len(curve.scores))


# --- error analysis ------------------------------------------------------------------------


def _max_overlap(box: BoundingBox, boxes: Sequence[BoundingBox]) -> float:
    return max((iou(box, other) for other in boxes), default=0.0)


def _categorize(curve: PrCurve, dataset: Dataset, config: EvalConfig) -> list[str]:
    c = curve.class_index
    similar = config.similar_to(c)
    labels: list[str] = []
    for det, is_tp in zip(curve.detections, curve.true_positive, strict=True):
        if is_tp:
            labels.append("cor")
            continue
        image = dataset.by_id.get(det.image_id)
        if image is None:
            labels.append("bg")
            continue
        same = _max_overlap(det.box, image.gt_boxes(c))
        if same >= config.iou_threshold:
            labels.append("dup")
            continue
        if same >= WEAK_OVERLAP:
            labels.append("loc")
            continue
        sim = [item.box for item in image.gt if item.class_index in similar]
        oth = [
            item.box
            for item in image.gt
            if item.class_index != c and item.class_index not in similar
        ]
        if _max_overlap(det.box, sim) >= WEAK_OVERLAP:
            labels.append("sim")
        elif _max_overlap(det.box, oth) >= WEAK_OVERLAP:
            labels.append("oth")
        else:
            labels.append("bg")
    return labels


def error_analysis(
    detections: Iterable[Detection],
    dataset: Dataset,
    class_index: int,
    config: EvalConfig | None = None,
) -> ErrorBreakdown:
    """
    Put every detection of a class, in score order, into exactly one category.

    Cor is a true positive at the AP threshold. Loc is a detection whose best same-class
    overlap lies in [0.1, threshold). Sim and Oth need an overlap of at least 0.1 with a
    similar or an unrelated class. Everything else is BG.

    A false positive overlapping a same-class gt box at or above the threshold can only be
    a second hit on an already matched object. Such duplicates are counted as Dup, apart
    from the five categories above.
    """
    config = config or EvalConfig()
    curve = precision_recall(detections, dataset, class_index, config.iou_threshold)
    labels = _categorize(curve, dataset, config)
    return ErrorBreakdown(
        cor=labels.count("cor"),
        loc=labels.count("loc"),
        sim=labels.count("sim"),
        oth=labels.count("oth"),
        bg=labels.count("bg"),
        dup=labels.count("dup"),
    )


def error_profile(
    detections: Iterable[Detection],
    dataset: Dataset,
    class_index: int,
    config: EvalConfig | None = None,
) -> list[dict[str, float]]:
    """
    Category fractions among the top k detections for every k, with recall at the strict
    threshold and at the weak 0.1 threshold.
    """
    config = config or EvalConfig()
    rows = list(detections)
    curve = precision_recall(rows, dataset, class_index, config.iou_threshold)
    weak = precision_recall(rows, dataset, class_index, WEAK_OVERLAP)
    labels = _categorize(curve, dataset, config)
    counts = dict.fromkeys(CATEGORY_NAMES, 0)
    profile: list[dict[str, float]] = []
    for k, label in enumerate(labels, start=1):
        counts[label] += 1
        profile.append(
            {
                "top": k,
                **{CATEGORY_NAMES[name]: value / k for name, value in counts.items()},
                "recall": float(curve.recall[k - 1]),
                "recall_weak": float(weak.recall[k - 1]),
            }
        )
    return profile


def evaluate_detections(
    detections: Sequence[Detection], dataset: Dataset, config: EvalConfig
) -> dict[str, Any]:
    """Per-class AP and error breakdown plus mAP, shaped for the JSON report."""
    map_value, per_class = mean_ap(detections, dataset, config.iou_threshold, config.ap_method)
    classes: dict[str, Any] = {}
    for c in range(dataset.num_classes):
        name = dataset.class_names[c] if c < len(dataset.class_names) else str(c)
        breakdown = error_analysis(detections, dataset, c, config)
        classes[name] = {
            "class": c,
            "ap": per_class[c],
            "errors": breakdown.to_public_dict(),
            "detections": breakdown.total,
        }
    return {"map": map_value, "ap_method": config.ap_method, "classes": classes}
