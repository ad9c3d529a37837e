"""
Class-specific proposal mining.

Every proposal of every image is scored for every class by two cues: the contrast between
the classifier's confidence on the proposal and on the image with the proposal masked out,
and the class activation mass inside the proposal with a size prior. Both cues are
min-max normalised per (image, class), fused with a fixed ratio, and the top M proposals per
(image, class) are kept.
"""

from __future__ import annotations

import csv
from collections.abc import Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Any

import numpy as np
from scipy.special import expit

from .classifier import ClassifierModel, forward_prepared, prepare, prepare_batch
from .exceptions import ConfigError, GeometryError, ModelError, ParseError
from .geometry import map_box_to_grid
from .logging import get_logger, log_artifact
from .models import BoundingBox, Dataset, LabeledImage, ProposalSet, ScoredProposal

logger = get_logger(__name__)

MINED_HEADER = [
    "image_id",
    "class",
    "x1",
    "y1",
    "x2",
    "y2",
    "contrast",
    "activation",
    "fused",
    "rank",
]
CAM_TOLERANCE = 1e-6
MIN_CROP = 2


class MaskOutStrategy(str, Enum):
    IN_OUT = "in-out"
    WHOLE_OUT = "whole-out"
    IN = "in"


@dataclass(frozen=True)
class MiningConfig:
    top_m: int = 50
    alpha: float = 5.0
    contrast_weight: float = 10.0
    activation_weight: float = 1.0
    mask_out: MaskOutStrategy = MaskOutStrategy.IN_OUT
    batch_size: int = 64

    @classmethod
    def from_config(cls, section: Mapping[str, Any]) -> MiningConfig:
        try:
            strategy = MaskOutStrategy(section["mask_out"])
        except ValueError as exc:
            raise ConfigError(f"Unknown mask-out strategy {section['mask_out']!r}") from exc
        return cls(
            top_m=int(section["top_m"]),
            alpha=float(section["alpha"]),
            contrast_weight=float(section["contrast_weight"]),
            activation_weight=float(section["activation_weight"]),
            mask_out=strategy,
            batch_size=int(section.get("batch_size", 64)),
        )


# --- contrast ------------------------------------------------------------------------------


def mask_out(image: np.ndarray, box: BoundingBox, mean_pixel: np.ndarray) -> np.ndarray:
    """Copy of ``image`` with the box region replaced by ``mean_pixel``."""
    height, width = image.shape[:2]
    if not box.fits(width, height):
        raise GeometryError(f"Box {box.as_tuple()} lies outside a {width}x{height} image")
    out = np.array(image, dtype=np.float64, copy=True)
    out[box.y1 : box.y2, box.x1 : box.x2, :] = mean_pixel
    return out


def crop(image: np.ndarray, box: BoundingBox) -> np.ndarray:
    """The region image of a box; rejects crops smaller than 2x2 after clipping."""
    x1, y1 = max(box.x1, 0), max(box.y1, 0)
    x2, y2 = min(box.x2, image.shape[1]), min(box.y2, image.shape[0])
    if x2 - x1 < MIN_CROP or y2 - y1 < MIN_CROP:
        raise GeometryError(f"Crop of box {box.as_tuple()} is smaller than 2x2")
    return np.asarray(image[y1:y2, x1:x2, :], dtype=np.float64)


def contrast_scores(
    model: ClassifierModel,
    image: np.ndarray,
    boxes: Sequence[BoundingBox],
    strategy: MaskOutStrategy,
    mean_pixel: np.ndarray | None = None,
    batch_size: int = 64,
) -> np.ndarray:
    """
    Raw contrast of every box for every class, shape (len(boxes), C).

    ``in-out`` and ``whole-out`` give differences in [-1, 1]; ``in`` gives probabilities.
    """
    fill = model.mean if mean_pixel is None else np.asarray(mean_pixel, dtype=np.float64)
    strategy = MaskOutStrategy(strategy)
    scores = np.zeros((len(boxes), model.num_classes))
    if not boxes:
        return scores

    whole = np.zeros(model.num_classes)
    if strategy is MaskOutStrategy.WHOLE_OUT:
        whole_logits, _ = forward_prepared(model, prepare(model, image)[None])
        whole = expit(whole_logits[0])

    for start in range(0, len(boxes), batch_size):
        chunk = boxes[start : start + batch_size]
        if strategy is MaskOutStrategy.IN:
            inside = _positive_probs(model, [crop(image, box) for box in chunk])
            scores[start : start + len(chunk)] = inside
            continue
        outside = _positive_probs(model, [mask_out(image, box, fill) for box in chunk])
        if strategy is MaskOutStrategy.IN_OUT:
            reference = _positive_probs(model, [crop(image, box) for box in chunk])
        else:
            reference = np.broadcast_to(whole, outside.shape)
        scores[start : start + len(chunk)] = reference - outside
    return scores


def _positive_probs(model: ClassifierModel, images: Sequence[np.ndarray]) -> np.ndarray:
    logits, _ = forward_prepared(model, prepare_batch(model, images), chunk=len(images) or 1)
    return expit(logits)


def contrast_score(
    model: ClassifierModel,
    image: np.ndarray,
    box: BoundingBox,
    strategy: MaskOutStrategy,
    class_index: int,
    mean_pixel: np.ndarray | None = None,
) -> float:
    if not 0 <= class_index < model.num_classes:
        raise ModelError(f"Class index {class_index} out of range for {model.num_classes} classes")
    return float(contrast_scores(model, image, [box], strategy, mean_pixel)[0, class_index])


# --- activation ----------------------------------------------------------------------------


def integral_image(values: np.ndarray) -> np.ndarray:
    """Summed-area table with a zero first row and column, accumulated in float64."""
    table = np.zeros((values.shape[0] + 1, values.shape[1] + 1), dtype=np.float64)
    table[1:, 1:] = np.cumsum(np.cumsum(np.asarray(values, dtype=np.float64), axis=0), axis=1)
    return table


@dataclass(frozen=True, eq=False)
class ActivationMap:
    """A class activation map (rows = y) and its summed-area table."""

    class_index: int
    values: np.ndarray
    integral: np.ndarray

    @classmethod
    def from_values(cls, class_index: int, values: np.ndarray) -> ActivationMap:
        values = np.asarray(values, dtype=np.float64)
        return cls(class_index, values, integral_image(values))

    @property
    def width(self) -> int:
        return int(self.values.shape[1])

    @property
    def height(self) -> int:
        return int(self.values.shape[0])

    @property
    def total(self) -> float:
        return float(self.integral[-1, -1])

    def region_sum(self, x1: int, y1: int, x2: int, y2: int) -> float:
        """Sum over columns [x1, x2) and rows [y1, y2) in map coordinates."""
        table = self.integral
        return float(table[y1, x1] + table[y2, x2] - table[y1, x2] - table[y2, x1])


def class_activation_maps(model: ClassifierModel, image: np.ndarray) -> list[ActivationMap]:
    """
    One map per class, m_c(x, y) = sum_k w_k^c a_k(x, y).

    The spatial mean of each map must reproduce the class logit minus its bias.
    """
    logits, maps = forward_prepared(model, prepare(model, image)[None])
    weights = model.params["cls_w"]
    cams = np.tensordot(maps[0], weights, axes=([2], [1]))  # (H', W', C)
    area = cams.shape[0] * cams.shape[1]
    result: list[ActivationMap] = []
    for c in range(model.num_classes):
        amap = ActivationMap.from_values(c, cams[:, :, c])
        expected = float(logits[0, c] - model.params["cls_b"][c])
        observed = amap.total / area
        if abs(observed - expected) > CAM_TOLERANCE * max(1.0, abs(expected)):
            raise ModelError(
                f"Activation map of class {c} averages {observed!r}, "
                f"logit minus bias is {expected!r}"
            )
        result.append(amap)
    return result


def class_activation_map(
    model: ClassifierModel, image: np.ndarray, class_index: int
) -> ActivationMap:
    if not 0 <= class_index < model.num_classes:
        raise ModelError(f"Class index {class_index} out of range for {model.num_classes} classes")
    return class_activation_maps(model, image)[class_index]


def box_response(
    amap: ActivationMap, box: BoundingBox, image_width: int, image_height: int
) -> tuple[float, bool]:
    """
    Activation mass inside ``box`` read off the summed-area table.

    Returns the response and a flag that is set when the mapped box is empty.
    """
    x1, y1, x2, y2 = map_box_to_grid(box, image_width, image_height, amap.width, amap.height)
    if x2 <= x1 or y2 <= y1:
        return 0.0, True
    return amap.region_sum(x1, y1, x2, y2), False


def activation_score(
    amap: ActivationMap, box: BoundingBox, alpha: float, image_width: int, image_height: int
) -> tuple[float, bool]:
    """
    Mean activation density plus ``alpha`` times the box's share of the total map mass.

    When the map sums to zero the share term is taken as 0 and the result is flagged.
    """
    response, empty = box_response(amap, box, image_width, image_height)
    score = response / float(box.area)
    total = amap.total
    if total == 0.0:
        return score, True
    return score + alpha * response / total, empty


# --- fusion and selection ------------------------------------------------------------------


def _normalize(values: np.ndarray) -> tuple[np.ndarray, bool]:
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        return np.full(values.shape, 0.5), True
    return (values - lo) / (hi - lo), False


def _rank_key(proposal: ScoredProposal) -> tuple[float, float, int]:
    return (-proposal.fused, -proposal.contrast, proposal.box_index)


def normalize_and_fuse(
    proposals: Iterable[ScoredProposal],
    contrast_weight: float = 10.0,
    activation_weight: float = 1.0,
) -> list[ScoredProposal]:
    """
    Min-max normalise each cue per (image, class), fuse, and rank.

    A channel whose values are all equal is set to 0.5 and its proposals are flagged
    ``degenerate``. Output is grouped by (image, class) in first-seen order, each group
    sorted by fused score, then normalised contrast, then lower box index.
    """
    groups: dict[tuple[str, int], list[ScoredProposal]] = {}
    for proposal in proposals:
        groups.setdefault((proposal.image_id, proposal.class_index), []).append(proposal)
    if not groups:
        raise ValueError("normalize_and_fuse needs at least one proposal")

    total_weight = contrast_weight + activation_weight
    fused_out: list[ScoredProposal] = []
    degenerate_groups = 0
    for group in groups.values():
        contrast, flat_c = _normalize(np.array([p.contrast for p in group], dtype=np.float64))
        activation, flat_a = _normalize(np.array([p.activation for p in group], dtype=np.float64))
        degenerate_groups += int(flat_c or flat_a)
        scored = [
            replace(
                proposal,
                contrast=float(contrast[i]),
                activation=float(activation[i]),
                fused=float(
                    (contrast_weight * contrast[i] + activation_weight * activation[i])
                    / total_weight
                ),
                degenerate=proposal.degenerate or flat_c or flat_a,
            )
            for i, proposal in enumerate(group)
        ]
        scored.sort(key=_rank_key)
        fused_out.extend(replace(p, rank=rank) for rank, p in enumerate(scored, start=1))
    if degenerate_groups:
        logger.debug("Degenerate score channel set to 0.5", groups=degenerate_groups)
    return fused_out


def top_m_select(proposals: Sequence[ScoredProposal], m: int) -> list[ScoredProposal]:
    """The ``m`` best proposals under the ranking order (fewer when the pool is smaller)."""
    if m < 1:
        raise ConfigError(f"M must be >= 1, got {m}")
    return sorted(proposals, key=_rank_key)[:m]


# --- per-image and dataset mining ----------------------------------------------------------


@dataclass(frozen=True)
class ImageMining:
    mined: list[ScoredProposal]
    contrast_top: list[ScoredProposal]
    skipped: int = 0


def mine_image(
    model: ClassifierModel,
    image: LabeledImage,
    proposals: ProposalSet,
    config: MiningConfig,
    mean_pixel: np.ndarray | None = None,
) -> ImageMining:
    """
    Score, fuse and select for every class of one image.

    Also returns, per class, the proposal with the best contrast alone (the contrast-only
    baseline). Proposals whose crop is smaller than 2x2 are skipped and counted.
    """
    indexed = [
        (i, box)
        for i, box in enumerate(proposals.boxes)
        if box.width >= MIN_CROP and box.height >= MIN_CROP
    ]
    boxes = [box for _, box in indexed]
    skipped = len(proposals.boxes) - len(boxes)
    if not boxes:
        return ImageMining([], [], skipped)

    pixels = image.pixels
    contrast = contrast_scores(model, pixels, boxes, config.mask_out, mean_pixel, config.batch_size)
    cams = class_activation_maps(model, pixels)
    mined: list[ScoredProposal] = []
    contrast_top: list[ScoredProposal] = []
    for c in range(model.num_classes):
        raw: list[ScoredProposal] = []
        for j, box in enumerate(boxes):
            act, flagged = activation_score(cams[c], box, config.alpha, image.width, image.height)
            raw.append(
                ScoredProposal(
                    image_id=image.id,
                    class_index=c,
                    box=box,
                    box_index=indexed[j][0],
                    contrast=float(contrast[j, c]),
                    activation=act,
                    degenerate=flagged,
                )
            )
        ranked = normalize_and_fuse(raw, config.contrast_weight, config.activation_weight)
        mined.extend(top_m_select(ranked, config.top_m))
        by_contrast = normalize_and_fuse(raw, 1.0, 0.0)
        contrast_top.extend(top_m_select(by_contrast, 1))
    return ImageMining(mined, contrast_top, skipped)


@dataclass(frozen=True)
class MiningResult:
    mined: list[ScoredProposal]
    contrast_top: list[ScoredProposal]


def mine_dataset(
    model: ClassifierModel,
    dataset: Dataset,
    proposals: Mapping[str, ProposalSet],
    config: MiningConfig,
    mean_pixel: np.ndarray | None = None,
    threads: int = 1,
) -> MiningResult:
    """Mine every image; output order follows the dataset order regardless of ``threads``."""
    empty = ProposalSet(boxes=())

    def work(image: LabeledImage) -> ImageMining:
        return mine_image(model, image, proposals.get(image.id, empty), config, mean_pixel)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        per_image = list(pool.map(work, dataset.images))

    mined = [p for result in per_image for p in result.mined]
    contrast_top = [p for result in per_image for p in result.contrast_top]
    skipped = sum(result.skipped for result in per_image)
    if skipped:
        logger.warning("Skipped proposals smaller than 2x2", count=skipped)
    flagged = sum(1 for p in mined if p.degenerate)
    logger.info(
        "Mined proposals",
        images=len(dataset),
        rows=len(mined),
        strategy=config.mask_out.value,
        degenerate=flagged,
    )
    return MiningResult(mined=mined, contrast_top=contrast_top)


def ranked_by_image(
    mined: Iterable[ScoredProposal], class_index: int | None = None
) -> dict[tuple[str, int], list[ScoredProposal]]:
    """Group mined rows by (image, class), each group in rank order."""
    groups: dict[tuple[str, int], list[ScoredProposal]] = {}
    for proposal in mined:
        if class_index is not None and proposal.class_index != class_index:
            continue
        groups.setdefault((proposal.image_id, proposal.class_index), []).append(proposal)
    for group in groups.values():
        group.sort(key=lambda p: p.rank)
    return groups


# --- CSV -----------------------------------------------------------------------------------


def write_mined(rows: Iterable[ScoredProposal], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(MINED_HEADER)
        for row in rows:
            writer.writerow(row.to_row())
            count += 1
    log_artifact("Wrote mined proposals", path, rows=count)


def read_mined(path: Path) -> list[ScoredProposal]:
    rows: list[ScoredProposal] = []
    per_group: dict[tuple[str, int], int] = {}
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != MINED_HEADER:
            raise ParseError("Unexpected mined-proposal header", path, 1)
        for line_number, record in enumerate(reader, start=2):
            if not record:
                continue
            if len(record) != len(MINED_HEADER):
                raise ParseError(f"expected {len(MINED_HEADER)} fields", path, line_number)
            try:
                image_id, c = record[0], int(record[1])
                box = BoundingBox(*(int(v) for v in record[2:6]))
                key = (image_id, c)
                per_group[key] = per_group.get(key, -1) + 1
                rows.append(
                    ScoredProposal(
                        image_id=image_id,
                        class_index=c,
                        box=box,
                        box_index=per_group[key],
                        contrast=float(record[6]),
                        activation=float(record[7]),
                        fused=float(record[8]),
                        rank=int(record[9]),
                    )
                )
            except (ValueError, GeometryError) as exc:
                raise ParseError(str(exc), path, line_number) from exc
    return rows
