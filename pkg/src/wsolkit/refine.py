"""Box refinement by segmenting the object inside a selected box."""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Protocol

import numpy as np
from PIL import Image
from scipy import ndimage

from .exceptions import ConfigError, GeometryError
from .geometry import expand_box, tight_box
from .logging import get_logger, log_artifact
from .models import BoundingBox, Dataset, SelectedInstance

logger = get_logger(__name__)

FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class RefineConfig:
    enabled: bool = True
    expand: float = 0.25
    max_iterations: int = 20
    dump_masks: bool = False

    def __post_init__(self) -> None:
        if self.expand < 0:
            raise ConfigError("refine.expand must be >= 0")
        if self.max_iterations < 1:
            raise ConfigError("refine.max_iterations must be >= 1")

    @classmethod
    def from_config(cls, section: Mapping[str, Any]) -> RefineConfig:
        return cls(
            enabled=bool(section["enabled"]),
            expand=float(section["expand"]),
            max_iterations=int(section["max_iterations"]),
            dump_masks=bool(section.get("dump_masks", False)),
        )


@dataclass(frozen=True, eq=False)
class SegmentMask:
    """Binary foreground mask at image resolution and the box it was grown from."""

    mask: np.ndarray
    box: BoundingBox
    fallback: bool = False

    @property
    def foreground(self) -> int:
        return int(self.mask.sum())


class Segmenter(Protocol):
    def __call__(
        self, pixels: np.ndarray, box: BoundingBox, config: RefineConfig
    ) -> SegmentMask: ...


def _box_mask(shape: tuple[int, int], box: BoundingBox) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    mask[box.y1 : box.y2, box.x1 : box.x2] = True
    return mask


def _two_means(region: np.ndarray, inside: np.ndarray, max_iterations: int) -> np.ndarray | None:
    """
    Alternate nearest-mean assignment and mean re-estimation over an (h, w, 3) region.

    Starts from the box interior as foreground and the ring as background. Ties go to the
    background. Returns ``None`` when the ring is empty.
    """
    if inside.all():
        return None
    fg_mean = region[inside].mean(axis=0)
    bg_mean = region[~inside].mean(axis=0)
    assignment = inside
    for _ in range(max_iterations):
        d_fg = ((region - fg_mean) ** 2).sum(axis=-1)
        d_bg = ((region - bg_mean) ** 2).sum(axis=-1)
        updated = d_fg < d_bg
        if np.array_equal(updated, assignment):
            break
        assignment = updated
        if not assignment.any() or assignment.all():
            break
        fg_mean = region[assignment].mean(axis=0)
        bg_mean = region[~assignment].mean(axis=0)
    return assignment


class TwoMeanSegmenter:
    """
    Colour segmentation with one mean per side.

    The working region is the box grown by ``expand`` on each side; pixels outside it are
    background. The kept foreground is the largest 4-connected component touching the box.
    """

    def __call__(self, pixels: np.ndarray, box: BoundingBox, config: RefineConfig) -> SegmentMask:
        height, width = pixels.shape[:2]
        if not box.fits(width, height):
            raise GeometryError(f"Box {box.as_tuple()} lies outside a {width}x{height} image")
        region_box = expand_box(box, config.expand, width, height)
        region = np.asarray(
            pixels[region_box.y1 : region_box.y2, region_box.x1 : region_box.x2, :3],
            dtype=np.float64,
        )
        inside = np.zeros(region.shape[:2], dtype=bool)
        inside[
            box.y1 - region_box.y1 : box.y2 - region_box.y1,
            box.x1 - region_box.x1 : box.x2 - region_box.x1,
        ] = True

        assignment = _two_means(region, inside, config.max_iterations)
        if assignment is None or not (assignment & inside).any():
            return SegmentMask(_box_mask((height, width), box), box, fallback=True)

        labels, count = ndimage.label(assignment, structure=FOUR_CONNECTED)
        touching = np.unique(labels[inside & assignment])
        sizes = ndimage.sum_labels(np.ones_like(labels), labels, index=touching)
        best = int(touching[int(np.argmax(sizes))])
        logger.debug("Segmented box", components=count, touching=len(touching))

        mask = np.zeros((height, width), dtype=bool)
        mask[region_box.y1 : region_box.y2, region_box.x1 : region_box.x2] = labels == best
        return SegmentMask(mask, box)


def segment_box(
    pixels: np.ndarray,
    box: BoundingBox,
    config: RefineConfig | None = None,
    segmenter: Segmenter | None = None,
) -> SegmentMask:
    return (segmenter or TwoMeanSegmenter())(pixels, box, config or RefineConfig())


def tighten_box(mask: SegmentMask | np.ndarray) -> BoundingBox:
    """Minimal box around every foreground pixel."""
    values = mask.mask if isinstance(mask, SegmentMask) else np.asarray(mask)
    box = tight_box(values)
    if box is None:
        raise GeometryError("Cannot tighten a box around an empty mask")
    return box


def refine_box(
    pixels: np.ndarray, box: BoundingBox, config: RefineConfig | None = None
) -> tuple[BoundingBox, SegmentMask]:
    segment = segment_box(pixels, box, config)
    return tighten_box(segment), segment


@dataclass(frozen=True, eq=False)
class RefinedInstance:
    instance: SelectedInstance
    original: BoundingBox
    mask: SegmentMask | None = None


def refine_instances(
    instances: Sequence[SelectedInstance],
    dataset: Dataset,
    config: RefineConfig,
    threads: int = 1,
) -> list[RefinedInstance]:
    """Refine every instance in input order; with refinement disabled boxes pass through."""
    if not config.enabled:
        logger.info("Refinement disabled, passing boxes through", instances=len(instances))
        return [RefinedInstance(instance, instance.box) for instance in instances]

    def work(instance: SelectedInstance) -> RefinedInstance:
        box, segment = refine_box(dataset.by_id[instance.image_id].pixels, instance.box, config)
        return RefinedInstance(replace(instance, box=box), instance.box, segment)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        refined = list(pool.map(work, instances))
    fallbacks = sum(1 for r in refined if r.mask is not None and r.mask.fallback)
    if fallbacks:
        logger.warning("Segmentation fell back to the input box", count=fallbacks)
    logger.info("Refined instances", instances=len(refined), fallbacks=fallbacks)
    return refined


def save_mask_png(mask: SegmentMask | np.ndarray, path: Path) -> None:
    """Write a mask as an 8-bit PNG with foreground 255 and background 0."""
    values = mask.mask if isinstance(mask, SegmentMask) else np.asarray(mask)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.where(values, 255, 0).astype(np.uint8)).save(path, format="PNG")
    log_artifact("Wrote mask", path)
