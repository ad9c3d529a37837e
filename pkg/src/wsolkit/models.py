"""Typed data models used across wsolkit."""

from __future__ import annotations

from collections.abc import Iterator
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .exceptions import GeometryError


@dataclass(frozen=True, order=True)
class BoundingBox:
    """Integer pixel box, half-open: covers columns [x1, x2) and rows [y1, y2)."""

    x1: int
    y1: int
    x2: int
    y2: int

    def __post_init__(self) -> None:
        if self.x2 <= self.x1 or self.y2 <= self.y1:
            raise GeometryError(
                f"Degenerate box [{self.x1},{self.y1},{self.x2},{self.y2}]: "
                "requires x1 < x2 and y1 < y2"
            )

    @property
    def width(self) -> int:
        return self.x2 - self.x1

    @property
    def height(self) -> int:
        return self.y2 - self.y1

    @property
    def area(self) -> int:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x1, self.y1, self.x2, self.y2)

    def fits(self, width: int, height: int) -> bool:
        return self.x1 >= 0 and self.y1 >= 0 and self.x2 <= width and self.y2 <= height

    def to_public_dict(self) -> dict[str, int]:
        return {"x1": self.x1, "y1": self.y1, "x2": self.x2, "y2": self.y2}


@dataclass(frozen=True)
class GroundTruth:
    class_index: int
    box: BoundingBox

    def to_public_dict(self) -> dict[str, int]:
        return {"class": self.class_index, **self.box.to_public_dict()}


@dataclass(frozen=True, eq=False)
class LabeledImage:
    """
    One image with its image-level labels.

    ``gt`` is carried for evaluation only; training stages read ``labels`` and ``pixels``.
    """

    id: str
    pixels: np.ndarray
    labels: tuple[int, ...]
    gt: tuple[GroundTruth, ...] = ()

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    def has_class(self, class_index: int) -> bool:
        return self.labels[class_index] == 1

    def gt_boxes(self, class_index: int) -> list[BoundingBox]:
        return [item.box for item in self.gt if item.class_index == class_index]


@dataclass(frozen=True, eq=False)
class Dataset:
    images: tuple[LabeledImage, ...]
    num_classes: int
    class_names: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.images)

    def __iter__(self) -> Iterator[LabeledImage]:
        return iter(self.images)

    @cached_property
    def by_id(self) -> dict[str, LabeledImage]:
        return {image.id: image for image in self.images}

    def positives(self, class_index: int) -> list[LabeledImage]:
        return [image for image in self.images if image.has_class(class_index)]

    def negatives(self, class_index: int) -> list[LabeledImage]:
        return [image for image in self.images if not image.has_class(class_index)]

    def label_matrix(self) -> np.ndarray:
        return np.array([image.labels for image in self.images], dtype=np.float64).reshape(
            len(self.images), self.num_classes
        )


@dataclass(frozen=True)
class ScoredProposal:
    """A proposal scored for one class; ``contrast``/``activation`` are raw or normalised."""

    image_id: str
    class_index: int
    box: BoundingBox
    box_index: int
    contrast: float
    activation: float
    fused: float = 0.0
    rank: int = 0
    degenerate: bool = False

    def to_row(self) -> list[object]:
        return [
            self.image_id,
            self.class_index,
            *self.box.as_tuple(),
            repr(self.contrast),
            repr(self.activation),
            repr(self.fused),
            self.rank,
        ]


@dataclass(frozen=True)
class SelectedInstance:
    """A box chosen as a positive instance of ``class_index`` in ``image_id``."""

    class_index: int
    image_id: str
    box: BoundingBox
    score: float

    def to_row(self) -> list[object]:
        return [self.class_index, self.image_id, *self.box.as_tuple(), repr(self.score)]


@dataclass(frozen=True)
class Detection:
    image_id: str
    class_index: int
    box: BoundingBox
    score: float

    def to_row(self) -> list[object]:
        return [self.image_id, self.class_index, *self.box.as_tuple(), repr(self.score)]


@dataclass(frozen=True)
class ProposalSet:
    """Class-agnostic proposals for one image, with their objectness."""

    boxes: tuple[BoundingBox, ...]
    objectness: tuple[float, ...] = ()
    dropped: int = 0

    def __len__(self) -> int:
        return len(self.boxes)

    def as_array(self) -> np.ndarray:
        if not self.boxes:
            return np.zeros((0, 4), dtype=np.int64)
        return np.array([box.as_tuple() for box in self.boxes], dtype=np.int64)


@dataclass(frozen=True)
class ErrorBreakdown:
    """Counts of detection outcome categories for one class."""

    cor: int = 0
    loc: int = 0
    sim: int = 0
    oth: int = 0
    bg: int = 0
    dup: int = 0

    @property
    def total(self) -> int:
        return self.cor + self.loc + self.sim + self.oth + self.bg + self.dup

    def to_public_dict(self) -> dict[str, int]:
        return {
            "Cor": self.cor,
            "Loc": self.loc,
            "Sim": self.sim,
            "Oth": self.oth,
            "BG": self.bg,
            "Dup": self.dup,
        }


@dataclass(frozen=True)
class StageManifest:
    stage: str
    lineage_hash: str
    seed: int
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    config: dict[str, object] = field(default_factory=dict)
    overrides: dict[str, object] = field(default_factory=dict)
    wall_time_sec: float = 0.0

    def to_public_dict(self) -> dict[str, object]:
        return {
            "stage": self.stage,
            "lineage_hash": self.lineage_hash,
            "seed": self.seed,
            "inputs": dict(self.inputs),
            "outputs": dict(self.outputs),
            "config": self.config,
            "overrides": self.overrides,
            "wall_time_sec": self.wall_time_sec,
        }
