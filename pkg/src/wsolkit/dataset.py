"""Synthetic scenes, dataset manifests, proposal ingestion and dataset statistics."""

from __future__ import annotations

import csv
import json
import math
import struct
from collections.abc import Iterable, Mapping
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image, ImageDraw

from .exceptions import ConfigError, ParseError, WsolkitError
from .geometry import clip_box, tight_box
from .logging import get_logger, log_artifact
from .models import BoundingBox, Dataset, GroundTruth, LabeledImage, ProposalSet

logger = get_logger(__name__)

RAW_MAGIC = b"WSOL"
RAW_HEADER = struct.Struct("<4sIII")
MIN_IMAGE_SIDE = 32
MIN_PROPOSAL_SIDE = 2
OBJECT_MARGIN = 2
SHAPES = ("square", "circle", "triangle", "diamond")


@dataclass(frozen=True)
class ClassStyle:
    name: str
    shape: str
    color: tuple[int, int, int]


DEFAULT_PALETTE: tuple[ClassStyle, ...] = (
    ClassStyle("red-square", "square", (220, 40, 40)),
    ClassStyle("blue-circle", "circle", (40, 70, 220)),
    ClassStyle("green-triangle", "triangle", (40, 170, 60)),
    ClassStyle("orange-diamond", "diamond", (240, 150, 20)),
    ClassStyle("purple-circle", "circle", (160, 50, 200)),
    ClassStyle("teal-square", "square", (30, 180, 190)),
    ClassStyle("pink-triangle", "triangle", (230, 90, 170)),
    ClassStyle("brown-diamond", "diamond", (120, 80, 30)),
)


def _parse_palette(raw: Any) -> tuple[ClassStyle, ...]:
    if raw is None:
        return DEFAULT_PALETTE
    if not isinstance(raw, list):
        raise ConfigError("data.palette must be a list of {name, shape, color} entries")
    styles: list[ClassStyle] = []
    for index, entry in enumerate(raw):
        try:
            shape = str(entry["shape"])
            color = tuple(int(v) for v in entry["color"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"data.palette[{index}] is malformed: {exc}") from exc
        if shape not in SHAPES:
            raise ConfigError(f"data.palette[{index}].shape must be one of {', '.join(SHAPES)}")
        if len(color) != 3 or not all(0 <= v <= 255 for v in color):  # noqa: PLR2004
            raise ConfigError(f"data.palette[{index}].color must be three values in [0, 255]")
        name = str(entry.get("name", f"class-{index}"))
        styles.append(ClassStyle(name, shape, (color[0], color[1], color[2])))
    return tuple(styles)


@dataclass(frozen=True)
class SyntheticConfig:
    num_images: int
    width: int
    height: int
    num_classes: int
    objects_per_image: tuple[int, int] = (1, 2)
    object_size: tuple[int, int] = (16, 26)
    palette: tuple[ClassStyle, ...] = DEFAULT_PALETTE
    clutter_density: float = 0.0
    noise: float = 0.02
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_classes < 2:  # noqa: PLR2004
            raise ConfigError("num_classes must be >= 2")
        if self.width < MIN_IMAGE_SIDE or self.height < MIN_IMAGE_SIDE:
            raise ConfigError(f"image_size must be at least {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}")
        if self.num_images < 0:
            raise ConfigError("num_images must be >= 0")
        lo, hi = self.objects_per_image
        if lo < 0 or hi < lo:
            raise ConfigError("objects_per_image must be a range 0 <= lo <= hi")
        smin, smax = self.object_size
        if smin < 4 or smax < smin:  # noqa: PLR2004
            raise ConfigError("object_size must be a range 4 <= lo <= hi")
        if smax > min(self.width, self.height):
            raise ConfigError(
                f"object_size {smax} does not fit a {self.width}x{self.height} image"
            )
        if len(self.palette) < self.num_classes:
            raise ConfigError(
                f"palette defines {len(self.palette)} classes, num_classes is {self.num_classes}"
            )
        if self.clutter_density < 0 or self.noise < 0:
            raise ConfigError("clutter_density and noise must be >= 0")

    @classmethod
    def from_config(
        cls, section: Mapping[str, Any], seed: int, *, num_images: int | None = None
    ) -> SyntheticConfig:
        try:
            return cls(
                num_images=int(section["num_images"] if num_images is None else num_images),
                width=int(section["image_width"]),
                height=int(section["image_height"]),
                num_classes=int(section["num_classes"]),
                objects_per_image=_pair(section["objects_per_image"]),
                object_size=_pair(section["object_size"]),
                palette=_parse_palette(section.get("palette")),
                clutter_density=float(section.get("clutter_density", 0.0)),
                noise=float(section.get("noise", 0.0)),
                seed=int(seed),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"Invalid data section: {exc}") from exc


def _pair(value: Any) -> tuple[int, int]:
    lo, hi = value
    return int(lo), int(hi)


@dataclass(frozen=True)
class ProposalConfig:
    scales: tuple[int, ...] = (14, 20, 28, 40)
    aspect_ratios: tuple[float, ...] = (1.0,)
    stride_fraction: float = 0.5
    jitter_boxes: int = 40
    jitter_scale: float = 0.15
    max_per_image: int = 2000

    @classmethod
    def from_config(cls, section: Mapping[str, Any]) -> ProposalConfig:
        config = cls(
            scales=tuple(int(s) for s in section["scales"]),
            aspect_ratios=tuple(float(a) for a in section["aspect_ratios"]),
            stride_fraction=float(section["stride_fraction"]),
            jitter_boxes=int(section["jitter_boxes"]),
            jitter_scale=float(section["jitter_scale"]),
            max_per_image=int(section["max_per_image"]),
        )
        if not config.scales or min(config.scales) < 2:  # noqa: PLR2004
            raise ConfigError("proposals.scales must be nonempty and >= 2")
        if not config.aspect_ratios or min(config.aspect_ratios) <= 0:
            raise ConfigError("proposals.aspect_ratios must be nonempty and > 0")
        if config.stride_fraction <= 0 or config.max_per_image < 1:
            raise ConfigError("proposals.stride_fraction must be > 0 and max_per_image >= 1")
        return config


def _draw_shape(draw: ImageDraw.ImageDraw, shape: str, x: int, y: int, size: int) -> None:
    last = size - 1
    half = last / 2.0
    if shape == "square":
        draw.rectangle([x, y, x + last, y + last], fill=255)
    elif shape == "circle":
        draw.ellipse([x, y, x + last, y + last], fill=255)
    elif shape == "triangle":
        draw.polygon([(x + half, y), (x + last, y + last), (x, y + last)], fill=255)
    else:
        draw.polygon(
            [(x + half, y), (x + last, y + half), (x + half, y + last), (x, y + half)], fill=255
        )


def _overlaps(region: tuple[int, int, int, int], placed: list[tuple[int, int, int, int]]) -> bool:
    x1, y1, x2, y2 = region
    for px1, py1, px2, py2 in placed:
        if (
            x1 < px2 + OBJECT_MARGIN
            and px1 < x2 + OBJECT_MARGIN
            and y1 < py2 + OBJECT_MARGIN
            and py1 < y2 + OBJECT_MARGIN
        ):
            return True
    return False


def render_scene(
    config: SyntheticConfig, rng: np.random.Generator, image_id: str
) -> LabeledImage:
    """Render one scene: light noisy background, gray clutter, then non-overlapping objects."""
    w, h = config.width, config.height
    base = int(rng.integers(225, 251))
    canvas = Image.new("RGB", (w, h), color=(base, base, base))
    draw = ImageDraw.Draw(canvas)

    clutter_count = int(rng.poisson(config.clutter_density * w * h / 1000.0))
    for _ in range(clutter_count):
        cw, ch = (int(v) for v in rng.integers(3, 9, size=2))
        cx, cy = int(rng.integers(0, w - cw + 1)), int(rng.integers(0, h - ch + 1))
        gray = int(rng.integers(110, 190))
        draw.rectangle([cx, cy, cx + cw - 1, cy + ch - 1], fill=(gray, gray, gray))

    lo, hi = config.objects_per_image
    wanted = int(rng.integers(lo, hi + 1))
    placed: list[tuple[int, int, int, int]] = []
    gt: list[GroundTruth] = []
    for _ in range(wanted):
        class_index = int(rng.integers(0, config.num_classes))
        size = int(rng.integers(config.object_size[0], config.object_size[1] + 1))
        for _attempt in range(100):
            x = int(rng.integers(0, w - size + 1))
            y = int(rng.integers(0, h - size + 1))
            region = (x, y, x + size, y + size)
            if not _overlaps(region, placed):
                break
        else:
            continue
        style = config.palette[class_index]
        mask = Image.new("L", (w, h), 0)
        _draw_shape(ImageDraw.Draw(mask), style.shape, x, y, size)
        mask_array = np.asarray(mask) > 0
        box = tight_box(mask_array)
        if box is None:
            continue
        canvas.paste(style.color, mask=mask)
        placed.append(region)
        gt.append(GroundTruth(class_index, box))

    pixels = np.asarray(canvas, dtype=np.float64)
    if config.noise > 0:
        pixels = pixels + rng.normal(0.0, config.noise * 255.0, size=pixels.shape)
    quantized = np.clip(np.round(pixels), 0, 255).astype(np.uint8)
    labels = [0] * config.num_classes
    for item in gt:
        labels[item.class_index] = 1
    return LabeledImage(
        id=image_id,
        pixels=_freeze(quantized.astype(np.float32) / np.float32(255.0)),
        labels=tuple(labels),
        gt=tuple(gt),
    )


def _freeze(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


def generate_synthetic(config: SyntheticConfig, split: str = "train") -> Dataset:
    """Render ``config.num_images`` scenes; fully determined by ``(config.seed, split)``."""
    split_index = {"train": 0, "test": 1}.get(split, 2)
    rng = np.random.default_rng([config.seed, split_index])
    images = tuple(
        render_scene(config, rng, f"{split}-{index:04d}") for index in range(config.num_images)
    )
    names = tuple(style.name for style in config.palette[: config.num_classes])
    logger.info(
        "Generated synthetic split",
        split=split,
        images=len(images),
        objects=sum(len(image.gt) for image in images),
    )
    return Dataset(images=images, num_classes=config.num_classes, class_names=names)


def similar_groups(palette: Iterable[ClassStyle], num_classes: int) -> list[list[int]]:
    """Classes drawn with the same shape form one group; singletons are omitted."""
    by_shape: dict[str, list[int]] = {}
    for index, style in enumerate(list(palette)[:num_classes]):
        by_shape.setdefault(style.shape, []).append(index)
    return [group for group in by_shape.values() if len(group) > 1]


def mean_pixel(dataset: Dataset) -> np.ndarray:
    """Per-channel mean over every pixel of every image, accumulated in float64."""
    total = np.zeros(3, dtype=np.float64)
    count = 0
    for image in dataset:
        total += image.pixels.reshape(-1, 3).sum(axis=0, dtype=np.float64)
        count += image.height * image.width
    if count == 0:
        raise WsolkitError("Cannot compute the mean pixel of an empty dataset")
    return total / count


# --- image files ---------------------------------------------------------------------------


def write_raw_image(pixels: np.ndarray, path: Path) -> None:
    height, width, channels = pixels.shape
    header = RAW_HEADER.pack(RAW_MAGIC, width, height, channels)
    path.write_bytes(header + np.ascontiguousarray(pixels, dtype="<f4").tobytes())


def read_raw_image(path: Path) -> np.ndarray:
    data = path.read_bytes()
    if len(data) < RAW_HEADER.size:
        raise ParseError("Raw image shorter than its header", path)
    magic, width, height, channels = RAW_HEADER.unpack_from(data)
    if magic != RAW_MAGIC:
        raise ParseError(f"Bad raw image magic {magic!r}", path)
    expected = width * height * channels * 4
    body = data[RAW_HEADER.size :]
    if len(body) != expected:
        raise ParseError(f"Raw image body is {len(body)} bytes, expected {expected}", path)
    array = np.frombuffer(body, dtype="<f4").reshape(height, width, channels)
    return array.astype(np.float32)


def write_png_image(pixels: np.ndarray, path: Path) -> None:
    quantized = np.clip(np.round(pixels * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(quantized).save(path, format="PNG")


def read_png_image(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        array = np.asarray(img.convert("RGB"), dtype=np.uint8)
    return array.astype(np.float32) / np.float32(255.0)


def save_dataset(dataset: Dataset, directory: Path, image_format: str = "png") -> Path:
    """Write ``manifest.json`` plus one image file per entry; returns the manifest path."""
    image_dir = directory / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    entries: list[dict[str, Any]] = []
    for image in dataset:
        if image_format == "raw":
            filename = f"images/{image.id}.bin"
            write_raw_image(image.pixels, directory / filename)
        else:
            filename = f"images/{image.id}.png"
            write_png_image(image.pixels, directory / filename)
        entries.append(
            {
                "id": image.id,
                "file": filename,
                "labels": list(image.labels),
                "gt": [item.to_public_dict() for item in image.gt],
            }
        )
    manifest = {
        "num_classes": dataset.num_classes,
        "class_names": list(dataset.class_names),
        "images": entries,
    }
    manifest_path = directory / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", "utf-8")
    log_artifact("Wrote dataset manifest", manifest_path, images=len(entries))
    return manifest_path


def _parse_gt(raw: Any, manifest_path: Path, image_id: str) -> GroundTruth:
    try:
        box = BoundingBox(int(raw["x1"]), int(raw["y1"]), int(raw["x2"]), int(raw["y2"]))
        return GroundTruth(int(raw["class"]), box)
    except (KeyError, TypeError, ValueError, WsolkitError) as exc:
        raise ParseError(f"Bad gt entry for image {image_id}: {exc}", manifest_path) from exc


def load_manifest(path: Path) -> Dataset:
    """Load a dataset manifest and every image it references."""
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"Unreadable manifest: {exc}", path) from exc

    entries = manifest.get("images") if isinstance(manifest, dict) else None
    if not isinstance(entries, list):
        raise ParseError("Manifest must contain an 'images' list", path)

    num_classes = manifest.get("num_classes")
    if num_classes is None:
        num_classes = len(entries[0]["labels"]) if entries else 0
    images: list[LabeledImage] = []
    seen: set[str] = set()
    for entry in entries:
        try:
            image_id = str(entry["id"])
            file = path.parent / str(entry["file"])
            labels = tuple(int(v) for v in entry["labels"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"Bad manifest entry: {exc}", path) from exc
        if image_id in seen:
            raise ParseError(f"Duplicate image id {image_id}", path)
        seen.add(image_id)
        if len(labels) != num_classes or any(v not in (0, 1) for v in labels):
            raise ParseError(f"Image {image_id} must have {num_classes} binary labels", path)
        if not file.exists():
            raise ParseError(f"Image {image_id} references missing file {file.name}", path)
        pixels = read_raw_image(file) if file.suffix == ".bin" else read_png_image(file)
        if pixels.ndim != 3 or pixels.shape[2] != 3:  # noqa: PLR2004
            raise ParseError(f"Image {image_id} must be HxWx3", file)
        if float(pixels.min(initial=0.0)) < 0.0 or float(pixels.max(initial=0.0)) > 1.0:
            raise ParseError(f"Image {image_id} has pixel values outside [0, 1]", file)
        gt = tuple(_parse_gt(raw, path, image_id) for raw in entry.get("gt", []))
        images.append(LabeledImage(image_id, _freeze(pixels), labels, gt))

    names = tuple(manifest.get("class_names") or [f"class-{c}" for c in range(num_classes)])
    log_artifact("Loaded dataset manifest", path, images=len(images))
    return Dataset(images=tuple(images), num_classes=int(num_classes), class_names=names)


# --- proposals -----------------------------------------------------------------------------


def generate_proposals(
    width: int, height: int, config: ProposalConfig, rng: np.random.Generator
) -> ProposalSet:
    """Dense multi-scale grid plus seeded jittered boxes, deduplicated and capped."""
    candidates: list[tuple[int, int, int, int]] = [(0, 0, width, height)]
    for scale in config.scales:
        for aspect in config.aspect_ratios:
            bw = max(2, int(round(scale * math.sqrt(aspect))))
            bh = max(2, int(round(scale / math.sqrt(aspect))))
            if bw > width or bh > height:
                continue
            stride = max(1, int(round(scale * config.stride_fraction)))
            xs = sorted(set(range(0, width - bw + 1, stride)) | {width - bw})
            ys = sorted(set(range(0, height - bh + 1, stride)) | {height - bh})
            candidates.extend((x, y, x + bw, y + bh) for y in ys for x in xs)

    for _ in range(config.jitter_boxes):
        scale = float(rng.choice(config.scales)) * math.exp(
            rng.uniform(-config.jitter_scale, config.jitter_scale)
        )
        aspect = float(rng.choice(config.aspect_ratios))
        bw = scale * math.sqrt(aspect)
        bh = scale / math.sqrt(aspect)
        cx, cy = rng.uniform(0, width), rng.uniform(0, height)
        candidates.append(
            (
                int(math.floor(cx - bw / 2)),
                int(math.floor(cy - bh / 2)),
                int(math.ceil(cx + bw / 2)),
                int(math.ceil(cy + bh / 2)),
            )
        )

    boxes: list[BoundingBox] = []
    seen: set[tuple[int, int, int, int]] = set()
    for raw in candidates:
        box = clip_box(raw, width, height)
        if box is None or min(box.width, box.height) < MIN_PROPOSAL_SIDE:
            continue
        if box.as_tuple() in seen:
            continue
        seen.add(box.as_tuple())
        boxes.append(box)
        if len(boxes) >= config.max_per_image:
            break
    return ProposalSet(boxes=tuple(boxes), objectness=tuple(0.0 for _ in boxes))


def generate_proposal_sets(
    dataset: Dataset, config: ProposalConfig, seed: int
) -> dict[str, ProposalSet]:
    """Proposals for every image; each image's jitter stream is seeded by its position."""
    return {
        image.id: generate_proposals(
            image.width, image.height, config, np.random.default_rng([seed, index])
        )
        for index, image in enumerate(dataset)
    }


def save_proposals(proposals: Mapping[str, ProposalSet], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["image_id", "x1", "y1", "x2", "y2", "objectness"])
        for image_id, proposal_set in proposals.items():
            objectness = proposal_set.objectness or tuple(0.0 for _ in proposal_set.boxes)
            for box, score in zip(proposal_set.boxes, objectness, strict=True):
                writer.writerow([image_id, *box.as_tuple(), repr(float(score))])
    log_artifact("Wrote proposals", path, images=len(proposals))


def _parse_coordinate(value: str) -> float:
    number = float(value)
    if not math.isfinite(number):
        raise ValueError(f"non-finite coordinate {value!r}")
    return number


def load_proposals(path: Path, dataset: Dataset | None = None) -> dict[str, ProposalSet]:
    """
    Read ``image_id,x1,y1,x2,y2[,objectness]`` rows.

    Rows with ``x2 <= x1`` or ``y2 <= y1`` are rejected with their line number. When a
    dataset is given, every image id must exist in it, boxes are clipped to the image and
    boxes with no area left after clipping are dropped and counted.
    """
    boxes: dict[str, list[BoundingBox]] = {}
    scores: dict[str, list[float]] = {}
    dropped: dict[str, int] = {}
    if dataset is not None:
        for image in dataset:
            boxes[image.id], scores[image.id], dropped[image.id] = [], [], 0

    with open(path, encoding="utf-8", newline="") as f:
        for line_number, row in enumerate(csv.reader(f), start=1):
            if not row or not "".join(row).strip():
                continue
            if line_number == 1 and row[0].strip() == "image_id":
                continue
            if len(row) not in (5, 6):  # noqa: PLR2004
                raise ParseError(f"expected 5 or 6 fields, got {len(row)}", path, line_number)
            image_id = row[0].strip()
            try:
                x1, y1, x2, y2 = (_parse_coordinate(v) for v in row[1:5])
                has_score = len(row) == 6 and bool(row[5].strip())  # noqa: PLR2004
                objectness = float(row[5]) if has_score else 0.0
            except ValueError as exc:
                raise ParseError(f"non-numeric field: {exc}", path, line_number) from exc
            if x2 <= x1 or y2 <= y1:
                raise ParseError(
                    f"degenerate box ({x1}, {y1}, {x2}, {y2}) requires x1 < x2 and y1 < y2",
                    path,
                    line_number,
                )
            raw = (math.floor(x1), math.floor(y1), math.ceil(x2), math.ceil(y2))
            if dataset is not None:
                image = dataset.by_id.get(image_id)
                if image is None:
                    raise ParseError(f"unknown image id {image_id}", path, line_number)
                box = clip_box(raw, image.width, image.height)
                if box is None:
                    dropped[image_id] += 1
                    continue
            else:
                box = BoundingBox(*raw)
            boxes.setdefault(image_id, []).append(box)
            scores.setdefault(image_id, []).append(objectness)
            dropped.setdefault(image_id, 0)

    total_dropped = sum(dropped.values())
    if total_dropped:
        logger.warning("Dropped zero-area proposals after clipping", count=total_dropped)
    log_artifact("Loaded proposals", path, images=len(boxes))
    return {
        image_id: ProposalSet(tuple(boxes[image_id]), tuple(scores[image_id]), dropped[image_id])
        for image_id in boxes
    }
