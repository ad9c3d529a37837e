"""
Multi-label classification network with a global-average-pooling head.

Architecture: conv3x3(F1)+ReLU -> maxpool2 -> conv3x3(K)+ReLU -> GAP -> linear(C).
Each class c gets a sigmoid probability and its complement, giving the 2C-dimensional
output whose expanded-label loss is summed over classes and samples.
"""

from __future__ import annotations

import json
import math
import struct
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image
from scipy.special import expit

from . import layers
from .dataset import mean_pixel
from .exceptions import ConfigError, ModelError, ParseError, TrainingError
from .logging import get_logger, log_artifact
from .models import Dataset

logger = get_logger(__name__)

EPSILON = 1e-7
CHECKPOINT_MAGIC = b"WSCM"
CHECKPOINT_VERSION = 1
PARAM_ORDER = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "cls_w", "cls_b")


@dataclass(frozen=True)
class ClassifierConfig:
    input_size: int = 64
    conv1_filters: int = 16
    num_maps: int = 32
    learning_rate: float = 0.005
    iterations: int = 500
    batch_size: int = 32
    momentum: float = 0.0
    weight_decay: float = 0.0
    init_scale: float = 0.05

    def __post_init__(self) -> None:
        if self.input_size < 4 or self.input_size % 2:  # noqa: PLR2004
            raise ConfigError("classifier.input_size must be an even number >= 4")
        if self.batch_size < 1 or self.iterations < 0 or self.learning_rate < 0:
            raise ConfigError("classifier batch_size/iterations/learning_rate out of range")

    @classmethod
    def from_config(cls, section: Mapping[str, Any]) -> ClassifierConfig:
        return cls(**{key: section[key] for key in cls.__dataclass_fields__ if key in section})


@dataclass
class ClassifierModel:
    """Parameters of the fixed architecture plus the mean pixel used to centre inputs."""

    num_classes: int
    input_size: int = 64
    conv1_filters: int = 16
    num_maps: int = 32
    mean: np.ndarray = field(default_factory=lambda: np.zeros(3))
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {
            "conv1_w": (3, 3, 3, self.conv1_filters),
            "conv1_b": (self.conv1_filters,),
            "conv2_w": (self.conv1_filters, 3, 3, self.num_maps),
            "conv2_b": (self.num_maps,),
            "cls_w": (self.num_classes, self.num_maps),
            "cls_b": (self.num_classes,),
        }

    def require_initialized(self) -> None:
        for name, shape in self.param_shapes().items():
            value = self.params.get(name)
            if value is None:
                raise ModelError(f"Classifier parameter '{name}' is not initialised")
            if value.shape != shape:
                raise ModelError(
                    f"Classifier parameter '{name}' has shape {value.shape}, want {shape}"
                )

    @property
    def map_size(self) -> int:
        return self.input_size // 2

    def copy(self) -> ClassifierModel:
        return ClassifierModel(
            num_classes=self.num_classes,
            input_size=self.input_size,
            conv1_filters=self.conv1_filters,
            num_maps=self.num_maps,
            mean=self.mean.copy(),
            params={name: value.copy() for name, value in self.params.items()},
        )


def init_classifier(
    num_classes: int,
    config: ClassifierConfig,
    rng: np.random.Generator,
    mean: np.ndarray | None = None,
) -> ClassifierModel:
    """He-normal convolutions with zero biases; the class layer is uniform(-s, s)."""
    model = ClassifierModel(
        num_classes=num_classes,
        input_size=config.input_size,
        conv1_filters=config.conv1_filters,
        num_maps=config.num_maps,
        mean=np.zeros(3) if mean is None else np.asarray(mean, dtype=np.float64),
    )
    shapes = model.param_shapes()
    model.params = {
        "conv1_w": rng.normal(0.0, math.sqrt(2.0 / 27.0), size=shapes["conv1_w"]),
        "conv1_b": np.zeros(shapes["conv1_b"]),
        "conv2_w": rng.normal(
            0.0, math.sqrt(2.0 / (9.0 * config.conv1_filters)), size=shapes["conv2_w"]
        ),
        "conv2_b": np.zeros(shapes["conv2_b"]),
        "cls_w": rng.uniform(-config.init_scale, config.init_scale, size=shapes["cls_w"]),
        "cls_b": np.zeros(shapes["cls_b"]),
    }
    return model


# --- labels and loss ---------------------------------------------------------------------


def expand_labels(y: Sequence[int] | np.ndarray) -> np.ndarray:
    """Map a C-dim binary label vector to the 2C-dim target (y_c, 1 - y_c) per class."""
    y = np.asarray(y, dtype=np.float64)
    t = np.empty(y.shape[:-1] + (2 * y.shape[-1],), dtype=np.float64)
    t[..., 0::2] = y
    t[..., 1::2] = 1.0 - y
    return t


def probabilities(logits: np.ndarray) -> np.ndarray:
    """2C-dim output: sigmoid per class interleaved with its complement."""
    z = np.asarray(logits, dtype=np.float64)
    positive = expit(z)
    p = np.empty(z.shape[:-1] + (2 * z.shape[-1],), dtype=np.float64)
    p[..., 0::2] = positive
    p[..., 1::2] = 1.0 - positive
    return p


def multilabel_loss(p: np.ndarray, t: np.ndarray) -> float:
    """
    Negative log-likelihood over every class pair, summed over samples.

    Probabilities are clamped to [1e-7, 1 - 1e-7] before the log.
    """
    p = np.asarray(p, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if p.shape != t.shape or p.shape[-1] % 2:
        raise ModelError(
            f"Loss inputs must share an even last dimension, got {p.shape} and {t.shape}"
        )
    clamped = np.clip(p, EPSILON, 1.0 - EPSILON)
    return float(-(t * np.log(clamped)).sum())


def multilabel_logit_grad(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """dL/dz_c = sigmoid(z_c) - t_c for the positive entry of each class pair."""
    return expit(np.asarray(logits, dtype=np.float64)) - np.asarray(targets, dtype=np.float64)


# --- image preparation --------------------------------------------------------------------


def resize_bilinear(image: np.ndarray, width: int, height: int) -> np.ndarray:
    """Bilinear resize of an HxWx3 float image, one float channel at a time."""
    if image.shape[0] == height and image.shape[1] == width:
        return np.asarray(image, dtype=np.float64)
    channels = [
        np.asarray(
            Image.fromarray(np.ascontiguousarray(image[:, :, c], dtype=np.float32)).resize(
                (width, height), Image.Resampling.BILINEAR
            ),
            dtype=np.float64,
        )
        for c in range(image.shape[2])
    ]
    return np.stack(channels, axis=-1)


def prepare(model: ClassifierModel, image: np.ndarray) -> np.ndarray:
    """Resize to the network input and subtract the mean pixel."""
    resized = resize_bilinear(image, model.input_size, model.input_size)
    return resized - model.mean


def prepare_batch(model: ClassifierModel, images: Sequence[np.ndarray]) -> np.ndarray:
    size = model.input_size
    if not images:
        return np.zeros((0, size, size, 3))
    return np.stack([prepare(model, image) for image in images])


# --- forward / backward -------------------------------------------------------------------


def _forward(model: ClassifierModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, list[Any]]:
    params = model.params
    h1, c1 = layers.conv3x3_forward(x, params["conv1_w"], params["conv1_b"])
    r1, cr1 = layers.relu_forward(h1)
    p1, cp1 = layers.maxpool2_forward(r1)
    h2, c2 = layers.conv3x3_forward(p1, params["conv2_w"], params["conv2_b"])
    a, cr2 = layers.relu_forward(h2)
    g, cg = layers.gap_forward(a)
    z, cl = layers.linear_forward(g, params["cls_w"], params["cls_b"])
    return z, a, [c1, cr1, cp1, c2, cr2, cg, cl]


def forward_prepared(
    model: ClassifierModel, x: np.ndarray, chunk: int = 64
) -> tuple[np.ndarray, np.ndarray]:
    """Logits (N, C) and last-conv maps (N, H', W', K) for prepared inputs."""
    model.require_initialized()
    n = x.shape[0]
    size = model.map_size
    logits = np.zeros((n, model.num_classes))
    maps = np.zeros((n, size, size, model.num_maps))
    for start in range(0, n, chunk):
        z, a, _ = _forward(model, x[start : start + chunk])
        logits[start : start + chunk] = z
        maps[start : start + chunk] = a
    return logits, maps


def forward(model: ClassifierModel, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    Classify one image.

    Returns:
        The 2C probability vector and the last-conv feature maps of shape (H', W', K)
    """
    logits, maps = forward_prepared(model, prepare(model, image)[None])
    return probabilities(logits[0]), maps[0]


def predict(
    model: ClassifierModel, images: Sequence[np.ndarray], chunk: int = 64
) -> tuple[np.ndarray, np.ndarray]:
    """Positive-class probabilities (N, C) and feature maps for a batch of raw images."""
    logits, maps = forward_prepared(model, prepare_batch(model, images), chunk)
    return expit(logits), maps


def feature_maps(model: ClassifierModel, image: np.ndarray) -> np.ndarray:
    """Post-ReLU last-conv maps (H', W', K); non-negative by construction."""
    return forward(model, image)[1]


def class_weights(model: ClassifierModel) -> np.ndarray:
    """The C x K matrix of weights from pooled maps to class logits."""
    model.require_initialized()
    return model.params["cls_w"]


def loss_and_gradients(
    model: ClassifierModel, x: np.ndarray, y: np.ndarray
) -> tuple[float, dict[str, np.ndarray]]:
    """Summed multi-label loss of a prepared batch and its exact gradient for every parameter."""
    model.require_initialized()
    y = np.asarray(y, dtype=np.float64)
    z, _, caches = _forward(model, x)
    c1, cr1, cp1, c2, cr2, cg, cl = caches
    loss = multilabel_loss(probabilities(z), expand_labels(y))

    dz = multilabel_logit_grad(z, y)
    dg, d_cls_w, d_cls_b = layers.linear_backward(dz, cl)
    da = layers.gap_backward(dg, cg)
    dh2 = layers.relu_backward(da, cr2)
    dp1, d_conv2_w, d_conv2_b = layers.conv3x3_backward(dh2, c2)
    dr1 = layers.maxpool2_backward(dp1, cp1)
    dh1 = layers.relu_backward(dr1, cr1)
    _, d_conv1_w, d_conv1_b = layers.conv3x3_backward(dh1, c1)
    grads = {
        "conv1_w": d_conv1_w,
        "conv1_b": d_conv1_b,
        "conv2_w": d_conv2_w,
        "conv2_b": d_conv2_b,
        "cls_w": d_cls_w,
        "cls_b": d_cls_b,
    }
    return loss, grads


def loss_gradient(
    model: ClassifierModel, images: Sequence[np.ndarray], labels: np.ndarray
) -> dict[str, np.ndarray]:
    """Gradient of the batch loss for raw images and their C-dim label vectors."""
    if not images:
        raise ModelError("Gradient requires a nonempty batch")
    return loss_and_gradients(model, prepare_batch(model, images), labels)[1]


# --- training -----------------------------------------------------------------------------


@dataclass
class TrainingResult:
    model: ClassifierModel
    loss_history: list[float]


def train_classifier(
    dataset: Dataset,
    config: ClassifierConfig,
    seed: int,
    mean: np.ndarray | None = None,
) -> TrainingResult:
    """
    Mini-batch SGD on the summed multi-label loss.

    Batches are drawn from seeded per-epoch permutations, so the result is a pure function
    of ``(dataset, config, seed, mean)``.
    """
    if len(dataset) == 0:
        raise ModelError("Cannot train a classifier on an empty dataset")
    rng = np.random.default_rng(seed)
    if mean is None:
        mean = mean_pixel(dataset)
    model = init_classifier(dataset.num_classes, config, rng, mean)
    x = prepare_batch(model, [image.pixels for image in dataset])
    y = dataset.label_matrix()

    velocity = {name: np.zeros_like(value) for name, value in model.params.items()}
    history: list[float] = []
    order = np.zeros(0, dtype=np.int64)
    cursor = 0
    batch = min(config.batch_size, len(dataset))
    for iteration in range(1, config.iterations + 1):
        if cursor + batch > order.size:
            order = rng.permutation(len(dataset))
            cursor = 0
        index = order[cursor : cursor + batch]
        cursor += batch

        loss, grads = loss_and_gradients(model, x[index], y[index])
        if not math.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
            raise TrainingError("Classifier loss diverged", iteration)
        history.append(loss)

        for name, grad in grads.items():
            if config.weight_decay and name.endswith("_w"):
                grad = grad + config.weight_decay * model.params[name]
            velocity[name] = config.momentum * velocity[name] - config.learning_rate * grad
            model.params[name] = model.params[name] + velocity[name]

        if iteration % 50 == 0 or iteration == config.iterations:
            window = history[-50:]
            logger.debug("Classifier training", iteration=iteration, loss=sum(window) / len(window))

    logger.info(
        "Trained classifier",
        iterations=config.iterations,
        final_loss=history[-1] if history else None,
    )
    return TrainingResult(model=model, loss_history=history)


def multilabel_accuracy(model: ClassifierModel, dataset: Dataset) -> float:
    """Fraction of (image, class) decisions where p >= 0.5 agrees with the label."""
    probs, _ = predict(model, [image.pixels for image in dataset])
    return float(((probs >= 0.5) == (dataset.label_matrix() == 1)).mean())  # noqa: PLR2004


# --- checkpoint ---------------------------------------------------------------------------


def save_checkpoint(model: ClassifierModel, path: Path) -> None:
    """Write magic, version, JSON architecture header and float32 parameter blobs."""
    model.require_initialized()
    header = {
        "architecture": "conv3x3-relu-maxpool2-conv3x3-relu-gap-linear",
        "num_classes": model.num_classes,
        "input_size": model.input_size,
        "conv1_filters": model.conv1_filters,
        "num_maps": model.num_maps,
        "mean": [float(v) for v in model.mean],
        "params": [{"name": name, "shape": list(model.params[name].shape)} for name in PARAM_ORDER],
    }
    encoded = json.dumps(header, sort_keys=True).encode("utf-8")
    blobs = b"".join(
        np.ascontiguousarray(model.params[name], dtype="<f4").tobytes() for name in PARAM_ORDER
    )
    path.write_bytes(
        CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(encoded)) + encoded + blobs
    )
    log_artifact("Wrote classifier checkpoint", path, bytes=path.stat().st_size)


def read_blobs(
    data: bytes, offset: int, specs: list[dict[str, Any]], path: Path
) -> tuple[dict[str, np.ndarray], int]:
    params: dict[str, np.ndarray] = {}
    for spec in specs:
        shape = tuple(int(v) for v in spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if end > len(data):
            raise ParseError(f"Checkpoint truncated in parameter '{spec['name']}'", path)
        params[str(spec["name"])] = (
            np.frombuffer(data[offset:end], dtype="<f4").astype(np.float64).reshape(shape)
        )
        offset = end
    return params, offset


def read_header(data: bytes, magic: bytes, path: Path) -> tuple[dict[str, Any], int]:
    if len(data) < 12 or data[:4] != magic:  # noqa: PLR2004
        raise ParseError(f"Not a {magic.decode()} checkpoint", path)
    version, length = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"Unsupported checkpoint version {version}", path)
    try:
        header = json.loads(data[12 : 12 + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"Corrupt checkpoint header: {exc}", path) from exc
    return header, 12 + length


def load_checkpoint(path: Path) -> ClassifierModel:
    data = path.read_bytes()
    header, offset = read_header(data, CHECKPOINT_MAGIC, path)
    params, end = read_blobs(data, offset, header["params"], path)
    if end != len(data):
        raise ParseError("Trailing bytes after classifier parameters", path)
    model = ClassifierModel(
        num_classes=int(header["num_classes"]),
        input_size=int(header["input_size"]),
        conv1_filters=int(header["conv1_filters"]),
        num_maps=int(header["num_maps"]),
        mean=np.array(header["mean"], dtype=np.float64),
        params=params,
    )
    try:
        model.require_initialized()
    except ModelError as exc:
        raise ParseError(str(exc), path) from exc
    log_artifact("Loaded classifier checkpoint", path)
    return model
