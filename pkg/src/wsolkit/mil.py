"""
Multiple instance learning over mined proposals.

For one class, every positive image is a bag holding its mined proposals, at least one of
which is the object; every negative image contributes mined proposals that are all
background. Training alternates between picking the best-scoring instance of each positive
bag and refitting a linear classifier under the smoothed hinge loss.
"""

from __future__ import annotations

import csv
import itertools
import math
from collections.abc import Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from scipy.optimize import minimize

from .classifier import ClassifierModel
from .exceptions import ConfigError, GeometryError, MilError, ParseError
from .features import RegionFeatures
from .logging import LogContext, get_logger, log_artifact
from .mining import ranked_by_image
from .models import BoundingBox, Dataset, ScoredProposal, SelectedInstance

logger = get_logger(__name__)

SELECTED_HEADER = ["class", "image_id", "x1", "y1", "x2", "y2", "score"]
MINI_BATCH = 32
TIE_TOLERANCE = 1e-9


def smoothed_hinge(z: float | np.ndarray) -> tuple[Any, Any]:
    """
    Quadratically smoothed hinge and its derivative.

    0.5 - z below 0, (1 - z)^2 / 2 on (0, 1), 0 from 1 on. Continuously differentiable.
    """
    z_arr = np.asarray(z, dtype=np.float64)
    loss = np.where(z_arr <= 0.0, 0.5 - z_arr, np.where(z_arr < 1.0, 0.5 * (1.0 - z_arr) ** 2, 0.0))
    grad = np.where(z_arr <= 0.0, -1.0, np.where(z_arr < 1.0, z_arr - 1.0, 0.0))
    if np.ndim(z) == 0:
        return float(loss), float(grad)
    return loss, grad


@dataclass(frozen=True)
class MilConfig:
    enabled: bool = True
    outer_iterations: int = 10
    inner_epochs: int = 20
    learning_rate: float = 0.1
    regularization: float = 1e-3
    negative_cap: int = 2000
    select_threshold: float = 0.5
    solver: str = "sgd"
    exhaustive_limit: int = 4096

    def __post_init__(self) -> None:
        if self.solver not in ("sgd", "lbfgs"):
            raise ConfigError(f"Unknown MIL solver {self.solver!r}")
        if self.regularization <= 0 or self.outer_iterations < 1:
            raise ConfigError("mil.regularization must be > 0 and outer_iterations >= 1")
        if self.exhaustive_limit < 0:
            raise ConfigError("mil.exhaustive_limit must be >= 0")

    @classmethod
    def from_config(cls, section: Mapping[str, Any]) -> MilConfig:
        return cls(
            enabled=bool(section["enabled"]),
            outer_iterations=int(section["outer_iterations"]),
            inner_epochs=int(section["inner_epochs"]),
            learning_rate=float(section["learning_rate"]),
            regularization=float(section["regularization"]),
            negative_cap=int(section["negative_cap"]),
            select_threshold=float(section["select_threshold"]),
            solver=str(section["solver"]),
            exhaustive_limit=int(section.get("exhaustive_limit", 4096)),
        )


@dataclass(frozen=True, eq=False)
class Bag:
    image_id: str
    class_index: int
    boxes: tuple[BoundingBox, ...]
    features: np.ndarray
    positive: bool
    init_scores: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self) -> int:
        return len(self.boxes)


@dataclass(frozen=True)
class LatentSelection:
    """Binary instance labels z over one bag."""

    z: tuple[int, ...]
    positive: bool

    def __post_init__(self) -> None:
        selected = sum(self.z)
        if self.positive and selected < 1:
            raise MilError("A positive bag needs at least one selected instance")
        if not self.positive and selected != 0:
            raise MilError("A negative bag cannot select instances")

    @classmethod
    def single(cls, size: int, index: int) -> LatentSelection:
        return cls(tuple(int(i == index) for i in range(size)), True)


@dataclass
class MilClassifier:
    weights: np.ndarray
    bias: float = 0.0
    regularization: float = 1e-3

    def score(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features, dtype=np.float64) @ self.weights + self.bias


def objective(
    weights: np.ndarray, bias: float, x: np.ndarray, y: np.ndarray, regularization: float
) -> float:
    """Regularised mean smoothed-hinge risk; the bias is not regularised."""
    loss, _ = smoothed_hinge(y * (x @ weights + bias))
    return float(0.5 * regularization * weights @ weights + np.mean(loss))


def _objective_and_grad(
    theta: np.ndarray, x: np.ndarray, y: np.ndarray, regularization: float
) -> tuple[float, np.ndarray]:
    w, b = theta[:-1], theta[-1]
    loss, dloss = smoothed_hinge(y * (x @ w + b))
    coef = dloss * y / x.shape[0]
    grad = np.empty_like(theta)
    grad[:-1] = regularization * w + x.T @ coef
    grad[-1] = coef.sum()
    return float(0.5 * regularization * w @ w + loss.mean()), grad


def _fit_lbfgs(
    x: np.ndarray, y: np.ndarray, config: MilConfig, start: np.ndarray
) -> np.ndarray:
    result = minimize(
        _objective_and_grad,
        start,
        args=(x, y, config.regularization),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": 1000, "gtol": 1e-10, "ftol": 1e-15},
    )
    return np.asarray(result.x, dtype=np.float64)


def _fit_sgd(
    x: np.ndarray, y: np.ndarray, config: MilConfig, start: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    theta = start.copy()
    n = x.shape[0]
    step = 0
    for _epoch in range(config.inner_epochs):
        order = rng.permutation(n)
        for begin in range(0, n, MINI_BATCH):
            index = order[begin : begin + MINI_BATCH]
            _, grad_batch = _objective_and_grad(theta, x[index], y[index], config.regularization)
            step += 1
            theta -= config.learning_rate / np.sqrt(step) * grad_batch
    return theta


def _training_set(
    bags: Sequence[Bag], selection: Mapping[int, int]
) -> tuple[np.ndarray, np.ndarray]:
    rows: list[np.ndarray] = []
    labels: list[np.ndarray] = []
    for index, bag in enumerate(bags):
        if bag.positive:
            rows.append(bag.features[selection[index]][None])
            labels.append(np.ones(1))
        else:
            rows.append(bag.features)
            labels.append(-np.ones(len(bag)))
    return np.vstack(rows), np.concatenate(labels)


def _validate_bags(bags: Sequence[Bag]) -> int:
    if not any(bag.positive for bag in bags):
        raise MilError("MIL needs at least one positive bag")
    if not any(not bag.positive and len(bag) for bag in bags):
        raise MilError("MIL needs at least one nonempty negative bag")
    dims = {bag.features.shape[1] for bag in bags if len(bag)}
    if len(dims) != 1:
        raise MilError(f"Instance features disagree on dimension: {sorted(dims)}")
    for bag in bags:
        if bag.positive and len(bag) == 0:
            raise MilError(f"Positive bag {bag.image_id} is empty")
        if bag.features.shape[0] != len(bag):
            raise MilError(
                f"Bag {bag.image_id} has {len(bag)} boxes but {bag.features.shape[0]} feature rows"
            )
    return dims.pop()


@dataclass
class MilOutcome:
    classifier: MilClassifier
    selections: dict[int, LatentSelection]
    objective_history: list[float]
    iterations: int


def _exhaustive_selection(
    bags: Sequence[Bag], positives: Sequence[int], config: MilConfig, dim: int
) -> tuple[dict[int, int], np.ndarray, float] | None:
    """
    Fit every joint selection of the positive bags and keep the lowest objective.

    Returns ``None`` when the number of joint selections exceeds ``exhaustive_limit``.
    Each fit is the exact convex solve; the first minimum in enumeration order wins ties.
    """
    sizes = [len(bags[i]) for i in positives]
    if math.prod(sizes) > config.exhaustive_limit:
        return None
    best: tuple[dict[int, int], np.ndarray, float] | None = None
    for choice in itertools.product(*(range(n) for n in sizes)):
        selection = dict(zip(positives, choice, strict=True))
        x, y = _training_set(bags, selection)
        theta = _fit_lbfgs(x, y, config, np.zeros(dim + 1))
        value = _objective_and_grad(theta, x, y, config.regularization)[0]
        if best is None or value < best[2] - TIE_TOLERANCE:
            best = (selection, theta, value)
    return best


def mil_train(bags: Sequence[Bag], config: MilConfig, seed: int = 0) -> MilOutcome:
    """
    Alternate instance selection and classifier fitting.

    Selection starts from each positive bag's best initial (mining) score. Each round refits
    from the previous solution and keeps the previous one if the refit does not lower the
    objective, so the recorded objective never increases. Stops after ``outer_iterations``
    rounds or when no selection changes.

    Alternation only reaches a local minimum. When the positive bags allow at most
    ``exhaustive_limit`` joint selections, every one of them is fitted afterwards and the
    global minimum replaces the alternation result if it is lower.
    """
    dim = _validate_bags(bags)
    rng = np.random.default_rng(seed)
    positives = [i for i, bag in enumerate(bags) if bag.positive]
    selection = {
        i: int(np.argmax(bags[i].init_scores)) if bags[i].init_scores.size else 0 for i in positives
    }
    theta = np.zeros(dim + 1)
    history: list[float] = []
    current = math.inf
    rounds = 0
    for rounds in range(1, config.outer_iterations + 1):  # noqa: B007
        x, y = _training_set(bags, selection)
        current = _objective_and_grad(theta, x, y, config.regularization)[0]
        if config.solver == "lbfgs":
            candidate = _fit_lbfgs(x, y, config, theta)
        else:
            candidate = _fit_sgd(x, y, config, theta, rng)
        value = _objective_and_grad(candidate, x, y, config.regularization)[0]
        if value <= current:
            theta, current = candidate, value
        history.append(current)
        logger.debug("MIL round", round=rounds, objective=current)

        changed = False
        for i in positives:
            scores = bags[i].features @ theta[:-1] + theta[-1]
            best = float(scores.max())
            if scores[selection[i]] < best:
                selection[i] = int(np.argmax(scores))
                changed = True
        if not changed:
            break

    exact = _exhaustive_selection(bags, positives, config, dim)
    if exact is not None:
        x, y = _training_set(bags, selection)
        reached = _objective_and_grad(theta, x, y, config.regularization)[0]
        if exact[2] < reached - TIE_TOLERANCE:
            selection, theta = exact[0], exact[1]
            # The last round may have moved the selection after its fit.
            if exact[2] <= current:
                current = exact[2]
                history.append(current)
            logger.debug("Exhaustive selection improved on alternation", objective=exact[2])

    selections: dict[int, LatentSelection] = {}
    for i, bag in enumerate(bags):
        if bag.positive:
            selections[i] = LatentSelection.single(len(bag), selection[i])
        else:
            selections[i] = LatentSelection(tuple(0 for _ in bag.boxes), False)
    classifier = MilClassifier(theta[:-1].copy(), float(theta[-1]), config.regularization)
    return MilOutcome(classifier, selections, history, rounds)


def select_instances(
    classifier: MilClassifier, bags: Iterable[Bag], threshold: float
) -> list[SelectedInstance]:
    """
    Per positive bag, every instance scoring at least ``threshold``, best first.

    The bag's argmax is always emitted, so each positive bag yields at least one instance.
    """
    out: list[SelectedInstance] = []
    for bag in bags:
        if not bag.positive or len(bag) == 0:
            continue
        scores = classifier.score(bag.features)
        order = sorted(range(len(bag)), key=lambda j: (-scores[j], j))
        for rank, j in enumerate(order):
            if rank == 0 or scores[j] >= threshold:
                out.append(
                    SelectedInstance(bag.class_index, bag.image_id, bag.boxes[j], float(scores[j]))
                )
    return out


# --- bag construction ----------------------------------------------------------------------


def instance_features(
    model: ClassifierModel,
    dataset: Dataset,
    mined: Sequence[ScoredProposal],
    threads: int = 1,
) -> dict[tuple[str, int], np.ndarray]:
    """Features of every mined row, keyed by (image, class) in rank order."""
    groups = ranked_by_image(mined)
    by_image: dict[str, list[tuple[str, int]]] = {}
    for key in groups:
        by_image.setdefault(key[0], []).append(key)

    def work(image_id: str) -> dict[tuple[str, int], np.ndarray]:
        extractor = RegionFeatures(model, dataset.by_id[image_id].pixels)
        return {key: extractor([p.box for p in groups[key]]) for key in by_image[image_id]}

    result: dict[tuple[str, int], np.ndarray] = {}
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        for part in pool.map(work, sorted(by_image, key=_dataset_order(dataset))):
            result.update(part)
    return result


def _dataset_order(dataset: Dataset) -> Any:
    position = {image.id: i for i, image in enumerate(dataset)}
    return lambda image_id: position.get(image_id, len(position))


def build_bags(
    mined: Sequence[ScoredProposal],
    dataset: Dataset,
    features: Mapping[tuple[str, int], np.ndarray],
    class_index: int,
    negative_cap: int,
) -> list[Bag]:
    """
    Positive bags from images labelled with the class, negative bags from the rest.

    Negative instances are capped at ``negative_cap`` in total, keeping the highest fused
    mining scores. Features are standardised per class over every kept instance.
    """
    groups = ranked_by_image(mined, class_index)
    raw: list[tuple[str, bool, list[ScoredProposal], np.ndarray]] = []
    for image in dataset:
        rows = groups.get((image.id, class_index), [])
        if not rows:
            if image.has_class(class_index):
                logger.warning(
                    "Positive image has no mined proposals",
                    image_id=image.id,
                    class_index=class_index,
                )
            continue
        feats = features[(image.id, class_index)]
        raw.append((image.id, image.has_class(class_index), rows, feats))

    negatives = [
        (-row.fused, bag_index, j)
        for bag_index, (_, positive, rows, _) in enumerate(raw)
        if not positive
        for j, row in enumerate(rows)
    ]
    keep = {(b, j) for _, b, j in sorted(negatives)[: max(negative_cap, 0)]}

    kept: list[tuple[str, bool, list[ScoredProposal], np.ndarray]] = []
    for bag_index, (image_id, positive, rows, feats) in enumerate(raw):
        if positive:
            kept.append((image_id, positive, rows, feats))
            continue
        chosen = [j for j in range(len(rows)) if (bag_index, j) in keep]
        if chosen:
            kept.append((image_id, positive, [rows[j] for j in chosen], feats[chosen]))
    if not kept:
        return []

    stacked = np.vstack([feats for *_, feats in kept])
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    std[std == 0] = 1.0
    return [
        Bag(
            image_id=image_id,
            class_index=class_index,
            boxes=tuple(row.box for row in rows),
            features=(feats - mean) / std,
            positive=positive,
            init_scores=np.array([row.fused for row in rows]),
        )
        for image_id, positive, rows, feats in kept
    ]


def top_mined_instances(
    mined: Sequence[ScoredProposal], dataset: Dataset
) -> list[SelectedInstance]:
    """The rank-1 mined proposal of every positive (image, class); used when MIL is off."""
    out: list[SelectedInstance] = []
    groups = ranked_by_image(mined)
    for c in range(dataset.num_classes):
        for image in dataset.positives(c):
            rows = groups.get((image.id, c))
            if rows:
                out.append(SelectedInstance(c, image.id, rows[0].box, rows[0].fused))
    return out


def solve_all_classes(
    mined: Sequence[ScoredProposal],
    dataset: Dataset,
    model: ClassifierModel,
    config: MilConfig,
    seed: int,
    threads: int = 1,
) -> list[SelectedInstance]:
    """Run one independent MIL problem per class and collect the selected instances."""
    if not config.enabled:
        logger.info("MIL disabled, using top mined proposal per positive image")
        return top_mined_instances(mined, dataset)

    features = instance_features(model, dataset, mined, threads)

    def solve(class_index: int) -> list[SelectedInstance]:
        with LogContext(class_index=class_index):
            bags = build_bags(mined, dataset, features, class_index, config.negative_cap)
            class_seed = int(np.random.SeedSequence([seed, class_index]).generate_state(1)[0])
            outcome = mil_train(bags, config, seed=class_seed)
            chosen = select_instances(outcome.classifier, bags, config.select_threshold)
            logger.info(
                "Solved MIL",
                bags=len(bags),
                rounds=outcome.iterations,
                objective=outcome.objective_history[-1],
                selected=len(chosen),
            )
            return chosen

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        per_class = list(pool.map(solve, range(dataset.num_classes)))
    return [instance for chosen in per_class for instance in chosen]


# --- CSV -----------------------------------------------------------------------------------


def write_selected(rows: Iterable[SelectedInstance], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(SELECTED_HEADER)
        for row in rows:
            writer.writerow(row.to_row())
            count += 1
    log_artifact("Wrote selected instances", path, rows=count)


def read_selected(path: Path) -> list[SelectedInstance]:
    rows: list[SelectedInstance] = []
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        if next(reader, None) != SELECTED_HEADER:
            raise ParseError("Unexpected selected-instance header", path, 1)
        for line_number, record in enumerate(reader, start=2):
            if not record:
                continue
            if len(record) != len(SELECTED_HEADER):
                raise ParseError(f"expected {len(SELECTED_HEADER)} fields", path, line_number)
            try:
                box = BoundingBox(*(int(v) for v in record[2:6]))
                rows.append(SelectedInstance(int(record[0]), record[1], box, float(record[6])))
            except (ValueError, GeometryError) as exc:
                raise ParseError(str(exc), path, line_number) from exc
    return rows
