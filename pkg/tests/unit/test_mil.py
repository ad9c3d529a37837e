"""Tests for the smoothed hinge, bag construction, MIL training and instance selection."""

import itertools
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wsolkit.exceptions import ConfigError, MilError
from wsolkit.mil import (
    Bag,
    LatentSelection,
    MilClassifier,
    MilConfig,
    MilOutcome,
    build_bags,
    mil_train,
    objective,
    read_selected,
    select_instances,
    smoothed_hinge,
    solve_all_classes,
    top_mined_instances,
    write_selected,
)
from wsolkit.models import BoundingBox, Dataset, LabeledImage, ScoredProposal, SelectedInstance

LBFGS = MilConfig(solver="lbfgs", outer_iterations=20, regularization=0.1)


def _box(i: int) -> BoundingBox:
    return BoundingBox(i, i, i + 5, i + 5)


def _bag(name: str, features: np.ndarray, positive: bool, init: list[float] | None = None) -> Bag:
    features = np.asarray(features, dtype=np.float64)
    return Bag(
        image_id=name,
        class_index=0,
        boxes=tuple(_box(i) for i in range(len(features))),
        features=features,
        positive=positive,
        init_scores=np.asarray(init if init is not None else [], dtype=np.float64),
    )


def _clustered_bags() -> list[Bag]:
    """Positive bags hold one true instance near (2, 2) at index 1 and decoys near (-0.5, -0.5)."""
    rng = np.random.default_rng(7)
    bags = []
    for b in range(4):
        feats = np.array([[-0.5, -0.5], [2.0, 2.0], [-0.5, -0.5]]) + rng.normal(0, 0.1, (3, 2))
        # Mining prefers a decoy, so MIL has to move off the initial choice.
        bags.append(_bag(f"pos{b}", feats, True, [0.9, 0.1, 0.5]))
    for b in range(3):
        feats = np.full((3, 2), -2.0) + rng.normal(0, 0.1, (3, 2))
        bags.append(_bag(f"neg{b}", feats, False))
    return bags


def test_smoothed_hinge_pieces() -> None:
    assert smoothed_hinge(-1.0) == (1.5, -1.0)
    assert smoothed_hinge(0.0) == (0.5, -1.0)
    assert smoothed_hinge(0.5) == (0.125, -0.5)
    assert smoothed_hinge(1.0) == (0.0, 0.0)
    assert smoothed_hinge(3.0) == (0.0, 0.0)

    loss, grad = smoothed_hinge(np.array([-2.0, 0.25, 4.0]))
    np.testing.assert_allclose(loss, [2.5, 0.28125, 0.0])
    np.testing.assert_allclose(grad, [-1.0, -0.75, 0.0])


def test_smoothed_hinge_derivative_matches_finite_difference() -> None:
    z = np.linspace(-1.5, 1.5, 31) + 0.013
    h = 1e-6
    numeric = (smoothed_hinge(z + h)[0] - smoothed_hinge(z - h)[0]) / (2 * h)
    np.testing.assert_allclose(smoothed_hinge(z)[1], numeric, atol=1e-6)


@given(st.floats(-3.0, 3.0))
def test_smoothed_hinge_derivative_holds_everywhere(z: float) -> None:
    h = 1e-6
    numeric = (smoothed_hinge(z + h)[0] - smoothed_hinge(z - h)[0]) / (2 * h)
    assert smoothed_hinge(z)[1] == pytest.approx(numeric, abs=1e-5)


def test_objective_regularises_weights_only() -> None:
    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    y = np.array([1.0, -1.0])
    w = np.array([3.0, -3.0])
    # Both margins are 3, so only the penalty remains; the bias is free.
    assert objective(w, 0.0, x, y, 0.2) == pytest.approx(0.5 * 0.2 * 18)
    assert objective(w, 0.5, x, y, 0.2) == pytest.approx(0.5 * 0.2 * 18)


def test_mil_config_validation() -> None:
    with pytest.raises(ConfigError):
        MilConfig(solver="adam")
    with pytest.raises(ConfigError):
        MilConfig(regularization=0.0)


def test_latent_selection_constraints() -> None:
    assert LatentSelection.single(3, 1).z == (0, 1, 0)
    with pytest.raises(MilError):
        LatentSelection((0, 0), True)
    with pytest.raises(MilError):
        LatentSelection((0, 1), False)


def test_mil_train_requires_both_bag_kinds() -> None:
    positive = _bag("p", [[1.0, 0.0]], True)
    negative = _bag("n", [[0.0, 1.0]], False)
    with pytest.raises(MilError, match="positive"):
        mil_train([negative], LBFGS)
    with pytest.raises(MilError, match="negative"):
        mil_train([positive, _bag("n", np.zeros((0, 2)), False)], LBFGS)
    with pytest.raises(MilError, match="dimension"):
        mil_train([positive, _bag("n", [[0.0, 1.0, 2.0]], False)], LBFGS)


def test_mil_train_recovers_true_instances() -> None:
    bags = _clustered_bags()

    outcome = mil_train(bags, LBFGS, seed=0)

    for i, bag in enumerate(bags):
        if bag.positive:
            assert outcome.selections[i].z == (0, 1, 0)
        else:
            assert sum(outcome.selections[i].z) == 0
    history = outcome.objective_history
    assert all(later <= earlier + 1e-12 for earlier, later in itertools.pairwise(history))


def test_mil_train_reaches_best_selection_found_by_brute_force() -> None:
    bags = _clustered_bags()
    positives = [bag for bag in bags if bag.positive]
    negatives = [bag for bag in bags if not bag.positive]

    best = np.inf
    for choice in itertools.product(range(3), repeat=len(positives)):
        fixed = [
            _bag(bag.image_id, bag.features[[j]], True, [0.0])
            for bag, j in zip(positives, choice, strict=True)
        ]
        best = min(best, mil_train(fixed + negatives, LBFGS).objective_history[-1])

    outcome = mil_train(bags, LBFGS)

    assert outcome.objective_history[-1] == pytest.approx(best, abs=1e-6)


def test_mil_train_sgd_objective_never_increases() -> None:
    config = MilConfig(solver="sgd", outer_iterations=5, inner_epochs=10, regularization=0.1)
    first = mil_train(_clustered_bags(), config, seed=3)
    second = mil_train(_clustered_bags(), config, seed=3)

    history = first.objective_history
    assert all(later <= earlier + 1e-12 for earlier, later in itertools.pairwise(history))
    assert history == second.objective_history
    np.testing.assert_array_equal(first.classifier.weights, second.classifier.weights)


def _random_problem(seed: int) -> list[Bag]:
    """Three positive bags of 2-4 instances, then three negative bags, with 2-D features."""
    rng = np.random.default_rng(seed)
    bags = []
    for b in range(3):
        size = int(rng.integers(2, 5))
        feats = rng.normal(0.0, 1.0, (size, 2))
        feats[int(rng.integers(size))] = rng.normal(2.0, 0.3, 2)
        bags.append(_bag(f"pos{b}", feats, True, list(rng.uniform(size=size))))
    for b in range(3):
        size = int(rng.integers(2, 5))
        bags.append(_bag(f"neg{b}", rng.normal(-2.0, 0.3, (size, 2)), False))
    return bags


def _objective_table(bags: list[Bag], config: MilConfig) -> dict[tuple[int, ...], float]:
    """Optimal objective of every joint selection, each fitted with the selection fixed."""
    positives = [bag for bag in bags if bag.positive]
    negatives = [bag for bag in bags if not bag.positive]
    exact = replace(config, solver="lbfgs")
    table = {}
    for choice in itertools.product(*(range(len(bag)) for bag in positives)):
        fixed = [
            _bag(bag.image_id, bag.features[[j]], True, [0.0])
            for bag, j in zip(positives, choice, strict=True)
        ]
        table[choice] = mil_train(fixed + negatives, exact).objective_history[-1]
    return table


def _chosen(bags: list[Bag], outcome: MilOutcome) -> tuple[int, ...]:
    return tuple(
        outcome.selections[i].z.index(1) for i, bag in enumerate(bags) if bag.positive
    )


def test_mil_train_matches_exhaustive_search_on_seeded_problems() -> None:
    seeds = range(20)
    solvers = (MilConfig(), replace(MilConfig(), solver="lbfgs"))
    matches = dict.fromkeys(range(len(solvers)), 0)
    for seed in seeds:
        bags = _random_problem(seed)
        table = _objective_table(bags, MilConfig())
        best = min(table.values())
        for k, config in enumerate(solvers):
            outcome = mil_train(bags, config, seed=seed)
            # A different selection with the same optimal objective is a tie.
            if table[_chosen(bags, outcome)] <= best + 1e-6:
                matches[k] += 1
    for count in matches.values():
        assert count >= 0.95 * len(seeds)


def test_mil_train_exhaustive_pass_respects_the_limit() -> None:
    bags = _clustered_bags()
    alternation_only = replace(LBFGS, exhaustive_limit=0)

    outcome = mil_train(bags, alternation_only, seed=0)

    assert len(outcome.objective_history) == outcome.iterations
    with pytest.raises(ConfigError):
        MilConfig(exhaustive_limit=-1)


def test_mil_train_selections_survive_feature_rescaling() -> None:
    bags = _clustered_bags()
    scale = 3.0
    scaled = [replace(bag, features=bag.features * scale) for bag in bags]
    # Scaling features by s and the penalty by s^2 rescales the optimal weights by 1/s.
    scaled_config = replace(LBFGS, regularization=LBFGS.regularization * scale**2)

    original = mil_train(bags, LBFGS, seed=0)
    rescaled = mil_train(scaled, scaled_config, seed=0)

    assert _chosen(bags, original) == _chosen(scaled, rescaled)


def test_mil_train_duplicated_bags_keep_their_selections() -> None:
    clustered = _clustered_bags()
    bags = clustered[:2] + [bag for bag in clustered if not bag.positive]
    copies = [replace(bag, image_id=f"{bag.image_id}-copy") for bag in bags]

    single = mil_train(bags, LBFGS, seed=0)
    doubled = mil_train(bags + copies, LBFGS, seed=0)

    for i, bag in enumerate(bags):
        assert doubled.selections[i].z == single.selections[i].z
        assert doubled.selections[i + len(bags)].z == single.selections[i].z


def test_select_instances_threshold_and_argmax() -> None:
    classifier = MilClassifier(np.array([1.0]), 0.0)
    bags = [_bag("p", [[1.0], [3.0], [2.0]], True), _bag("n", [[5.0]], False)]

    picked = select_instances(classifier, bags, threshold=1.5)
    got = [(s.image_id, s.box, s.score) for s in picked]
    assert got == [("p", _box(1), 3.0), ("p", _box(2), 2.0)]

    only_best = select_instances(classifier, bags, threshold=10.0)
    assert [s.box for s in only_best] == [_box(1)]


def _mined(image_id: str, fused: list[float]) -> list[ScoredProposal]:
    return [
        ScoredProposal(image_id, 0, _box(j), j, 0.0, 0.0, fused=value, rank=j + 1)
        for j, value in enumerate(fused)
    ]


def _dataset() -> Dataset:
    pixels = np.zeros((16, 16, 3))
    return Dataset(
        (
            LabeledImage("a", pixels, (1, 0)),
            LabeledImage("b", pixels, (0, 1)),
            LabeledImage("c", pixels, (0, 1)),
        ),
        2,
    )


def test_build_bags_caps_negatives_and_standardises() -> None:
    mined = _mined("a", [0.8, 0.3]) + _mined("b", [0.9, 0.1]) + _mined("c", [0.5])
    features = {
        ("a", 0): np.array([[1.0, 5.0], [2.0, 5.0]]),
        ("b", 0): np.array([[3.0, 5.0], [4.0, 5.0]]),
        ("c", 0): np.array([[5.0, 5.0]]),
    }

    bags = build_bags(mined, _dataset(), features, class_index=0, negative_cap=2)

    assert [(bag.image_id, bag.positive, len(bag)) for bag in bags] == [
        ("a", True, 2),
        ("b", False, 1),
        ("c", False, 1),
    ]
    assert bags[1].boxes == (_box(0),)
    np.testing.assert_allclose(bags[0].init_scores, [0.8, 0.3])
    stacked = np.vstack([bag.features for bag in bags])
    np.testing.assert_allclose(stacked.mean(axis=0), 0.0, atol=1e-12)
    # A constant column keeps unit scale instead of dividing by zero.
    np.testing.assert_allclose(stacked[:, 1], 0.0)


def test_top_mined_instances_and_disabled_mil() -> None:
    mined = _mined("a", [0.8, 0.3]) + _mined("b", [0.9])
    dataset = _dataset()

    expected = [SelectedInstance(0, "a", _box(0), 0.8)]
    assert top_mined_instances(mined, dataset) == expected
    disabled = MilConfig(enabled=False)
    solved = solve_all_classes(mined, dataset, None, disabled, seed=0)  # type: ignore[arg-type]
    assert solved == expected


def test_selected_file_reloads(tmp_path: Path) -> None:
    rows = [SelectedInstance(1, "img", _box(2), 0.75), SelectedInstance(0, "img", _box(0), -0.5)]
    path = tmp_path / "selected.csv"
    write_selected(rows, path)
    assert read_selected(path) == rows
