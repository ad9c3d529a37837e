"""Tests for the network layers, the multi-label classifier and its checkpoint format."""

from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wsolkit import layers
from wsolkit.classifier import (
    ClassifierConfig,
    ClassifierModel,
    expand_labels,
    feature_maps,
    forward,
    init_classifier,
    load_checkpoint,
    loss_and_gradients,
    multilabel_accuracy,
    multilabel_logit_grad,
    multilabel_loss,
    probabilities,
    save_checkpoint,
    train_classifier,
)
from wsolkit.dataset import SyntheticConfig, generate_synthetic, mean_pixel
from wsolkit.exceptions import ModelError, ParseError
from wsolkit.features import RegionFeatures
from wsolkit.models import BoundingBox, Dataset, LabeledImage

TINY = ClassifierConfig(input_size=8, conv1_filters=3, num_maps=4, iterations=3, batch_size=4)


def _tiny_model(seed: int = 0) -> ClassifierModel:
    model = init_classifier(2, TINY, np.random.default_rng(seed))
    # Shift preactivations away from the ReLU kink so finite differences are stable.
    model.params["conv1_b"] = model.params["conv1_b"] + 0.5
    model.params["conv2_b"] = model.params["conv2_b"] + 0.5
    model.params["cls_w"] = np.random.default_rng(seed + 1).normal(0.0, 0.5, size=(2, 4))
    return model


def _tiny_dataset(num_images: int = 6) -> Dataset:
    config = SyntheticConfig(num_images=num_images, width=32, height=32, num_classes=2,
                             object_size=(8, 12), seed=11)
    return generate_synthetic(config)


def test_conv3x3_matches_direct_sum() -> None:
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 4, 5, 2))
    w = rng.normal(size=(2, 3, 3, 3))
    b = rng.normal(size=3)

    out, _ = layers.conv3x3_forward(x, w, b)

    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    expected = np.zeros((1, 4, 5, 3))
    for i in range(4):
        for j in range(5):
            patch = xp[0, i : i + 3, j : j + 3, :]  # (3, 3, Cin)
            expected[0, i, j] = np.einsum("hwc,chwf->f", patch, w) + b
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_maxpool_and_gap() -> None:
    x = np.arange(16, dtype=np.float64).reshape(1, 4, 4, 1)
    pooled, cache = layers.maxpool2_forward(x)
    np.testing.assert_array_equal(pooled[0, :, :, 0], [[5, 7], [13, 15]])

    dx = layers.maxpool2_backward(np.ones_like(pooled), cache)
    assert dx.sum() == 4
    assert dx[0, 1, 1, 0] == 1 and dx[0, 0, 0, 0] == 0

    mean, gcache = layers.gap_forward(x)
    assert mean[0, 0] == pytest.approx(7.5)
    np.testing.assert_allclose(layers.gap_backward(np.ones((1, 1)), gcache), 1.0 / 16)


def test_expand_labels_and_probabilities() -> None:
    np.testing.assert_array_equal(expand_labels([1, 0, 1]), [1, 0, 0, 1, 1, 0])
    p = probabilities(np.array([0.0, 100.0]))
    np.testing.assert_allclose(p, [0.5, 0.5, 1.0, 0.0], atol=1e-12)


def test_multilabel_loss_clamps_and_sums() -> None:
    t = expand_labels([1, 0])
    assert multilabel_loss(t, t) == pytest.approx(-2 * np.log(1 - 1e-7))
    # A confident wrong answer is bounded by the clamp.
    assert multilabel_loss(1.0 - t, t) == pytest.approx(-2 * np.log(1e-7))
    with pytest.raises(ModelError):
        multilabel_loss(np.ones(3), np.ones(3))


def test_gradients_match_finite_differences() -> None:
    model = _tiny_model()
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 8, 8, 3))
    y = np.array([[1.0, 0.0], [1.0, 1.0]])

    _, grads = loss_and_gradients(model, x, y)

    h = 1e-5
    for name, param in model.params.items():
        numeric = np.zeros_like(param)
        for index in np.ndindex(param.shape):
            original = param[index]
            param[index] = original + h
            plus, _ = loss_and_gradients(model, x, y)
            param[index] = original - h
            minus, _ = loss_and_gradients(model, x, y)
            param[index] = original
            numeric[index] = (plus - minus) / (2 * h)
        np.testing.assert_allclose(grads[name], numeric, rtol=1e-4, atol=1e-6, err_msg=name)


def test_duplicated_batch_doubles_the_gradient() -> None:
    model = _tiny_model()
    rng = np.random.default_rng(6)
    x = rng.normal(size=(3, 8, 8, 3))
    y = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])

    loss, grads = loss_and_gradients(model, x, y)
    doubled_loss, doubled = loss_and_gradients(
        model, np.concatenate([x, x]), np.concatenate([y, y])
    )

    assert doubled_loss == pytest.approx(2 * loss, rel=1e-12)
    for name, grad in grads.items():
        np.testing.assert_allclose(doubled[name], 2 * grad, rtol=1e-10, atol=1e-12, err_msg=name)


@given(st.lists(st.tuples(st.floats(-8.0, 8.0), st.integers(0, 1)), min_size=1, max_size=4))
def test_logit_gradient_matches_loss_derivative(pairs: list[tuple[float, int]]) -> None:
    z = np.array([[logit for logit, _ in pairs]])
    y = np.array([[label for _, label in pairs]])
    t = expand_labels(y)
    h = 1e-6
    numeric = np.zeros_like(z)
    for c in range(z.shape[1]):
        step = np.zeros_like(z)
        step[0, c] = h
        plus = multilabel_loss(probabilities(z + step), t)
        minus = multilabel_loss(probabilities(z - step), t)
        numeric[0, c] = (plus - minus) / (2 * h)

    np.testing.assert_allclose(multilabel_logit_grad(z, y), numeric, atol=1e-5)


def test_forward_shapes_and_nonnegative_maps() -> None:
    model = _tiny_model()
    image = np.random.default_rng(2).uniform(size=(20, 24, 3))

    probs, maps = forward(model, image)

    assert probs.shape == (4,)
    np.testing.assert_allclose(probs[0::2] + probs[1::2], 1.0)
    assert maps.shape == (4, 4, 4)
    assert (feature_maps(model, image) >= 0).all()


def test_uninitialised_model_raises() -> None:
    with pytest.raises(ModelError, match="not initialised"):
        forward(ClassifierModel(num_classes=2), np.zeros((8, 8, 3)))


def test_train_classifier_is_deterministic() -> None:
    dataset = _tiny_dataset()
    first = train_classifier(dataset, TINY, seed=4)
    second = train_classifier(dataset, TINY, seed=4)

    assert len(first.loss_history) == TINY.iterations
    assert first.loss_history == second.loss_history
    for name in first.model.params:
        np.testing.assert_array_equal(first.model.params[name], second.model.params[name])


def test_checkpoint_round_trip(tmp_path: Path) -> None:
    model = _tiny_model()
    model.mean = np.array([0.1, 0.2, 0.3])
    path = tmp_path / "classifier.wscm"
    save_checkpoint(model, path)

    loaded = load_checkpoint(path)

    assert loaded.num_classes == 2 and loaded.num_maps == 4
    np.testing.assert_allclose(loaded.mean, model.mean)
    for name, value in model.params.items():
        np.testing.assert_allclose(loaded.params[name], value, rtol=1e-6, atol=1e-7)


def test_checkpoint_rejects_garbage(tmp_path: Path) -> None:
    path = tmp_path / "bad.wscm"
    path.write_bytes(b"nope")
    with pytest.raises(ParseError):
        load_checkpoint(path)

    model = _tiny_model()
    save_checkpoint(model, path)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ParseError, match="truncated"):
        load_checkpoint(path)


def test_region_features_whole_image_is_global_average() -> None:
    model = _tiny_model()
    image = np.random.default_rng(3).uniform(size=(16, 16, 3))
    region = RegionFeatures(model, image)

    features = region([BoundingBox(0, 0, 16, 16), BoundingBox(0, 0, 8, 8)])

    maps = feature_maps(model, image)
    assert features.shape == (2, 8)
    np.testing.assert_allclose(features[0, :4], maps.mean(axis=(0, 1)))
    np.testing.assert_allclose(features[0, 4:], [1.0, 1.0, 0.5, 0.5])
    np.testing.assert_allclose(features[1, :4], maps[:2, :2].mean(axis=(0, 1)))
    np.testing.assert_allclose(features[1, 4:], [0.5, 0.5, 0.25, 0.25])


def _two_colour_dataset() -> Dataset:
    """Red images carry class 0 only, blue images class 1 only."""
    rng = np.random.default_rng(8)
    images = []
    for index in range(16):
        red = index % 2 == 0
        colour = np.array([0.85, 0.15, 0.15] if red else [0.15, 0.25, 0.85])
        pixels = np.clip(colour + rng.uniform(-0.05, 0.05, size=(16, 16, 3)), 0.0, 1.0)
        images.append(LabeledImage(f"img-{index}", pixels, (1, 0) if red else (0, 1)))
    return Dataset(tuple(images), 2, ("red", "blue"))


def test_train_classifier_fits_a_separable_set() -> None:
    dataset = _two_colour_dataset()
    config = ClassifierConfig(
        input_size=8, conv1_filters=4, num_maps=8, learning_rate=0.01, iterations=500, batch_size=8
    )

    result = train_classifier(dataset, config, seed=2)

    assert multilabel_accuracy(result.model, dataset) >= 0.95
    assert result.loss_history[-1] < result.loss_history[0]


def test_zero_learning_rate_leaves_parameters_unchanged() -> None:
    dataset = _tiny_dataset()
    config = ClassifierConfig(
        input_size=8,
        conv1_filters=3,
        num_maps=4,
        learning_rate=0.0,
        iterations=5,
        batch_size=4,
        momentum=0.9,
        weight_decay=0.01,
    )

    result = train_classifier(dataset, config, seed=4)

    initial = init_classifier(2, config, np.random.default_rng(4), mean_pixel(dataset))
    for name, value in initial.params.items():
        np.testing.assert_array_equal(result.model.params[name], value, err_msg=name)
