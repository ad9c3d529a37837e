"""Tests for ROI labelling, the detection head, NMS and detector persistence."""

from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wsolkit.classifier import ClassifierConfig, ClassifierModel, init_classifier
from wsolkit.detector import (
    DetectorConfig,
    DetectorModel,
    RoiSample,
    RoiTrainingSet,
    build_roi_set,
    decode_targets,
    detect,
    encode_targets,
    head_loss_and_gradients,
    load_detector,
    localize,
    nms,
    read_detections,
    round_box,
    save_detector,
    smooth_l1,
    train_detector,
    write_detections,
)
from wsolkit.exceptions import ConfigError, DetectorError, ParseError
from wsolkit.geometry import boxes_to_array, iou
from wsolkit.models import BoundingBox, Detection


def _head(num_classes: int, dim: int, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    return {
        "cls_w": rng.normal(0, 0.5, (num_classes + 1, dim)),
        "cls_b": rng.normal(0, 0.5, num_classes + 1),
        "reg_w": rng.normal(0, 0.5, (4 * num_classes, dim)),
        "reg_b": rng.normal(0, 0.5, 4 * num_classes),
        "feature_mean": np.zeros(dim),
        "feature_std": np.ones(dim),
    }


def _backbone() -> ClassifierModel:
    config = ClassifierConfig(input_size=8, conv1_filters=3, num_maps=4)
    return init_classifier(2, config, np.random.default_rng(0))


def _constant_detector() -> DetectorModel:
    """Every box scores the same for class 0 and is left where it is."""
    model = DetectorModel(_backbone(), 2)
    model.head = {
        "cls_w": np.zeros((3, 8)),
        "cls_b": np.array([0.0, 10.0, 0.0]),
        "reg_w": np.zeros((8, 8)),
        "reg_b": np.zeros(8),
        "feature_mean": np.zeros(8),
        "feature_std": np.ones(8),
    }
    return model


def test_detector_config_rejects_inverted_bands() -> None:
    with pytest.raises(ConfigError):
        DetectorConfig(fg_iou=0.3, bg_iou_low=0.4)


def test_smooth_l1() -> None:
    assert smooth_l1(0.5) == (0.125, 0.5)
    assert smooth_l1(-2.0) == (1.5, -1.0)
    loss, grad = smooth_l1(np.array([0.0, 3.0]))
    np.testing.assert_allclose(loss, [0.0, 2.5])
    np.testing.assert_allclose(grad, [0.0, 1.0])


def test_encode_targets_known_offsets() -> None:
    proposal = np.array([[0.0, 0.0, 10.0, 8.0]])
    target = np.array([[0.0, 0.0, 10.0, 10.0]])

    offsets = encode_targets(proposal, target)

    np.testing.assert_allclose(offsets, [[0.0, 1.0 / 8.0, 0.0, np.log(10.0 / 8.0)]])
    np.testing.assert_allclose(decode_targets(proposal, offsets), target)


def test_decode_targets_clamps_growth() -> None:
    decoded = decode_targets(np.array([[0.0, 0.0, 2.0, 2.0]]), np.array([[0.0, 0.0, 50.0, 0.0]]))
    assert decoded[0, 2] - decoded[0, 0] == pytest.approx(2000.0)


def test_round_box_snaps_outward_and_clips() -> None:
    assert round_box((1.2, 2.7, 5.1, 6.0), 32, 32) == BoundingBox(1, 2, 6, 6)
    assert round_box((-3.0, -3.0, 40.5, 8.2), 32, 32) == BoundingBox(0, 0, 32, 9)
    assert round_box((40.0, 40.0, 50.0, 50.0), 32, 32) is None


def test_build_roi_set_bands() -> None:
    mined = [(0, BoundingBox(0, 0, 10, 10))]
    proposals = [
        BoundingBox(0, 0, 10, 8),  # IoU 0.8
        BoundingBox(5, 0, 15, 10),  # IoU 1/3
        BoundingBox(20, 20, 30, 30),  # IoU 0
        BoundingBox(9, 9, 19, 19),  # IoU 1/199
    ]

    samples = build_roi_set("img", proposals, mined)

    assert [(s.box, s.label) for s in samples] == [
        (BoundingBox(0, 0, 10, 8), 1),
        (BoundingBox(5, 0, 15, 10), 0),
        (BoundingBox(0, 0, 10, 10), 1),
    ]
    assert samples[0].target == pytest.approx((0.0, 0.125, 0.0, np.log(1.25)))
    assert samples[1].target is None
    assert samples[2].target == (0.0, 0.0, 0.0, 0.0)
    assert build_roi_set("img", proposals, []) == []


def test_build_roi_set_takes_class_of_best_overlap() -> None:
    mined = [(0, BoundingBox(0, 0, 10, 10)), (1, BoundingBox(20, 20, 30, 30))]
    samples = build_roi_set("img", [BoundingBox(21, 20, 30, 30)], mined, include_mined=False)
    assert [(s.label, s.is_foreground) for s in samples] == [(2, True)]


def test_head_gradients_match_finite_differences() -> None:
    model = DetectorModel(ClassifierModel(num_classes=2, num_maps=3), 2, _head(2, 7))
    rng = np.random.default_rng(1)
    features = rng.normal(size=(5, 7))
    labels = np.array([0, 1, 2, 1, 0])
    targets = rng.normal(0, 0.3, size=(5, 4))

    _, grads = head_loss_and_gradients(model, features, labels, targets, reg_weight=2.0)

    h = 1e-6
    for name in ("cls_w", "cls_b", "reg_w", "reg_b"):
        param = model.head[name]
        numeric = np.zeros_like(param)
        for index in np.ndindex(param.shape):
            original = param[index]
            param[index] = original + h
            plus, _ = head_loss_and_gradients(model, features, labels, targets, 2.0)
            param[index] = original - h
            minus, _ = head_loss_and_gradients(model, features, labels, targets, 2.0)
            param[index] = original
            numeric[index] = (plus - minus) / (2 * h)
        np.testing.assert_allclose(grads[name], numeric, rtol=1e-5, atol=1e-8, err_msg=name)


def test_zero_regression_weight_freezes_regressors() -> None:
    model = DetectorModel(ClassifierModel(num_classes=2, num_maps=3), 2, _head(2, 7))
    features = np.random.default_rng(2).normal(size=(4, 7))
    labels = np.array([1, 2, 0, 1])
    _, grads = head_loss_and_gradients(model, features, labels, np.ones((4, 4)), 0.0)
    assert not grads["reg_w"].any()
    assert not grads["reg_b"].any()


def _separable_rois(foreground: bool = True, background: bool = True) -> RoiTrainingSet:
    rng = np.random.default_rng(4)
    n_fg = 20 if foreground else 0
    n_bg = 40 if background else 0
    features = np.vstack([rng.normal(2.0, 0.3, (n_fg, 8)), rng.normal(-2.0, 0.3, (n_bg, 8))])
    labels = np.array([1] * n_fg + [0] * n_bg)
    targets = np.zeros((n_fg + n_bg, 4))
    samples = tuple(RoiSample("img", BoundingBox(0, 0, 4, 4), int(label)) for label in labels)
    return RoiTrainingSet(samples, features, labels, targets, num_classes=2)


def test_train_detector_learns_separable_rois() -> None:
    config = DetectorConfig(learning_rate=0.5, iterations=200, batch_size=16)

    first = train_detector(_separable_rois(), _backbone(), config, seed=3)
    second = train_detector(_separable_rois(), _backbone(), config, seed=3)

    assert first.accuracy >= 0.95
    assert first.loss_history == second.loss_history
    assert first.loss_history[-1] < first.loss_history[0]


def test_train_detector_needs_both_kinds_of_roi() -> None:
    with pytest.raises(DetectorError, match="foreground"):
        train_detector(_separable_rois(foreground=False), _backbone(), DetectorConfig(), 0)
    with pytest.raises(DetectorError, match="background"):
        train_detector(_separable_rois(background=False), _backbone(), DetectorConfig(), 0)


def _nms_oracle(boxes: list[BoundingBox], scores: list[float], threshold: float) -> list[int]:
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    keep: list[int] = []
    for i in order:
        if all(iou(boxes[i], boxes[k]) < threshold for k in keep):
            keep.append(i)
    return keep


box_strategy = st.builds(
    lambda x, y, w, h: BoundingBox(x, y, x + w, y + h),
    st.integers(0, 40),
    st.integers(0, 40),
    st.integers(1, 20),
    st.integers(1, 20),
)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.tuples(box_strategy, st.sampled_from([0.1, 0.5, 0.7, 0.9])), max_size=15),
    st.sampled_from([0.3, 0.5, 0.7]),
)
def test_nms_matches_quadratic_oracle(
    items: list[tuple[BoundingBox, float]], threshold: float
) -> None:
    boxes = [box for box, _ in items]
    scores = [score for _, score in items]

    keep = nms(boxes_to_array(boxes), np.array(scores), threshold)

    assert keep == _nms_oracle(boxes, scores, threshold)
    for a in keep:
        for b in keep:
            if a != b:
                assert iou(boxes[a], boxes[b]) < threshold


def test_detect_thresholds_and_suppresses() -> None:
    model = _constant_detector()
    image = np.random.default_rng(5).uniform(size=(32, 32, 3))
    proposals = [BoundingBox(20, 20, 30, 30), BoundingBox(0, 0, 10, 10), BoundingBox(1, 0, 11, 10)]

    detections = detect(model, image, proposals, score_threshold=0.8, nms_iou=0.5, image_id="x")

    assert [(d.class_index, d.box) for d in detections] == [
        (0, BoundingBox(0, 0, 10, 10)),
        (0, BoundingBox(20, 20, 30, 30)),
    ]
    assert all(d.image_id == "x" and d.score > 0.99 for d in detections)
    assert detect(model, image, []) == []
    assert localize(model, image, proposals, 0) == BoundingBox(20, 20, 30, 30)


def test_detector_checkpoint_round_trip(tmp_path: Path) -> None:
    model = DetectorModel(_backbone(), 2, _head(2, 8))
    path = tmp_path / "detector.wsdm"
    save_detector(model, path)

    loaded = load_detector(path)

    assert loaded.num_classes == 2
    for name, value in model.head.items():
        np.testing.assert_allclose(loaded.head[name], value, rtol=1e-6, atol=1e-7)
    for name, value in model.backbone.params.items():
        np.testing.assert_allclose(loaded.backbone.params[name], value, rtol=1e-6, atol=1e-7)

    path.write_bytes(b"WSCM" + path.read_bytes()[4:])
    with pytest.raises(ParseError):
        load_detector(path)


def test_detections_file_reloads(tmp_path: Path) -> None:
    rows = [
        Detection("a", 1, BoundingBox(1, 2, 3, 4), 0.875),
        Detection("b", 0, BoundingBox(0, 0, 5, 5), 0.8),
    ]
    path = tmp_path / "detections.csv"
    write_detections(rows, path)
    assert read_detections(path) == rows
