"""Tests for boxes, datasets and box arithmetic."""

from collections.abc import Callable
from typing import Any

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wsolkit.exceptions import GeometryError
from wsolkit.geometry import (
    boxes_to_array,
    clip_box,
    expand_box,
    iou,
    iou_matrix,
    map_box_to_grid,
    tight_box,
)
from wsolkit.models import BoundingBox, Dataset, ErrorBreakdown, GroundTruth, LabeledImage


@st.composite
def boxes(draw: Callable[..., Any]) -> BoundingBox:
    x1 = draw(st.integers(0, 60))
    y1 = draw(st.integers(0, 60))
    return BoundingBox(x1, y1, x1 + draw(st.integers(1, 30)), y1 + draw(st.integers(1, 30)))


def test_bounding_box_rejects_degenerate() -> None:
    with pytest.raises(GeometryError):
        BoundingBox(5, 5, 5, 10)
    with pytest.raises(GeometryError):
        BoundingBox(5, 9, 8, 3)


def test_bounding_box_properties() -> None:
    box = BoundingBox(2, 4, 12, 8)
    assert box.width == 10
    assert box.height == 4
    assert box.area == 40
    assert box.center == (7.0, 6.0)
    assert box.fits(12, 8)
    assert not box.fits(11, 8)


def test_iou_known_values() -> None:
    a = BoundingBox(0, 0, 10, 10)
    assert iou(a, a) == 1.0
    assert iou(a, BoundingBox(10, 0, 20, 10)) == 0.0
    # 50 shared pixels over 150
    assert iou(a, BoundingBox(5, 0, 15, 10)) == pytest.approx(1.0 / 3.0)


@given(boxes(), boxes())
def test_iou_symmetric_and_bounded(a: BoundingBox, b: BoundingBox) -> None:
    value = iou(a, b)
    assert value == pytest.approx(iou(b, a))
    assert 0.0 <= value <= 1.0


@given(st.lists(boxes(), min_size=1, max_size=6), st.lists(boxes(), min_size=1, max_size=6))
def test_iou_matrix_matches_scalar(left: list[BoundingBox], right: list[BoundingBox]) -> None:
    matrix = iou_matrix(boxes_to_array(left), boxes_to_array(right))
    assert matrix.shape == (len(left), len(right))
    for i, a in enumerate(left):
        for j, b in enumerate(right):
            assert matrix[i, j] == pytest.approx(iou(a, b))


def test_clip_box() -> None:
    assert clip_box((-5, -5, 10, 10), 8, 8) == BoundingBox(0, 0, 8, 8)
    assert clip_box((20, 20, 30, 30), 8, 8) is None


def test_expand_box_stays_inside_image() -> None:
    box = BoundingBox(0, 10, 8, 30)
    grown = expand_box(box, 0.25, 32, 32)
    assert grown == BoundingBox(0, 5, 10, 32)


def test_map_box_to_grid_rounds_outward() -> None:
    assert map_box_to_grid(BoundingBox(5, 5, 11, 11), 64, 64, 16, 16) == (1, 1, 3, 3)
    assert map_box_to_grid(BoundingBox(0, 0, 64, 64), 64, 64, 16, 16) == (0, 0, 16, 16)


def test_tight_box() -> None:
    mask = np.zeros((10, 10), dtype=bool)
    assert tight_box(mask) is None
    mask[2:5, 3:9] = True
    assert tight_box(mask) == BoundingBox(3, 2, 9, 5)


def test_dataset_positives_and_negatives() -> None:
    pixels = np.zeros((4, 4, 3))
    gt = (GroundTruth(1, BoundingBox(0, 0, 2, 2)),)
    first = LabeledImage("a", pixels, (0, 1), gt)
    second = LabeledImage("b", pixels, (1, 0))
    dataset = Dataset((first, second), 2, ("red", "blue"))

    assert len(dataset) == 2
    assert [image.id for image in dataset.positives(1)] == ["a"]
    assert [image.id for image in dataset.negatives(1)] == ["b"]
    assert dataset.by_id["b"] is second
    assert first.gt_boxes(1) == [BoundingBox(0, 0, 2, 2)]
    np.testing.assert_array_equal(dataset.label_matrix(), [[0, 1], [1, 0]])


def test_error_breakdown_total() -> None:
    breakdown = ErrorBreakdown(cor=3, loc=2, bg=1)
    assert breakdown.total == 6
    assert breakdown.to_public_dict()["Loc"] == 2
