"""Region features shared by the MIL classifier and the detector head."""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np

from .classifier import ClassifierModel, feature_maps
from .geometry import map_box_to_grid
from .models import BoundingBox, LabeledImage

GEOMETRY_DIMS = 4


class RegionFeatures:
    """
    ROI average-pooled last-conv maps plus box geometry for one image.

    The maps are computed once; every box then costs four summed-area lookups per map.
    """

    def __init__(self, model: ClassifierModel, pixels: np.ndarray) -> None:
        self.height, self.width = int(pixels.shape[0]), int(pixels.shape[1])
        maps = feature_maps(model, pixels)
        self.grid_height, self.grid_width, self.num_maps = maps.shape
        table = np.zeros((self.grid_height + 1, self.grid_width + 1, self.num_maps))
        table[1:, 1:, :] = maps.cumsum(axis=0).cumsum(axis=1)
        self.table = table

    @property
    def dim(self) -> int:
        return self.num_maps + GEOMETRY_DIMS

    def __call__(self, boxes: Sequence[BoundingBox]) -> np.ndarray:
        out = np.zeros((len(boxes), self.dim))
        if not boxes:
            return out
        grid = np.array(
            [
                map_box_to_grid(box, self.width, self.height, self.grid_width, self.grid_height)
                for box in boxes
            ]
        )
        x1, y1, x2, y2 = grid.T
        t = self.table
        sums = t[y2, x2] - t[y1, x2] - t[y2, x1] + t[y1, x1]
        cells = np.maximum((x2 - x1) * (y2 - y1), 1)[:, None]
        out[:, : self.num_maps] = sums / cells
        geometry = np.array(
            [
                (
                    box.width / self.width,
                    box.height / self.height,
                    (box.x1 + box.x2) / (2.0 * self.width),
                    (box.y1 + box.y2) / (2.0 * self.height),
                )
                for box in boxes
            ]
        )
        out[:, self.num_maps :] = geometry
        return out


def extract_instance_features(
    model: ClassifierModel, image: LabeledImage | np.ndarray, box: BoundingBox
) -> np.ndarray:
    """K + 4 features of one box: pooled maps then (w/W, h/H, cx/W, cy/H)."""
    pixels = image.pixels if isinstance(image, LabeledImage) else image
    return RegionFeatures(model, pixels)([box])[0]
