"""Bag construction for box-supervised multiple instance learning.

A positive bag is the prediction sequence along one line of interest: the
radial line from the transform origin out to the box side.  A negative bag
is a single pixel outside every box of the category.  The origin is the
argmax of the current prediction map inside the box and is treated as a
constant with respect to differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imagecore import BoundingBox, ImageGrid
from .polar import PolarConfig, bilinear_sample, loi_valid_lengths


@dataclass(frozen=True)
class PositiveBag:
    """Ordered predictions p_0..p_{n-1} along one line of interest.

    p_0 sits at the origin and p_{n-1} at the box side; source identifies
    (box id, theta index).
    """

    category: int
    predictions: np.ndarray
    source: tuple

    def __post_init__(self):
        p = np.asarray(self.predictions, dtype=np.float64)
        if p.ndim != 1 or p.size < 1:
            raise ValueError("a positive bag needs at least one prediction")
        if np.any(p < 0.0) or np.any(p > 1.0):
            raise ValueError("bag predictions must lie in [0, 1]")
        p = p.copy()
        p.setflags(write=False)
        object.__setattr__(self, "predictions", p)

    def __len__(self):
        return self.predictions.size


@dataclass(frozen=True)
class NegativeBag:
    """A single pixel outside all boxes of the category."""

    category: int
    prediction: float
    source: tuple

    def __post_init__(self):
        if not 0.0 <= self.prediction <= 1.0:
            raise ValueError(f"negative-bag prediction {self.prediction} outside [0, 1]")


def select_origin(prob_map: ImageGrid, box: BoundingBox) -> tuple:
    """Argmax pixel of the prediction map restricted to the box.

    Ties break in row-major order (first occurrence).  No gradient flows
    through this selection.
    """
    clipped = box.clipped(prob_map.height, prob_map.width)
    window = prob_map.values[clipped.top : clipped.bottom + 1, clipped.left : clipped.right + 1]
    flat = int(np.argmax(window))
    dr, dc = divmod(flat, window.shape[1])
    return (clipped.top + dr, clipped.left + dc)


def interior_origin(box: BoundingBox, origin: tuple) -> tuple:
    """Nudge an origin on the box boundary to the nearest strictly-interior pixel.

    The polar valid-length extraction requires a strictly interior origin,
    while the argmax selection may land on the boundary (it always does for
    a uniform map).  Boxes narrower than 3 pixels on either axis have no
    interior and are rejected.
    """
    if box.height < 3 or box.width < 3:
        raise ValueError(f"box {box} has no strictly interior pixel")
    row = min(max(origin[0], box.top + 1), box.bottom - 1)
    col = min(max(origin[1], box.left + 1), box.right - 1)
    return (row, col)


def build_positive_bags(
    prob_map: ImageGrid, box: BoundingBox, cfg: PolarConfig, box_id: int = 0
) -> list:
    """One positive bag per angle: the LoI prefix of the polar-resampled map.

    Predictions are bilinear samples of the map (gradients flow through the
    interpolation weights in the training path); exactly N_theta bags come
    back, each truncated to its valid length n(theta).
    """
    origin = interior_origin(box, select_origin(prob_map, box))
    samples = bilinear_sample(prob_map.values, origin, cfg)
    lengths = loi_valid_lengths(box, origin, cfg, prob_map.height, prob_map.width)
    # interpolation can overshoot [0, 1] by rounding noise only
    samples = np.clip(samples, 0.0, 1.0)
    return [
        PositiveBag(
            category=box.category,
            predictions=samples[: lengths[j], j],
            source=(box_id, j),
        )
        for j in range(cfg.n_theta)
    ]


def box_union_mask(boxes, category: int, image_h: int, image_w: int) -> np.ndarray:
    """Boolean mask of pixels covered by any box of the category."""
    mask = np.zeros((image_h, image_w), dtype=bool)
    for b in boxes:
        if b.category != category:
            continue
        clipped = b.clipped(image_h, image_w)
        mask[clipped.top : clipped.bottom + 1, clipped.left : clipped.right + 1] = True
    return mask


def negative_pixel_indices(boxes, category: int, image_h: int, image_w: int) -> np.ndarray:
    """Flat indices of pixels outside every box of the category (row-major)."""
    covered = box_union_mask(boxes, category, image_h, image_w)
    return np.flatnonzero(~covered.ravel())


def build_negative_bags(prob_map: ImageGrid, boxes, category: int) -> list:
    """One negative bag per pixel outside the union of the category's boxes."""
    flat_indices = negative_pixel_indices(boxes, category, prob_map.height, prob_map.width)
    flat_values = prob_map.values.ravel()
    w = prob_map.width
    return [
        NegativeBag(category=category, prediction=float(flat_values[i]), source=(i // w, i % w))
        for i in flat_indices
    ]
