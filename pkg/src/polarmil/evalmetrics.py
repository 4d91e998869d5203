"""Dice evaluation: per-case, stacked across slices, and sensitivity tables."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imagecore import ImageGrid


def binarize(prob_map: ImageGrid, threshold: float = 0.5) -> ImageGrid:
    """Threshold a probability map into a {0, 1} mask (>= threshold -> 1)."""
    return ImageGrid((prob_map.values >= threshold).astype(np.float64))


def _check_masks(pred: ImageGrid, gt: ImageGrid):
    if (pred.height, pred.width) != (gt.height, gt.width):
        raise ValueError(
            f"shape mismatch: pred {pred.height}x{pred.width} vs gt {gt.height}x{gt.width}"
        )
    if not (pred.is_mask() and gt.is_mask()):
        raise ValueError("dice requires binary masks")


def dice(pred_mask: ImageGrid, gt_mask: ImageGrid) -> float:
    """2|A∩B| / (|A|+|B|), defined as 1.0 when both masks are empty."""
    _check_masks(pred_mask, gt_mask)
    inter = float(np.sum(pred_mask.values * gt_mask.values))
    total = float(pred_mask.values.sum() + gt_mask.values.sum())
    if total == 0.0:
        return 1.0
    return 2.0 * inter / total


def dice_stacked(slices) -> float:
    """Dice over the pooled pixels of all (pred, gt) slices.

    This is the 3D-equivalent overlap of the stacked 2D slices, not the mean
    of per-slice Dice values.
    """
    inter = 0.0
    total = 0.0
    for pred, gt in slices:
        _check_masks(pred, gt)
        inter += float(np.sum(pred.values * gt.values))
        total += float(pred.values.sum() + gt.values.sum())
    if total == 0.0:
        return 1.0
    return 2.0 * inter / total


@dataclass(frozen=True)
class DiceReport:
    """Per-case Dice values with mean and population standard deviation."""

    case_ids: tuple
    values: tuple

    def __post_init__(self):
        if len(self.case_ids) != len(self.values):
            raise ValueError("one Dice value per case id required")
        if any(not 0.0 <= v <= 1.0 for v in self.values):
            raise ValueError("Dice values must lie in [0, 1]")

    @property
    def mean(self) -> float:
        return float(np.mean(self.values)) if self.values else 0.0

    @property
    def std(self) -> float:
        # population std, matching "mean (std)" result tables
        return float(np.std(self.values)) if self.values else 0.0

    def to_csv(self) -> str:
        lines = ["case_id,dice"]
        lines += [f"{cid},{v:.6f}" for cid, v in zip(self.case_ids, self.values)]
        lines.append(f"mean,{self.mean:.6f}")
        lines.append(f"std,{self.std:.6f}")
        return "\n".join(lines) + "\n"


def sensitivity_grid(results: dict, alphas, w_mins) -> str:
    """CSV matrix of mean Dice per (alpha, w_min); missing cells print NA.

    ``results`` maps (alpha, w_min) to a float; absent keys are reported,
    never fabricated.
    """
    header = "alpha," + ",".join(f"wmin={w:g}" for w in w_mins)
    lines = [header]
    for a in alphas:
        cells = []
        for w in w_mins:
            v = results.get((a, w))
            cells.append("NA" if v is None else f"{v:.6f}")
        lines.append(f"{a:g}," + ",".join(cells))
    return "\n".join(lines) + "\n"
