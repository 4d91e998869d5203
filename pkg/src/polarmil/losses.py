"""Loss stack: focal unary loss over bags, pairwise smoothness, the
polar-MIL loss, an axis-aligned crossing-line MIL baseline, and their sum.

All losses are built from autodiff tensor ops so gradients reach the
prediction maps; origin selection and bag geometry (interpolation stencils,
valid lengths) are constants with respect to differentiation.  The
crossing-line baseline ("baseline-lg") treats every row and column segment
of a box as a positive bag with unweighted smooth max; it deliberately
stands in for a fuller angle-swept formulation, which is out of scope here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .bags import interior_origin, negative_pixel_indices, select_origin
from .imagecore import ImageGrid
from .polar import PolarConfig, bilinear_table, loi_valid_lengths
from .smoothmax import (
    HARD_MAX,
    WEIGHTED_QUASIMAX,
    WEIGHTED_SOFTMAX,
    RadialWeights,
    SmoothMaxConfig,
    radial_weights,
)

FOUR_CONNECTED = "4"
EIGHT_CONNECTED = "8"

# keeps every log argument strictly positive
CLAMP_EPS = 1e-6


@dataclass(frozen=True)
class LossConfig:
    """Trade-off and focal parameters plus the smooth-max/polar geometry."""

    lam: float = 10.0
    beta: float = 0.25
    gamma: float = 2.0
    smoothmax: SmoothMaxConfig = field(default_factory=SmoothMaxConfig)
    neighborhood: str = FOUR_CONNECTED
    polar: PolarConfig = field(default_factory=PolarConfig)

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.neighborhood not in (FOUR_CONNECTED, EIGHT_CONNECTED):
            raise ValueError(f"neighborhood must be '4' or '8', got {self.neighborhood!r}")
        if self.smoothmax.variant == HARD_MAX:
            raise ValueError("hard_max is an evaluation baseline and cannot train")
        if self.smoothmax.n_r != self.polar.n_r:
            raise ValueError(
                f"smoothmax.n_r ({self.smoothmax.n_r}) must match polar.n_r ({self.polar.n_r})"
            )


@dataclass(frozen=True)
class LossBreakdown:
    """Per-category components and arm totals; combined = polar + baseline."""

    unary: tuple
    pairwise: tuple
    polar_total: float
    baseline_total: float
    combined: float

    def __post_init__(self):
        parts = (*self.unary, *self.pairwise, self.polar_total, self.baseline_total, self.combined)
        if not all(np.isfinite(v) and v >= 0.0 for v in parts):
            raise ValueError(f"loss components must be finite and >= 0: {self}")
        if abs(self.combined - (self.polar_total + self.baseline_total)) > 1e-9 * max(
            1.0, self.combined
        ):
            raise ValueError("combined must equal polar_total + baseline_total")

    CSV_HEADER = "step,unary,pairwise,polar_total,baseline_total,combined"

    def csv_row(self, step: int) -> str:
        return (
            f"{step},{sum(self.unary):.9g},{sum(self.pairwise):.9g},"
            f"{self.polar_total:.9g},{self.baseline_total:.9g},{self.combined:.9g}"
        )


def _as_map_tensor(prob_maps) -> Tensor:
    """Accept a (C, H, W) tensor/array or a single (H, W) map."""
    t = ad.astensor(prob_maps)
    if t.values.ndim == 2:
        t = ad.reshape(t, (1, *t.values.shape))
    if t.values.ndim != 3:
        raise ValueError(f"prob_maps must be (C, H, W), got shape {t.shape}")
    return t


def unary_focal(pos_bag_values, neg_bag_values, beta: float, gamma: float) -> Tensor:
    """Focal bag-classification loss, normalised by max(1, #positive bags).

    phi = -(1/N+) * [ sum_pos beta*(1-P)^gamma*log(P)
                      + sum_neg (1-beta)*P^gamma*log(1-P) ].
    Predictions are clamped away from {0, 1} so the value stays finite.
    """
    pos = ad.astensor(pos_bag_values)
    neg = ad.astensor(neg_bag_values)
    n_pos = max(1, pos.size)
    total = Tensor(0.0)
    if pos.size:
        p = ad.clip(pos, CLAMP_EPS, 1.0 - CLAMP_EPS)
        total = total + ad.tsum(beta * (1.0 - p) ** gamma * ad.log(p))
    if neg.size:
        q = ad.clip(neg, CLAMP_EPS, 1.0 - CLAMP_EPS)
        total = total + ad.tsum((1.0 - beta) * q**gamma * ad.log(1.0 - q))
    return -total * (1.0 / n_pos)


def pairwise_smooth(prob_map, neighborhood: str = FOUR_CONNECTED) -> Tensor:
    """Mean squared difference over all unordered neighbouring pixel pairs."""
    if isinstance(prob_map, ImageGrid):
        prob_map = prob_map.values
    q = ad.astensor(prob_map)
    h, w = q.shape
    terms = []
    n_pairs = h * (w - 1) + (h - 1) * w
    if w > 1:
        terms.append(ad.tsum((q[:, 1:] - q[:, :-1]) ** 2))
    if h > 1:
        terms.append(ad.tsum((q[1:, :] - q[:-1, :]) ** 2))
    if neighborhood == EIGHT_CONNECTED:
        n_pairs += 2 * (h - 1) * (w - 1)
        if h > 1 and w > 1:
            terms.append(ad.tsum((q[1:, 1:] - q[:-1, :-1]) ** 2))
            terms.append(ad.tsum((q[1:, :-1] - q[:-1, 1:]) ** 2))
    elif neighborhood != FOUR_CONNECTED:
        raise ValueError(f"neighborhood must be '4' or '8', got {neighborhood!r}")
    if n_pairs == 0:
        return Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / n_pairs)


def _bag_block_predictions(samples: Tensor, valid: np.ndarray, weights: np.ndarray, cfg: SmoothMaxConfig) -> Tensor:
    """Smooth-max predictions of bags stacked as (max_len, n_bags) columns.

    ``valid`` marks the leading prefix of each column that belongs to the
    bag.  The max used for exponent stabilisation is mathematically inert,
    so it is taken from raw values and treated as a constant.
    """
    w_masked = weights[: valid.shape[0], None] * valid
    z = samples * w_masked  # w_k * p_k, zero where invalid
    m = z.values.max(axis=0)  # z >= 0 and row 0 is always valid
    e = ad.exp((z - m[None, :]) * cfg.alpha) * valid
    den = ad.tsum(e, axis=0)
    if cfg.variant == WEIGHTED_SOFTMAX:
        num = ad.tsum(z * e, axis=0)
        return num / den
    if cfg.variant == WEIGHTED_QUASIMAX:
        counts = valid.sum(axis=0)
        return ad.log(den) * (1.0 / cfg.alpha) + (m - np.log(counts) / cfg.alpha)
    raise ValueError(f"variant {cfg.variant!r} is not differentiable")


def polar_bag_values(q: Tensor, box, polar_cfg: PolarConfig, weights: RadialWeights, smax: SmoothMaxConfig) -> Tensor:
    """Bag predictions (one per angle) for a single box on map ``q``."""
    h, w = q.shape
    origin = interior_origin(box, select_origin(ImageGrid(q.values), box))
    idx, wgt = bilinear_table(origin, polar_cfg, h, w)
    samples = ad.reshape(ad.gather_linear(q, idx, wgt), (polar_cfg.n_r, polar_cfg.n_theta))
    lengths = loi_valid_lengths(box, origin, polar_cfg, h, w)
    valid = np.arange(polar_cfg.n_r)[:, None] < lengths[None, :]
    return _bag_block_predictions(samples, valid, weights.weights, smax)


def crossing_bag_values(q: Tensor, box, smax: SmoothMaxConfig) -> Tensor:
    """Row- and column-segment bag predictions for the baseline arm."""
    sub = q[box.top : box.bottom + 1, box.left : box.right + 1]
    k, length = sub.shape
    rows = ad.transpose(sub, (1, 0))  # each of the k rows becomes a column bag
    row_preds = _bag_block_predictions(
        rows, np.ones((length, k), dtype=bool), np.ones(length), smax
    )
    col_preds = _bag_block_predictions(sub, np.ones((k, length), dtype=bool), np.ones(k), smax)
    return ad.concat([row_preds, col_preds])


def _per_category(prob_maps: Tensor):
    for c in range(prob_maps.shape[0]):
        yield c + 1, prob_maps[c]


def _category_loss(q: Tensor, pos_values: Tensor, boxes, category: int, cfg: LossConfig):
    h, w = q.shape
    neg_idx = negative_pixel_indices(boxes, category, h, w)
    neg_values = ad.take_flat(q, neg_idx) if neg_idx.size else Tensor(np.zeros(0))
    unary = unary_focal(pos_values, neg_values, cfg.beta, cfg.gamma)
    pairwise = pairwise_smooth(q, cfg.neighborhood)
    return unary + cfg.lam * pairwise, float(unary.values), float(pairwise.values)


def polar_mil_loss(prob_maps, boxes, cfg: LossConfig):
    """Polar-transformation MIL loss summed over categories.

    Returns (loss tensor, per-category unary list, per-category pairwise
    list).  Every angle of every box contributes one positive bag; every
    pixel outside the category's boxes is a negative bag.
    """
    maps = _as_map_tensor(prob_maps)
    weights = radial_weights(cfg.smoothmax)
    total = Tensor(0.0)
    unary_parts, pairwise_parts = [], []
    for category, q in _per_category(maps):
        bag_values = [
            polar_bag_values(q, box, cfg.polar, weights, cfg.smoothmax)
            for box in boxes
            if box.category == category
        ]
        pos = ad.concat(bag_values) if bag_values else Tensor(np.zeros(0))
        loss_c, unary_c, pairwise_c = _category_loss(q, pos, boxes, category, cfg)
        total = total + loss_c
        unary_parts.append(unary_c)
        pairwise_parts.append(pairwise_c)
    return total, unary_parts, pairwise_parts


def baseline_crossing_mil_loss(prob_maps, boxes, cfg: LossConfig, include_pairwise: bool = True):
    """Axis-aligned crossing-line MIL loss (the "baseline-lg" arm).

    A KxL box yields K row bags and L column bags, scored with the
    unweighted smooth max (all weights 1); negative bags are shared with the
    polar arm.  Returns (loss tensor, unary list, pairwise list).
    """
    maps = _as_map_tensor(prob_maps)
    smax = SmoothMaxConfig(
        alpha=cfg.smoothmax.alpha, w_min=1.0, variant=cfg.smoothmax.variant, n_r=cfg.smoothmax.n_r
    )
    total = Tensor(0.0)
    unary_parts, pairwise_parts = [], []
    for category, q in _per_category(maps):
        bag_values = [
            crossing_bag_values(q, box, smax) for box in boxes if box.category == category
        ]
        pos = ad.concat(bag_values) if bag_values else Tensor(np.zeros(0))
        if include_pairwise:
            loss_c, unary_c, pairwise_c = _category_loss(q, pos, boxes, category, cfg)
        else:
            h, w = q.shape
            neg_idx = negative_pixel_indices(boxes, category, h, w)
            neg_values = ad.take_flat(q, neg_idx) if neg_idx.size else Tensor(np.zeros(0))
            loss_c = unary_focal(pos, neg_values, cfg.beta, cfg.gamma)
            unary_c, pairwise_c = float(loss_c.values), 0.0
        total = total + loss_c
        unary_parts.append(unary_c)
        pairwise_parts.append(pairwise_c)
    return total, unary_parts, pairwise_parts


def combined_loss(
    prob_maps,
    boxes,
    cfg: LossConfig,
    enable_polar: bool = True,
    enable_baseline: bool = True,
    dedupe_pairwise: bool = False,
):
    """Sum of the polar and baseline arms with a reported breakdown.

    ``dedupe_pairwise`` drops the pairwise term from the baseline arm when
    both arms are active, for ablations that want the smoothness prior
    counted once.
    """
    if not (enable_polar or enable_baseline):
        raise ValueError("at least one loss arm must be enabled")
    maps = _as_map_tensor(prob_maps)
    n_cat = maps.shape[0]
    unary = np.zeros(n_cat)
    pairwise = np.zeros(n_cat)
    total = Tensor(0.0)
    polar_total = 0.0
    baseline_total = 0.0
    if enable_polar:
        loss_p, unary_p, pairwise_p = polar_mil_loss(maps, boxes, cfg)
        total = total + loss_p
        polar_total = float(loss_p.values)
        unary += unary_p
        pairwise += pairwise_p
    if enable_baseline:
        include_pairwise = not (dedupe_pairwise and enable_polar)
        loss_g, unary_g, pairwise_g = baseline_crossing_mil_loss(
            maps, boxes, cfg, include_pairwise=include_pairwise
        )
        total = total + loss_g
        baseline_total = float(loss_g.values)
        unary += unary_g
        pairwise += pairwise_g
    breakdown = LossBreakdown(
        unary=tuple(unary),
        pairwise=tuple(pairwise),
        polar_total=polar_total,
        baseline_total=baseline_total,
        combined=float(total.values),
    )
    return total, breakdown
