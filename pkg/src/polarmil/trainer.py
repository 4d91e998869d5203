"""Deterministic desk-scale training loop.

Loads a generated dataset, applies offline augmentation (mirroring,
flipping, rotation by multiples of 90 degrees) once to the training split,
and optimises the selected loss arm with Adam.  Each epoch logs the loss
breakdown, validation Dice, and the selected polar origins of the
validation cases; everything is bit-reproducible for a fixed seed in
single-threaded mode.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .bags import select_origin
from .evalmetrics import binarize, dice, dice_stacked
from .imagecore import AnnotatedImage, BoundingBox, ImageGrid, loosen_box, read_boxes, read_pgm
from .losses import LossBreakdown, LossConfig, combined_loss
from .network import ModelConfig, SegmentationNet, save_weights
from .optim import Adam, AdamConfig

ARM_POLAR = "polar"
ARM_BASELINE = "baseline-lg"
ARM_COMBINED = "combined"
ARMS = (ARM_POLAR, ARM_BASELINE, ARM_COMBINED)

METRICS_HEADER = (
    "epoch,unary,pairwise,polar_total,baseline_total,combined,val_mean_dice,val_stacked_dice"
)
ORIGINS_HEADER = "epoch,box_id,row,col"


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 50
    seed: int = 0
    arm: str = ARM_COMBINED
    dedupe_pairwise: bool = False
    augment: bool = True
    box_kind: str = "loose"
    margin: object = None  # when set, loosen the tight boxes by this many pixels
    out_dir: object = None

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.arm not in ARMS:
            raise ValueError(f"unknown loss arm {self.arm!r}; choose one of {ARMS}")
        if self.box_kind not in ("loose", "tight"):
            raise ValueError(f"box_kind must be 'loose' or 'tight', got {self.box_kind!r}")
        if self.margin is not None and int(self.margin) < 0:
            raise ValueError(f"margin must be >= 0, got {self.margin}")


@dataclass
class TrainResult:
    net: SegmentationNet
    metrics: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    origins: list = field(default_factory=list)
    weights_path: object = None

    @property
    def final_val_dice(self) -> float:
        return self.metrics[-1]["val_mean_dice"] if self.metrics else float("nan")

    @property
    def final_stacked_dice(self) -> float:
        return self.metrics[-1]["val_stacked_dice"] if self.metrics else float("nan")


# ---------------------------------------------------------------------------
# dataset loading and offline augmentation
# ---------------------------------------------------------------------------

def load_cases(dataset_dir, manifest: str, box_kind: str = "loose", margin=None) -> list:
    """Cases from a manifest; ``margin`` re-derives loose boxes from tight ones."""
    root = Path(dataset_dir)
    manifest_path = root / manifest
    ids = [line.strip() for line in manifest_path.read_text().splitlines() if line.strip()]
    box_dir = "boxes_tight" if (margin is not None or box_kind == "tight") else "boxes_loose"
    cases = []
    for case_id in ids:
        image = read_pgm(root / "images" / f"{case_id}.pgm")
        boxes = read_boxes(root / box_dir / f"{case_id}.txt")
        if margin is not None:
            boxes = [loosen_box(b, int(margin), image.height, image.width) for b in boxes]
        mask_path = root / "masks" / f"{case_id}.pgm"
        masks = {}
        if mask_path.exists():
            masks = {b.category: read_pgm(mask_path) for b in boxes} or {1: read_pgm(mask_path)}
        cases.append(AnnotatedImage(image=image, boxes=boxes, masks=masks, case_id=case_id))
    return cases


def _map_box(box: BoundingBox, corners) -> BoundingBox:
    """Rebuild a box from the transformed corner pixels."""
    rows = [c[0] for c in corners]
    cols = [c[1] for c in corners]
    return BoundingBox(min(rows), min(cols), max(rows), max(cols), box.category)


def mirror_case(case: AnnotatedImage) -> AnnotatedImage:
    """Left-right mirroring."""
    w = case.image.width
    return AnnotatedImage(
        image=ImageGrid(case.image.values[:, ::-1]),
        boxes=[
            BoundingBox(b.top, w - 1 - b.right, b.bottom, w - 1 - b.left, b.category)
            for b in case.boxes
        ],
        masks={c: ImageGrid(m.values[:, ::-1]) for c, m in case.masks.items()},
        case_id=case.case_id + "+m",
    )


def flip_case(case: AnnotatedImage) -> AnnotatedImage:
    """Up-down flipping."""
    h = case.image.height
    return AnnotatedImage(
        image=ImageGrid(case.image.values[::-1, :]),
        boxes=[
            BoundingBox(h - 1 - b.bottom, b.left, h - 1 - b.top, b.right, b.category)
            for b in case.boxes
        ],
        masks={c: ImageGrid(m.values[::-1, :]) for c, m in case.masks.items()},
        case_id=case.case_id + "+f",
    )


def rotate90_case(case: AnnotatedImage, quarter_turns: int) -> AnnotatedImage:
    """Counter-clockwise rotation by ``quarter_turns`` * 90 degrees."""
    k = quarter_turns % 4
    if k == 0:
        return case
    values = np.rot90(case.image.values, k)
    boxes = []
    for b in case.boxes:
        corners = [(b.top, b.left), (b.top, b.right), (b.bottom, b.left), (b.bottom, b.right)]
        h, w = case.image.height, case.image.width
        for _ in range(k):
            # ccw: pixel (r, c) of an HxW image maps to (w-1-c, r)
            corners = [(w - 1 - c, r) for (r, c) in corners]
            h, w = w, h
        boxes.append(_map_box(b, corners))
    return AnnotatedImage(
        image=ImageGrid(values),
        boxes=boxes,
        masks={c: ImageGrid(np.rot90(m.values, k)) for c, m in case.masks.items()},
        case_id=case.case_id + f"+r{k * 90}",
    )


def augment_cases(cases) -> list:
    """Offline augmentation: identity, mirror, flip, rot90/180/270."""
    out = []
    for case in cases:
        out.append(case)
        out.append(mirror_case(case))
        out.append(flip_case(case))
        for k in (1, 2, 3):
            out.append(rotate90_case(case, k))
    return out


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _forward_batch(net: SegmentationNet, batch) -> Tensor:
    images = np.stack([case.image.values[None, :, :] for case in batch])
    return net.forward(Tensor(images))


def _evaluate(net: SegmentationNet, cases, epoch: int, origins: list):
    """Validation Dice (per-case mean and stacked) plus origin logging."""
    pairs = []
    per_case = []
    batch_size = 16
    for start in range(0, len(cases), batch_size):
        chunk = cases[start : start + batch_size]
        images = np.stack([c.image.values[None, :, :] for c in chunk])
        probs = net.predict(images)
        for i, case in enumerate(chunk):
            prob_map = ImageGrid(np.clip(probs[i, 0], 0.0, 1.0))
            pred = binarize(prob_map)
            gt = case.masks.get(1)
            if gt is not None:
                pairs.append((pred, gt))
                per_case.append(dice(pred, gt))
            for box_idx, box in enumerate(case.boxes):
                channel = ImageGrid(np.clip(probs[i, box.category - 1], 0.0, 1.0))
                row, col = select_origin(channel, box)
                origins.append(
                    {"epoch": epoch, "box_id": f"{case.case_id}:{box_idx}", "row": row, "col": col}
                )
    mean_dice = float(np.mean(per_case)) if per_case else float("nan")
    stacked = dice_stacked(pairs) if pairs else float("nan")
    return mean_dice, stacked


def train(
    dataset_dir,
    model_cfg: ModelConfig,
    adam_cfg: AdamConfig,
    loss_cfg: LossConfig,
    settings: TrainSettings,
) -> TrainResult:
    """Full training run; returns the trained model and per-epoch metrics."""
    train_cases = load_cases(dataset_dir, "train.txt", settings.box_kind, settings.margin)
    val_cases = load_cases(dataset_dir, "val.txt", settings.box_kind, settings.margin)
    if settings.augment:
        train_cases = augment_cases(train_cases)

    net = SegmentationNet(model_cfg)
    optimizer = Adam(net.parameters(), adam_cfg)
    rng = np.random.default_rng(settings.seed)
    enable_polar = settings.arm in (ARM_POLAR, ARM_COMBINED)
    enable_baseline = settings.arm in (ARM_BASELINE, ARM_COMBINED)

    result = TrainResult(net=net)
    step = 0
    for epoch in range(settings.epochs):
        order = rng.permutation(len(train_cases))
        epoch_rows = []
        for start in range(0, len(order), adam_cfg.batch_size):
            batch = [train_cases[i] for i in order[start : start + adam_cfg.batch_size]]
            probs = _forward_batch(net, batch)
            total = None
            breakdowns = []
            for i, case in enumerate(batch):
                loss_i, breakdown = combined_loss(
                    probs[i],
                    case.boxes,
                    loss_cfg,
                    enable_polar=enable_polar,
                    enable_baseline=enable_baseline,
                    dedupe_pairwise=settings.dedupe_pairwise,
                )
                total = loss_i if total is None else total + loss_i
                breakdowns.append(breakdown)
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            step += 1
            row = _mean_breakdown(breakdowns)
            result.steps.append({"step": step, **row})
            epoch_rows.append(row)
        mean_dice, stacked = _evaluate(net, val_cases, epoch + 1, result.origins)
        epoch_mean = _mean_rows(epoch_rows)
        result.metrics.append(
            {
                "epoch": epoch + 1,
                **epoch_mean,
                "val_mean_dice": mean_dice,
                "val_stacked_dice": stacked,
            }
        )

    if settings.out_dir is not None:
        out = Path(settings.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        result.weights_path = out / "weights.bin"
        save_weights(net, result.weights_path)
        _write_csvs(out, result)
    return result


_BREAKDOWN_KEYS = ("unary", "pairwise", "polar_total", "baseline_total", "combined")


def _mean_breakdown(breakdowns) -> dict:
    return {
        "unary": float(np.mean([sum(b.unary) for b in breakdowns])),
        "pairwise": float(np.mean([sum(b.pairwise) for b in breakdowns])),
        "polar_total": float(np.mean([b.polar_total for b in breakdowns])),
        "baseline_total": float(np.mean([b.baseline_total for b in breakdowns])),
        "combined": float(np.mean([b.combined for b in breakdowns])),
    }


def _mean_rows(rows) -> dict:
    if not rows:
        return {k: float("nan") for k in _BREAKDOWN_KEYS}
    return {k: float(np.mean([r[k] for r in rows])) for k in _BREAKDOWN_KEYS}


def _write_csvs(out: Path, result: TrainResult) -> None:
    lines = [METRICS_HEADER]
    for m in result.metrics:
        lines.append(
            f"{m['epoch']},{m['unary']:.9g},{m['pairwise']:.9g},{m['polar_total']:.9g},"
            f"{m['baseline_total']:.9g},{m['combined']:.9g},"
            f"{m['val_mean_dice']:.6f},{m['val_stacked_dice']:.6f}"
        )
    (out / "metrics.csv").write_text("\n".join(lines) + "\n")

    lines = [LossBreakdown.CSV_HEADER]
    for s in result.steps:
        lines.append(
            f"{s['step']},{s['unary']:.9g},{s['pairwise']:.9g},{s['polar_total']:.9g},"
            f"{s['baseline_total']:.9g},{s['combined']:.9g}"
        )
    (out / "steps.csv").write_text("\n".join(lines) + "\n")

    lines = [ORIGINS_HEADER]
    for o in result.origins:
        lines.append(f"{o['epoch']},{o['box_id']},{o['row']},{o['col']}")
    (out / "origins.csv").write_text("\n".join(lines) + "\n")
