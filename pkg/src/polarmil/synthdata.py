"""Synthetic labelled ellipse images with tight and loose box annotations.

Each image holds one bright, randomly rotated ellipse on a smoothly shaded
background plus additive noise.  Convex-ish blobs keep the "closer to the
transform origin, more likely object" prior honest.  Tight boxes are the
bounding rectangles of the masks; loose boxes add a configurable margin.
Generation is deterministic per seed with per-image derived seeds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imagecore import BoundingBox, ImageGrid, loosen_box, write_boxes, write_pgm

ELLIPSE = "ellipse"
BLOB = "blob"

# generator guarantee: object covers between 5% and 50% of the image
MIN_AREA_FRAC = 0.05
MAX_AREA_FRAC = 0.50


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 64
    n_train: int = 200
    n_val: int = 50
    shape_family: str = ELLIPSE
    contrast_min: float = 0.4
    contrast_max: float = 0.6
    noise_level: float = 0.03
    loose_margin: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 16:
            raise ValueError(f"image_size must be >= 16, got {self.image_size}")
        if self.n_train < 1 or self.n_val < 1:
            raise ValueError("n_train and n_val must be >= 1")
        if self.shape_family not in (ELLIPSE, BLOB):
            raise ValueError(f"unknown shape family {self.shape_family!r}")
        if not 0.0 < self.contrast_min <= self.contrast_max <= 1.0:
            raise ValueError("contrast range must satisfy 0 < min <= max <= 1")
        if self.noise_level < 0:
            raise ValueError("noise_level must be >= 0")
        if self.loose_margin < 0:
            raise ValueError("loose_margin must be >= 0")


def _ellipse_mask(size: int, rng: np.random.Generator) -> np.ndarray:
    """Random rotated ellipse hitting the 5-50% area constraint."""
    rr, cc = np.mgrid[0:size, 0:size]
    while True:
        cy = rng.uniform(0.32, 0.68) * size
        cx = rng.uniform(0.32, 0.68) * size
        a = rng.uniform(0.13, 0.34) * size
        b = rng.uniform(0.13, 0.34) * size
        phi = rng.uniform(0.0, math.pi)
        dy = rr - cy
        dx = cc - cx
        ry = dy * math.cos(phi) - dx * math.sin(phi)
        rx = dy * math.sin(phi) + dx * math.cos(phi)
        mask = ((ry / a) ** 2 + (rx / b) ** 2 <= 1.0).astype(np.float64)
        frac = mask.mean()
        if MIN_AREA_FRAC <= frac <= MAX_AREA_FRAC and _fits(mask, size):
            return mask


def _blob_mask(size: int, rng: np.random.Generator) -> np.ndarray:
    """Ellipse with a radial wobble; still star-convex about its centre."""
    rr, cc = np.mgrid[0:size, 0:size]
    while True:
        cy = rng.uniform(0.35, 0.65) * size
        cx = rng.uniform(0.35, 0.65) * size
        base = rng.uniform(0.16, 0.3) * size
        amp = rng.uniform(0.05, 0.25)
        lobes = rng.integers(3, 6)
        phase = rng.uniform(0.0, 2 * math.pi)
        dy = rr - cy
        dx = cc - cx
        theta = np.arctan2(dy, dx)
        radius = base * (1.0 + amp * np.cos(lobes * theta + phase))
        mask = (np.hypot(dy, dx) <= radius).astype(np.float64)
        frac = mask.mean()
        if MIN_AREA_FRAC <= frac <= MAX_AREA_FRAC and _fits(mask, size):
            return mask


def _fits(mask: np.ndarray, size: int) -> bool:
    """Object must not touch the border, so the tight box stays interior."""
    return (
        mask[0, :].sum() == 0
        and mask[-1, :].sum() == 0
        and mask[:, 0].sum() == 0
        and mask[:, -1].sum() == 0
    )


def tight_box_of_mask(mask: np.ndarray, category: int = 1) -> BoundingBox:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise ValueError("mask is empty; no tight box exists")
    return BoundingBox(
        top=int(rows[0]), left=int(cols[0]), bottom=int(rows[-1]), right=int(cols[-1]),
        category=category,
    )


def make_case(cfg: SynthConfig, index: int):
    """One synthetic (image, mask, tight box, loose box) tuple."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, index]))
    size = cfg.image_size
    mask = _ellipse_mask(size, rng) if cfg.shape_family == ELLIPSE else _blob_mask(size, rng)

    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    base = rng.uniform(0.2, 0.3) + rng.uniform(-0.15, 0.15) * (yy - 0.5)
    base = base + rng.uniform(-0.15, 0.15) * (xx - 0.5)
    contrast = rng.uniform(cfg.contrast_min, cfg.contrast_max)
    values = base + contrast * mask
    if cfg.noise_level > 0:
        values = values + rng.normal(0.0, cfg.noise_level, size=(size, size))
    image = ImageGrid(np.clip(values, 0.0, 1.0))

    tight = tight_box_of_mask(mask)
    loose = loosen_box(tight, cfg.loose_margin, size, size)
    return image, ImageGrid(mask), tight, loose


def generate(cfg: SynthConfig, out_dir) -> list:
    """Write the dataset tree and return the case id list.

    Layout: images/NNNN.pgm, masks/NNNN.pgm, boxes_tight/NNNN.txt,
    boxes_loose/NNNN.txt.
    """
    out = Path(out_dir)
    for sub in ("images", "masks", "boxes_tight", "boxes_loose"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    n_total = cfg.n_train + cfg.n_val
    ids = []
    for index in range(n_total):
        case_id = f"{index:04d}"
        image, mask, tight, loose = make_case(cfg, index)
        write_pgm(image, out / "images" / f"{case_id}.pgm")
        write_pgm(mask, out / "masks" / f"{case_id}.pgm")
        write_boxes([tight], out / "boxes_tight" / f"{case_id}.txt")
        write_boxes([loose], out / "boxes_loose" / f"{case_id}.txt")
        ids.append(case_id)
    return ids


def split(dataset_dir, seed: int, train_frac: float = 0.8):
    """Write disjoint, exhaustive train.txt / val.txt manifests."""
    root = Path(dataset_dir)
    ids = sorted(p.stem for p in (root / "images").glob("*.pgm"))
    if not ids:
        raise ValueError(f"no images found under {root}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    n_train = int(round(train_frac * len(ids)))
    train_ids = sorted(ids[i] for i in order[:n_train])
    val_ids = sorted(ids[i] for i in order[n_train:])
    (root / "train.txt").write_text("".join(f"{i}\n" for i in train_ids), encoding="ascii")
    (root / "val.txt").write_text("".join(f"{i}\n" for i in val_ids), encoding="ascii")
    return train_ids, val_ids
