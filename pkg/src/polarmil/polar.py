"""Polar resampling of box regions and line-of-interest valid lengths.

The transform samples an image on an (r, theta) grid about an origin pixel:
r_k = k*R/N_r for k = 0..N_r-1 and theta_j = j*2*pi/N_theta for
j = 0..N_theta-1, with u = r*cos(theta) the column offset and
v = r*sin(theta) the row offset.  Samples outside the image read as 0.
Applying the same transform to the binary box region yields, per angle, the
number n(theta) of leading samples that still lie inside the box; those
prefixes are the lines of interest consumed by the bag construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .imagecore import BoundingBox, ImageGrid

NEAREST = "nearest"
BILINEAR = "bilinear"


@dataclass(frozen=True)
class PolarConfig:
    """Output shape and radius of the polar transform."""

    n_r: int = 30
    n_theta: int = 90
    radius: float = 30.0
    interpolation: str = BILINEAR

    def __post_init__(self):
        if self.n_r < 1:
            raise ValueError(f"n_r must be >= 1, got {self.n_r}")
        if self.n_theta < 1:
            raise ValueError(f"n_theta must be >= 1, got {self.n_theta}")
        if not self.radius > 0:
            raise ValueError(f"radius must be > 0, got {self.radius}")
        if self.interpolation not in (NEAREST, BILINEAR):
            raise ValueError(f"unknown interpolation {self.interpolation!r}")

    def radii(self) -> np.ndarray:
        return np.arange(self.n_r) * self.radius / self.n_r

    def angles(self) -> np.ndarray:
        return np.arange(self.n_theta) * (2.0 * math.pi) / self.n_theta


def demo_config_for_box(box: BoundingBox, n_theta: int = 360) -> PolarConfig:
    """Preset used for visual dumps: R = N_r = half the box diagonal."""
    half_diag = 0.5 * math.hypot(box.height - 1, box.width - 1)
    n_r = max(1, int(math.ceil(half_diag)))
    return PolarConfig(n_r=n_r, n_theta=n_theta, radius=max(half_diag, 1.0), interpolation=NEAREST)


@dataclass(frozen=True)
class PolarImage:
    """N_r x N_theta resampled field with per-angle valid length n(theta)."""

    values: np.ndarray
    valid_len: np.ndarray
    origin: tuple

    def __post_init__(self):
        n_r, n_theta = self.values.shape
        if self.valid_len.shape != (n_theta,):
            raise ValueError("valid_len must have one entry per angle")
        if np.any(self.valid_len < 1) or np.any(self.valid_len > n_r):
            raise ValueError("valid lengths must lie in [1, N_r]")

    def valid_mask(self) -> np.ndarray:
        """Boolean (N_r, N_theta) array marking samples within n(theta)."""
        n_r = self.values.shape[0]
        return np.arange(n_r)[:, None] < self.valid_len[None, :]


def _sample_coords(origin, cfg: PolarConfig):
    """Fractional (row, col) sample coordinates, shape (N_r, N_theta) each."""
    r = cfg.radii()
    theta = cfg.angles()
    u = r[:, None] * np.cos(theta)[None, :]  # column offsets
    v = r[:, None] * np.sin(theta)[None, :]  # row offsets
    return origin[0] + v, origin[1] + u


def _check_origin(origin, image_h: int, image_w: int):
    row, col = origin
    if not (0 <= row < image_h and 0 <= col < image_w):
        raise ValueError(f"origin {origin} outside {image_h}x{image_w} image")


def nearest_sample(values: np.ndarray, origin, cfg: PolarConfig) -> np.ndarray:
    """Nearest-pixel resampling; out-of-image samples read as 0."""
    rows, cols = _sample_coords(origin, cfg)
    ri = np.floor(rows + 0.5).astype(np.int64)
    ci = np.floor(cols + 0.5).astype(np.int64)
    h, w = values.shape
    inside = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w)
    out = np.zeros(ri.shape)
    out[inside] = values[ri[inside], ci[inside]]
    return out


def bilinear_table(origin, cfg: PolarConfig, image_h: int, image_w: int):
    """Per-sample interpolation stencil for differentiable resampling.

    Returns (idx, wgt) with shape (N_r*N_theta, 4): flat pixel indices and
    their bilinear weights.  Out-of-image corners get weight 0, which
    realises zero padding; the weighted sum of the indexed pixels is the
    bilinear sample and is linear in the image, so gradients flow back
    through the weights unchanged.
    """
    rows, cols = _sample_coords(origin, cfg)
    r0 = np.floor(rows)
    c0 = np.floor(cols)
    fr = rows - r0
    fc = cols - c0
    r0 = r0.astype(np.int64)
    c0 = c0.astype(np.int64)

    idx = np.zeros((rows.size, 4), dtype=np.int64)
    wgt = np.zeros((rows.size, 4))
    corners = (
        (r0, c0, (1.0 - fr) * (1.0 - fc)),
        (r0, c0 + 1, (1.0 - fr) * fc),
        (r0 + 1, c0, fr * (1.0 - fc)),
        (r0 + 1, c0 + 1, fr * fc),
    )
    for j, (rr, cc, ww) in enumerate(corners):
        ok = (rr >= 0) & (rr < image_h) & (cc >= 0) & (cc < image_w)
        flat = np.where(ok, rr * image_w + cc, 0)
        idx[:, j] = flat.ravel()
        wgt[:, j] = np.where(ok, ww, 0.0).ravel()
    return idx, wgt


def bilinear_sample(values: np.ndarray, origin, cfg: PolarConfig) -> np.ndarray:
    idx, wgt = bilinear_table(origin, cfg, values.shape[0], values.shape[1])
    flat = values.ravel()
    out = (flat[idx] * wgt).sum(axis=1)
    return out.reshape(cfg.n_r, cfg.n_theta)


def polar_transform(image: ImageGrid, origin, cfg: PolarConfig) -> PolarImage:
    """Resample ``image`` on the polar grid about ``origin`` (values only).

    Row k = 0 equals the origin pixel at every angle.  The returned
    valid_len is the full N_r; use :func:`polar_transform_region` to attach
    box-derived lengths.
    """
    _check_origin(origin, image.height, image.width)
    if cfg.interpolation == NEAREST:
        values = nearest_sample(image.values, origin, cfg)
    else:
        values = bilinear_sample(image.values, origin, cfg)
    return PolarImage(
        values=values,
        valid_len=np.full(cfg.n_theta, cfg.n_r, dtype=np.int64),
        origin=(int(origin[0]), int(origin[1])),
    )


def box_region_mask(box: BoundingBox, image_h: int, image_w: int) -> np.ndarray:
    """Binary mask of the box-region intersected with the image."""
    mask = np.zeros((image_h, image_w))
    clipped = box.clipped(image_h, image_w)
    mask[clipped.top : clipped.bottom + 1, clipped.left : clipped.right + 1] = 1.0
    return mask


def loi_valid_lengths(
    box: BoundingBox, origin, cfg: PolarConfig, image_h: int, image_w: int
) -> np.ndarray:
    """Per-angle count n(theta) of leading polar samples inside the box.

    The binary box region is resampled with nearest interpolation and each
    radial line keeps its leading run of samples >= 0.5.  The origin must be
    strictly inside the box, so n(theta) >= 1 always.
    """
    _check_origin(origin, image_h, image_w)
    if not box.strictly_contains(origin[0], origin[1]):
        raise ValueError(f"origin {origin} is not strictly inside box {box}")
    mask = box_region_mask(box, image_h, image_w)
    polar_mask = nearest_sample(mask, origin, cfg)
    inside = polar_mask >= 0.5
    return np.cumprod(inside, axis=0).sum(axis=0).astype(np.int64)


def polar_transform_region(
    image: ImageGrid, box: BoundingBox, origin, cfg: PolarConfig
) -> PolarImage:
    """Polar values plus LoI valid lengths for the box region around ``origin``.

    Samples beyond n(theta) are retained in ``values`` but flagged invalid
    via ``valid_len``.
    """
    transformed = polar_transform(image, origin, cfg)
    lengths = loi_valid_lengths(box, origin, cfg, image.height, image.width)
    return PolarImage(values=transformed.values, valid_len=lengths, origin=transformed.origin)
