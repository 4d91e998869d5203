"""Raster types, box arithmetic and bit-exact file I/O shared by every module.

Images, probability maps and masks are all dense 2-D scalar fields
(``ImageGrid``).  Boxes use inclusive integer pixel corners.  On-disk formats
are binary PGM (P5, maxval 255) plus an ASCII box sidecar, both chosen so
round trips are bit-exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ParseError(ValueError):
    """Malformed on-disk data; the message names the offending location."""


class ImageGrid:
    """Dense 2-D scalar field with explicit height/width.

    Values are dimensionless intensities in [0, 1] for images and
    probability maps, and {0, 1} for masks.  Instances are immutable after
    construction and safe to share across threads.
    """

    __slots__ = ("height", "width", "values")

    def __init__(self, values):
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"ImageGrid expects a 2-D array, got ndim={arr.ndim}")
        if arr.size == 0:
            raise ValueError("ImageGrid must be non-empty")
        if not np.all(np.isfinite(arr)):
            raise ValueError("ImageGrid values must be finite")
        arr = arr.copy()
        arr.setflags(write=False)
        self.height = int(arr.shape[0])
        self.width = int(arr.shape[1])
        self.values = arr

    @classmethod
    def zeros(cls, height: int, width: int) -> "ImageGrid":
        return cls(np.zeros((height, width)))

    @classmethod
    def full(cls, height: int, width: int, value: float) -> "ImageGrid":
        return cls(np.full((height, width), float(value)))

    def is_probability(self) -> bool:
        return bool(np.all(self.values >= 0.0) and np.all(self.values <= 1.0))

    def is_mask(self) -> bool:
        return bool(np.all((self.values == 0.0) | (self.values == 1.0)))

    def __eq__(self, other) -> bool:
        if not isinstance(other, ImageGrid):
            return NotImplemented
        return (
            self.height == other.height
            and self.width == other.width
            and bool(np.array_equal(self.values, other.values))
        )

    def __hash__(self):
        return hash((self.height, self.width, self.values.tobytes()))

    def __repr__(self) -> str:
        return f"ImageGrid({self.height}x{self.width})"


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box with inclusive integer corners and a category label."""

    top: int
    left: int
    bottom: int
    right: int
    category: int = 1

    def __post_init__(self):
        for name in ("top", "left", "bottom", "right", "category"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)):
                raise ValueError(f"BoundingBox.{name} must be an integer, got {v!r}")
            object.__setattr__(self, name, int(v))
        if self.top > self.bottom:
            raise ValueError(f"box has top {self.top} > bottom {self.bottom}")
        if self.left > self.right:
            raise ValueError(f"box has left {self.left} > right {self.right}")
        if self.category < 1:
            raise ValueError(f"box category must be >= 1, got {self.category}")

    @property
    def height(self) -> int:
        return self.bottom - self.top + 1

    @property
    def width(self) -> int:
        return self.right - self.left + 1

    @property
    def area(self) -> int:
        return self.height * self.width

    def contains(self, row: int, col: int) -> bool:
        return self.top <= row <= self.bottom and self.left <= col <= self.right

    def strictly_contains(self, row: int, col: int) -> bool:
        return self.top < row < self.bottom and self.left < col < self.right

    def clipped(self, image_h: int, image_w: int) -> "BoundingBox":
        """Clip the box to image bounds; raises if it lies fully outside."""
        top = max(0, min(self.top, image_h - 1))
        bottom = max(0, min(self.bottom, image_h - 1))
        left = max(0, min(self.left, image_w - 1))
        right = max(0, min(self.right, image_w - 1))
        if self.bottom < 0 or self.top > image_h - 1 or self.right < 0 or self.left > image_w - 1:
            raise ValueError(f"box {self} lies entirely outside a {image_h}x{image_w} image")
        return BoundingBox(top, left, bottom, right, self.category)

    def inside(self, image_h: int, image_w: int) -> bool:
        return 0 <= self.top and 0 <= self.left and self.bottom < image_h and self.right < image_w


@dataclass(frozen=True)
class AnnotatedImage:
    """An image together with its box annotations and optional ground truth.

    ``masks`` maps a category label to its ground-truth mask and exists only
    for evaluation; training never reads it.
    """

    image: ImageGrid
    boxes: tuple
    masks: dict = field(default_factory=dict)
    case_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))
        for b in self.boxes:
            if not b.inside(self.image.height, self.image.width):
                raise ValueError(f"box {b} exceeds {self.image.height}x{self.image.width} image")
        for cat, m in self.masks.items():
            if (m.height, m.width) != (self.image.height, self.image.width):
                raise ValueError(f"ground-truth mask for category {cat} has mismatched shape")


def loosen_box(box: BoundingBox, margin: int, image_h: int, image_w: int) -> BoundingBox:
    """Move every side of ``box`` outward by ``margin`` pixels, clipped to the image."""
    if margin < 0:
        raise ValueError(f"margin must be >= 0, got {margin}")
    return BoundingBox(
        top=max(0, box.top - margin),
        left=max(0, box.left - margin),
        bottom=min(image_h - 1, box.bottom + margin),
        right=min(image_w - 1, box.right + margin),
        category=box.category,
    )


# ---------------------------------------------------------------------------
# PGM I/O (binary P5, maxval 255)
# ---------------------------------------------------------------------------

def _next_token(data: bytes, pos: int):
    """Return (token, new_pos), skipping whitespace and '#' comments."""
    n = len(data)
    while pos < n:
        c = data[pos : pos + 1]
        if c == b"#":
            while pos < n and data[pos : pos + 1] != b"\n":
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    if pos >= n:
        raise ParseError(f"unexpected end of header at byte {pos}")
    start = pos
    while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
        pos += 1
    return data[start:pos], pos


def read_pgm(path) -> ImageGrid:
    """Read a binary 8-bit PGM file; intensities map to [0, 1] as v/255."""
    with open(path, "rb") as f:
        data = f.read()
    magic, pos = _next_token(data, 0)
    if magic != b"P5":
        raise ParseError(f"bad magic {magic!r} at byte 0 in {path} (want P5)")
    fields = []
    for name in ("width", "height", "maxval"):
        tok, newpos = _next_token(data, pos)
        try:
            fields.append(int(tok))
        except ValueError:
            raise ParseError(f"non-integer {name} {tok!r} at byte {pos} in {path}") from None
        pos = newpos
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise ParseError(f"non-positive dimensions {width}x{height} in header of {path}")
    if maxval != 255:
        raise ParseError(f"unsupported maxval {maxval} at byte {pos} in {path} (want 255)")
    # exactly one whitespace byte separates the header from the payload
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise ParseError(f"missing separator after header at byte {pos} in {path}")
    pos += 1
    expected = width * height
    payload = data[pos : pos + expected]
    if len(payload) < expected:
        raise ParseError(
            f"truncated payload at byte {pos + len(payload)} in {path}"
            f" (got {len(payload)} of {expected} bytes)"
        )
    raw = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    return ImageGrid(raw.astype(np.float64) / 255.0)


def write_pgm(grid: ImageGrid, path) -> None:
    """Write ``grid`` as binary PGM; values must lie in [0, 1]."""
    if not grid.is_probability():
        raise ValueError("write_pgm requires values in [0, 1]")
    raw = np.floor(grid.values * 255.0 + 0.5).astype(np.uint8)
    header = f"P5\n{grid.width} {grid.height}\n255\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header)
        f.write(raw.tobytes())


def quantize(grid: ImageGrid) -> ImageGrid:
    """Snap values to the 1/255 grid used by the PGM format."""
    return ImageGrid(np.floor(grid.values * 255.0 + 0.5) / 255.0)


# ---------------------------------------------------------------------------
# Box sidecar I/O (ASCII, one box per line: "category top left bottom right")
# ---------------------------------------------------------------------------

def read_boxes(path) -> list:
    """Read a box sidecar file; '#' lines are comments."""
    boxes = []
    with open(path, "r", encoding="ascii") as f:
        for lineno, line in enumerate(f, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            parts = stripped.split()
            if len(parts) != 5:
                raise ParseError(f"{path}:{lineno}: expected 5 fields, got {len(parts)}")
            try:
                cat, top, left, bottom, right = (int(p) for p in parts)
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-integer field in {stripped!r}") from None
            try:
                boxes.append(BoundingBox(top, left, bottom, right, cat))
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
    return boxes


def write_boxes(boxes, path) -> None:
    with open(path, "w", encoding="ascii") as f:
        for b in boxes:
            f.write(f"{b.category} {b.top} {b.left} {b.bottom} {b.right}\n")
