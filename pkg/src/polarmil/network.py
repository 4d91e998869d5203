"""Small residual encoder-decoder producing per-category probability maps.

A desk-scale stand-in for the usual residual U-Net: ``depth`` pooling levels
with channel doubling, residual double-conv blocks, skip connections merged
by a 1x1 reduction (which keeps the expensive full-resolution 3x3
convolutions at the base width), and a zero-initialised 1x1 head so an
untrained model outputs exactly 0.5 everywhere.  Weights serialise to a flat
binary file in declaration order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

WEIGHTS_MAGIC = b"PMIL"
WEIGHTS_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 1
    base_channels: int = 8
    depth: int = 2
    categories: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.categories < 1:
            raise ValueError(f"categories must be >= 1, got {self.categories}")
        if self.in_channels < 1 or self.base_channels < 1:
            raise ValueError("channel counts must be >= 1")


class SegmentationNet:
    """Residual encoder-decoder; ``forward`` maps (B, in, H, W) -> (B, C, H, W)."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.params: dict = {}
        rng = np.random.default_rng(cfg.seed)
        widths = [cfg.base_channels * (2**i) for i in range(cfg.depth + 1)]
        ch = cfg.in_channels
        for i, width in enumerate(widths[:-1]):
            self._add_block(f"enc{i}", ch, width, rng)
            ch = width
        self._add_block("mid", ch, widths[-1], rng)
        for i in reversed(range(cfg.depth)):
            # skip merge: 1x1 projections of the upsampled and skip paths,
            # summed -- the block-matrix form of conv1x1 over their concat
            merged = widths[i + 1] + widths[i]
            self.params[f"merge{i}.wu"] = Tensor(
                self._he(rng, (widths[i], widths[i + 1]), merged), requires_grad=True
            )
            self.params[f"merge{i}.ws"] = Tensor(
                self._he(rng, (widths[i], widths[i]), merged), requires_grad=True
            )
            self.params[f"merge{i}.b"] = Tensor(np.zeros(widths[i]), requires_grad=True)
            self._add_block(f"dec{i}", widths[i], widths[i], rng)
        # zero head: logits start at 0, probabilities at exactly 0.5
        self.params["head.w"] = Tensor(
            np.zeros((cfg.categories, cfg.base_channels)), requires_grad=True
        )
        self.params["head.b"] = Tensor(np.zeros(cfg.categories), requires_grad=True)

    def _he(self, rng, shape, fan_in):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)

    def _add_conv1x1(self, name, c_in, c_out, rng):
        self.params[f"{name}.w"] = Tensor(
            self._he(rng, (c_out, c_in), c_in), requires_grad=True
        )
        self.params[f"{name}.b"] = Tensor(np.zeros(c_out), requires_grad=True)

    def _add_block(self, name, c_in, c_out, rng):
        self.params[f"{name}.w1"] = Tensor(
            self._he(rng, (c_out, c_in, 3, 3), c_in * 9), requires_grad=True
        )
        self.params[f"{name}.b1"] = Tensor(np.zeros(c_out), requires_grad=True)
        self.params[f"{name}.w2"] = Tensor(
            self._he(rng, (c_out, c_out, 3, 3), c_out * 9), requires_grad=True
        )
        self.params[f"{name}.b2"] = Tensor(np.zeros(c_out), requires_grad=True)
        if c_in != c_out:
            self._add_conv1x1(f"{name}.skip", c_in, c_out, rng)

    def _block(self, name, x: Tensor) -> Tensor:
        p = self.params
        h = ad.relu(ad.conv3x3(x, p[f"{name}.w1"], p[f"{name}.b1"]))
        h = ad.conv3x3(h, p[f"{name}.w2"], p[f"{name}.b2"])
        if f"{name}.skip.w" in p:
            x = ad.conv1x1(x, p[f"{name}.skip.w"], p[f"{name}.skip.b"])
        return ad.relu(h + x)

    def forward(self, x) -> Tensor:
        x = ad.astensor(x)
        if x.values.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ValueError(
                f"expected (B, {self.cfg.in_channels}, H, W) input, got shape {x.shape}"
            )
        h, w = x.shape[2], x.shape[3]
        factor = 2**self.cfg.depth
        if h % factor or w % factor:
            raise ValueError(f"spatial dims {h}x{w} must be divisible by {factor}")
        p = self.params
        skips = []
        for i in range(self.cfg.depth):
            x = self._block(f"enc{i}", x)
            skips.append(x)
            x = ad.avgpool2(x)
        x = self._block("mid", x)
        for i in reversed(range(self.cfg.depth)):
            up = ad.conv1x1(ad.upsample2(x), p[f"merge{i}.wu"], p[f"merge{i}.b"])
            x = up + ad.conv1x1(skips[i], p[f"merge{i}.ws"])
            x = self._block(f"dec{i}", x)
        logits = ad.conv1x1(x, p["head.w"], p["head.b"])
        return ad.sigmoid(logits)

    def predict(self, images: np.ndarray) -> np.ndarray:
        """Forward pass without tape recording; returns plain arrays."""
        with ad.no_grad():
            return self.forward(Tensor(images)).values

    def parameters(self) -> list:
        return list(self.params.values())

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


def save_weights(net: SegmentationNet, path) -> None:
    """Flat binary dump: magic, version, parameter count, float64 LE values."""
    count = net.parameter_count()
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack("<IQ", WEIGHTS_VERSION, count))
        for p in net.parameters():
            f.write(p.values.astype("<f8").tobytes())


def load_weights(net: SegmentationNet, path) -> None:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != WEIGHTS_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, not a weights file")
        version, count = struct.unpack("<IQ", f.read(12))
        if version != WEIGHTS_VERSION:
            raise ValueError(f"{path}: unsupported weights version {version}")
        if count != net.parameter_count():
            raise ValueError(
                f"{path}: holds {count} parameters, model needs {net.parameter_count()}"
            )
        for p in net.parameters():
            raw = f.read(p.size * 8)
            if len(raw) != p.size * 8:
                raise ValueError(f"{path}: truncated weights payload")
            p.values[...] = np.frombuffer(raw, dtype="<f8").reshape(p.shape)
        if f.read(1):
            raise ValueError(f"{path}: trailing bytes after weights payload")
