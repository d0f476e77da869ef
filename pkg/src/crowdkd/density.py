"""Ground-truth density maps from point annotations."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

DEFAULT_SIGMA = 4.0
TRUNCATE = 4.0


@dataclass
class Scene:
    """An image with annotated head points.

    Points are (x, y) in continuous pixel coordinates: pixel column j spans
    [j, j + 1), so a point inside a W-wide image has 0 <= x <= W.
    The image is either held in memory or decoded from ``image_path`` on
    first access.
    """

    id: str
    points: np.ndarray
    pixels: Optional[np.ndarray] = field(default=None, repr=False)
    image_path: Optional[Path] = None
    _shape: Optional[tuple] = field(default=None, repr=False)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        self.points = pts.reshape(-1, 2)
        if self.pixels is None and self.image_path is None:
            raise ValueError(f"scene {self.id!r} has neither image data nor an image path")

    @property
    def image(self) -> np.ndarray:
        if self.pixels is None:
            self.pixels = load_image(self.image_path)
        return self.pixels

    @property
    def shape(self) -> tuple:
        if self.pixels is not None:
            return self.pixels.shape[:2]
        if self._shape is None:
            from PIL import Image

            with Image.open(self.image_path) as im:
                self._shape = (im.height, im.width)
        return self._shape

    @property
    def count(self) -> int:
        return len(self.points)

    def check_bounds(self):
        h, w = self.shape
        pts = self.points
        if len(pts) and (pts.min() < 0 or np.any(pts[:, 0] > w) or np.any(pts[:, 1] > h)):
            raise ValueError(f"scene {self.id!r} has points outside the {h}x{w} image")


def load_image(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


@dataclass
class DensityMap:
    values: np.ndarray
    scale: int = 1

    def __post_init__(self):
        if self.scale < 1:
            raise ValueError("scale must be >= 1")

    @property
    def shape(self):
        return self.values.shape


def gaussian_kernel(x: float, y: float, sigma: float):
    """Unit-mass Gaussian stamp around (x, y), truncated at ``TRUNCATE * sigma``.

    Returns ``(kernel, row0, col0)``; the kernel is sampled at pixel centres
    (j + 0.5, i + 0.5) and renormalised so its full (unclipped) support sums to 1.
    """
    radius = TRUNCATE * sigma
    c0 = math.ceil(x - 0.5 - radius)
    c1 = math.floor(x - 0.5 + radius)
    r0 = math.ceil(y - 0.5 - radius)
    r1 = math.floor(y - 0.5 + radius)
    dx = np.arange(c0, c1 + 1) + 0.5 - x
    dy = np.arange(r0, r1 + 1) + 0.5 - y
    d2 = dy[:, None] ** 2 + dx[None, :] ** 2
    k = np.exp(-d2 / (2.0 * sigma * sigma))
    k[d2 > radius * radius] = 0.0
    k /= k.sum()
    return k, r0, c0


def rasterize_density(points, shape, sigma: float = DEFAULT_SIGMA, scale: int = 1) -> DensityMap:
    """Place one unit-mass truncated Gaussian per point, then block-sum by ``scale``.

    Mass falling outside the image is clipped (lost); interior points keep
    exactly unit mass.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    h, w = shape
    if scale < 1 or h % scale or w % scale:
        raise ValueError(f"scale {scale} must divide shape {shape}")
    out = np.zeros((h, w), dtype=np.float64)
    for x, y in np.asarray(points, dtype=np.float64).reshape(-1, 2):
        k, r0, c0 = gaussian_kernel(x, y, sigma)
        kh, kw = k.shape
        ra, rb = max(r0, 0), min(r0 + kh, h)
        ca, cb = max(c0, 0), min(c0 + kw, w)
        if ra >= rb or ca >= cb:
            continue
        out[ra:rb, ca:cb] += k[ra - r0:rb - r0, ca - c0:cb - c0]
    if scale > 1:
        out = block_sum(out, scale)
    return DensityMap(out, scale)


def block_sum(values: np.ndarray, scale: int) -> np.ndarray:
    h, w = values.shape
    return values.reshape(h // scale, scale, w // scale, scale).sum(axis=(1, 3))


def count(density) -> float:
    values = density.values if isinstance(density, DensityMap) else density
    return float(np.sum(values))
