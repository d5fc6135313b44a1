"""Binary-mask primitives shared by the renderer, the data pipeline and evaluation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class InvalidBBoxError(ValueError):
    pass


@dataclass(frozen=True)
class BBox:
    """Half-open pixel rectangle ``[x0, x1) x [y0, y1)``."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        for v in (self.x0, self.y0, self.x1, self.y1):
            if int(v) != v:
                raise InvalidBBoxError(f"non-integer bbox coordinate {v!r}")
        if self.x1 <= self.x0 or self.y1 <= self.y0:
            raise InvalidBBoxError(f"zero-area bbox {self.as_tuple()}")

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return self.width * self.height

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x0, self.y0, self.x1, self.y1)

    def inside(self, width: int, height: int) -> bool:
        return self.x0 >= 0 and self.y0 >= 0 and self.x1 <= width and self.y1 <= height

    def to_mask(self, height: int, width: int) -> np.ndarray:
        m = np.zeros((height, width), dtype=bool)
        m[self.y0:self.y1, self.x0:self.x1] = True
        return m

    @classmethod
    def coerce(cls, value) -> "BBox":
        if isinstance(value, BBox):
            return value
        return cls(*(int(v) for v in value))

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> "BBox":
        """Tight bounding box of the set pixels; raises on an empty mask."""
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        if rows.size == 0:
            raise InvalidBBoxError("empty mask has no bounding box")
        return cls(int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)


def box_iou(a: BBox, b: BBox) -> float:
    ix = max(0, min(a.x1, b.x1) - max(a.x0, b.x0))
    iy = max(0, min(a.y1, b.y1) - max(a.y0, b.y0))
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def kernel_offsets(size: int) -> tuple[int, int]:
    # Even kernels put the extra cell on the negative side: 40 -> -20..+19.
    lo = -(size // 2)
    return lo, lo + size - 1


def dilate(mask: np.ndarray, size: int = 40) -> np.ndarray:
    """Dilate a binary mask by a ``size x size`` all-ones square.

    A set pixel ``p`` produces ones at ``p + (dy, dx)`` for every offset in
    ``kernel_offsets(size)`` on both axes; output is cropped to the canvas.
    """
    mask = np.asarray(mask, dtype=bool)
    if size < 1:
        raise ValueError("kernel size must be positive")
    lo, hi = kernel_offsets(size)
    h, w = mask.shape
    # out[y, x] = any(mask[y - hi : y - lo + 1, x - hi : x - lo + 1]), via an integral image.
    sat = np.zeros((h + 1, w + 1), dtype=np.int64)
    sat[1:, 1:] = mask.astype(np.int64).cumsum(0).cumsum(1)
    ys = np.arange(h)
    xs = np.arange(w)
    r0 = np.clip(ys - hi, 0, h)
    r1 = np.clip(ys - lo + 1, 0, h)
    c0 = np.clip(xs - hi, 0, w)
    c1 = np.clip(xs - lo + 1, 0, w)
    count = (sat[r1][:, c1] - sat[r0][:, c1] - sat[r1][:, c0] + sat[r0][:, c0])
    return count > 0


def union(*masks: np.ndarray) -> np.ndarray:
    shapes = {np.shape(m) for m in masks}
    if len(shapes) != 1:
        raise ValueError(f"mask dimension mismatch: {sorted(shapes)}")
    out = np.zeros(next(iter(shapes)), dtype=bool)
    for m in masks:
        out |= np.asarray(m, dtype=bool)
    return out
