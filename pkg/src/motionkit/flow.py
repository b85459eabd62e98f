"""Dense flow fields, frame stacks and bilinear sampling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError


@dataclass
class FlowField:
    """(H, W, 2) pixel displacements plus a validity mask.

    Displacements at invalid pixels are stored as zero.
    """

    grid: np.ndarray
    valid_mask: np.ndarray | None = None

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        if self.grid.ndim != 3 or self.grid.shape[-1] != 2:
            raise DataError(f"flow grid must be (H, W, 2), got {self.grid.shape}")
        if self.valid_mask is None:
            self.valid_mask = np.all(np.isfinite(self.grid), axis=-1)
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
        if self.valid_mask.shape != self.grid.shape[:2]:
            raise DataError("mask shape does not match flow grid")
        if not np.all(np.isfinite(self.grid[self.valid_mask])):
            raise DataError("non-finite flow at a valid pixel")
        self.grid = np.where(self.valid_mask[..., None], self.grid, 0.0)

    @property
    def shape(self):
        return self.grid.shape[:2]

    @property
    def magnitude(self) -> np.ndarray:
        return np.hypot(self.grid[..., 0], self.grid[..., 1])

    @classmethod
    def constant(cls, h: int, w: int, u: float, v: float) -> "FlowField":
        g = np.empty((h, w, 2))
        g[..., 0], g[..., 1] = u, v
        return cls(g)

    @classmethod
    def zeros(cls, h: int, w: int) -> "FlowField":
        return cls(np.zeros((h, w, 2)))


@dataclass
class FrameSequence:
    """N x H x W x 3 RGB frames with values in [0, 1]."""

    frames: np.ndarray

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=float)
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise DataError(f"frames must be (N, H, W, 3), got {self.frames.shape}")
        if self.frames.size and (self.frames.min() < 0 or self.frames.max() > 1):
            raise DataError("frame values must lie in [0, 1]")

    def __len__(self):
        return len(self.frames)

    def gray(self) -> np.ndarray:
        return self.frames.mean(axis=-1)


def sample_bilinear(grid: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Bilinear lookup of ``grid`` (H, W[, C]) at float coordinates, clamping at the border."""
    h, w = grid.shape[:2]
    x = np.clip(np.asarray(x, dtype=float), 0, w - 1)
    y = np.clip(np.asarray(y, dtype=float), 0, h - 1)
    x0 = np.minimum(np.floor(x).astype(int), w - 2) if w > 1 else np.zeros_like(x, dtype=int)
    y0 = np.minimum(np.floor(y).astype(int), h - 2) if h > 1 else np.zeros_like(y, dtype=int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax = x - x0
    ay = y - y0
    if grid.ndim == 3:
        ax = ax[..., None]
        ay = ay[..., None]
    top = grid[y0, x0] * (1 - ax) + grid[y0, x1] * ax
    bot = grid[y1, x0] * (1 - ax) + grid[y1, x1] * ax
    return top * (1 - ay) + bot * ay


def bilinear_support_valid(mask: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """True where (x, y) is inside the image and all four bilinear taps are valid."""
    h, w = mask.shape
    inside = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xs = np.clip(np.nan_to_num(x), 0, w - 1)
    ys = np.clip(np.nan_to_num(y), 0, h - 1)
    x0 = np.minimum(np.floor(xs).astype(int), max(w - 2, 0))
    y0 = np.minimum(np.floor(ys).astype(int), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    return inside & mask[y0, x0] & mask[y0, x1] & mask[y1, x0] & mask[y1, x1]


def warp_backward(image: np.ndarray, flow: FlowField) -> np.ndarray:
    """Sample ``image`` at ``p + flow(p)`` for every pixel ``p``."""
    h, w = flow.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    return sample_bilinear(image, xx + flow.grid[..., 0], yy + flow.grid[..., 1])
