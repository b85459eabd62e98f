"""Flow magnitude normalisation and the HSV colour encoding of flow.

A flow vector ``f`` with magnitude ``r`` is rescaled to magnitude
``min(1, sqrt(r / s_f))`` where ``s_f`` is a dataset-level scale (the 99th
percentile magnitude by default).  The normalised vector's angle becomes the
hue (0 deg = +x = red, increasing counter-clockwise in (x, y) coordinates) and
its magnitude the value; saturation is always 1.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, DegenerateScaleError
from .flow import FlowField

MAG_TOL = 1e-9


@dataclass(frozen=True)
class CodecConfig:
    s_f: float
    percentile: float = 99.0

    def __post_init__(self):
        if not self.s_f > 0:
            raise DataError("scale factor must be positive")
        if not 0 < self.percentile <= 100:
            raise DataError("percentile must lie in (0, 100]")


def nearest_rank(values, percentile: float) -> float:
    """Nearest-rank percentile: the ceil(P/100 * N)-th smallest value."""
    values = np.sort(np.asarray(values, dtype=float).ravel())
    if values.size == 0:
        raise DataError("percentile of an empty collection")
    if not 0 < percentile <= 100:
        raise DataError("percentile must lie in (0, 100]")
    rank = int(np.ceil(percentile / 100.0 * values.size - 1e-9))
    return float(values[max(rank, 1) - 1])


def compute_scale_factor(flows, percentile: float = 99.0) -> float:
    """Nearest-rank percentile of flow magnitudes over all valid pixels."""
    flows = list(flows)
    if not flows:
        raise DataError("no flow fields given")
    mags = np.concatenate([f.magnitude[f.valid_mask] for f in flows])
    if mags.size == 0:
        raise DataError("no valid flow pixels")
    s_f = nearest_rank(mags, percentile)
    if s_f <= 0:
        raise DegenerateScaleError(f"{percentile}th percentile flow magnitude is zero")
    return s_f


def normalize_flow(f: FlowField, s_f: float) -> FlowField:
    if s_f <= 0:
        raise DataError("scale factor must be positive")
    r = f.magnitude
    scale = np.minimum(1.0, np.sqrt(r / s_f))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(r > 0, scale / r, 0.0)
    return FlowField(f.grid * ratio[..., None], f.valid_mask.copy())


def hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Sector formula; ``h`` in degrees [0, 360), ``s`` and ``v`` in [0, 1]."""
    h = np.mod(h, 360.0)
    c = v * s
    hp = h / 60.0
    x = c * (1 - np.abs(np.mod(hp, 2.0) - 1))
    zero = np.zeros_like(c)
    sector = np.minimum(np.floor(hp).astype(int), 5)
    r = np.choose(sector, [c, x, zero, zero, x, c])
    g = np.choose(sector, [x, c, c, x, zero, zero])
    b = np.choose(sector, [zero, zero, x, c, c, x])
    m = v - c
    return np.stack([r + m, g + m, b + m], axis=-1)


def rgb_to_hsv(rgb: np.ndarray):
    """Inverse of :func:`hsv_to_rgb`; hue in degrees, 0 for grey pixels."""
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    v = rgb.max(axis=-1)
    c = v - rgb.min(axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(v > 0, c / v, 0.0)
        hr = np.mod((g - b) / c, 6.0)
        hg = (b - r) / c + 2.0
        hb = (r - g) / c + 4.0
    h = np.where(v == r, hr, np.where(v == g, hg, hb))
    h = np.where(c > 0, 60.0 * h, 0.0)
    return np.mod(h, 360.0), s, v


def flow_to_rgb(f_norm: FlowField) -> np.ndarray:
    """(H, W, 3) RGB encoding of a normalised flow (magnitudes <= 1)."""
    m = f_norm.magnitude
    if np.any(m > 1 + MAG_TOL):
        raise DataError(f"normalised flow magnitude {m.max():.6g} exceeds 1")
    m = np.minimum(m, 1.0)
    alpha = np.arctan2(f_norm.grid[..., 1], f_norm.grid[..., 0])
    hue = np.mod(np.degrees(alpha), 360.0)
    return hsv_to_rgb(hue, np.ones_like(m), m)


def rgb_to_flow(rgb: np.ndarray, s_f: float) -> FlowField:
    """Decode an RGB flow image back to pixel displacements.

    The value channel is inverted through the square root of the
    normalisation, so ``V = 1`` decodes to magnitude ``s_f`` whatever the
    original (clipped) magnitude was.
    """
    rgb = np.asarray(rgb, dtype=float)
    if rgb.ndim != 3 or rgb.shape[-1] != 3:
        raise DataError(f"encoded flow must be (H, W, 3), got {rgb.shape}")
    h, _, v = rgb_to_hsv(np.clip(rgb, 0.0, 1.0))
    r = v ** 2 * s_f
    a = np.radians(h)
    return FlowField(np.stack([r * np.cos(a), r * np.sin(a)], axis=-1))


def encode_flow(f: FlowField, s_f: float) -> np.ndarray:
    return flow_to_rgb(normalize_flow(f, s_f))
