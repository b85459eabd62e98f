"""Dense block-matching flow estimation with parabolic sub-pixel refinement."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataError
from .flow import FlowField, FrameSequence

DEFAULT_BLOCK = 8
DEFAULT_SEARCH = 7
FLAT_COST_TOL = 1e-9
EXACT_MATCH_TOL = 1e-12


def cost_volume(a: np.ndarray, b: np.ndarray, block: int, search: int) -> np.ndarray:
    """Mean absolute difference between the block around ``p`` in ``a`` and around ``p + d`` in ``b``.

    Shape (2r+1, 2r+1, H, W) indexed ``[dy + r, dx + r]``; ``inf`` wherever a
    block would leave either image.  A block around ``p`` covers rows and
    columns ``p - block//2 .. p - block//2 + block - 1``.
    """
    h, w = a.shape
    r = search
    n = 2 * r + 1
    lo = block // 2
    hi = block - lo
    bp = np.pad(np.asarray(b, dtype=float), r, constant_values=np.nan)
    shifted = sliding_window_view(bp, (n, n))  # [y, x, dy + r, dx + r] = b[y + dy, x + dx]
    diff = np.abs(np.asarray(a, dtype=float)[:, :, None, None] - shifted)
    outside = np.isnan(diff)
    sums = _box_sums(np.where(outside, 0.0, diff), block)
    misses = _box_sums(outside.astype(float), block)
    cost = np.full((h, w, n, n), np.inf)
    mean = sums / block ** 2
    # integral-image round-off can leave exact matches at +-1e-16; snap them so ties stay ties
    mean[mean <= EXACT_MATCH_TOL] = 0.0
    cost[lo:h - hi + 1, lo:w - hi + 1] = np.where(misses > 0.5, np.inf, mean)
    return cost.transpose(2, 3, 0, 1)


def _box_sums(x: np.ndarray, block: int) -> np.ndarray:
    """Sums over every full ``block`` x ``block`` window of the leading two axes."""
    ii = np.zeros((x.shape[0] + 1, x.shape[1] + 1) + x.shape[2:])
    ii[1:, 1:] = x.cumsum(0).cumsum(1)
    k = block
    return ii[k:, k:] - ii[:-k, k:] - ii[k:, :-k] + ii[:-k, :-k]


def _parabola_offset(cm, c0, cp):
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = cm - 2 * c0 + cp
        off = np.where(denom > 0, 0.5 * (cm - cp) / denom, 0.0)
    return np.clip(off, -0.5, 0.5)


def match_pair(a: np.ndarray, b: np.ndarray, block: int = DEFAULT_BLOCK,
               search: int = DEFAULT_SEARCH) -> FlowField:
    """Flow from grey image ``a`` to ``b``.

    Pixels are invalid when their block leaves the image, when the best
    displacement lacks a neighbour on either axis (search window clipped),
    or when the cost surface is flat (no texture).  A zero-cost match is
    taken as exact and not refined.
    """
    h, w = a.shape
    if h < block or w < block:
        raise DataError(f"frame {h}x{w} smaller than block {block}")
    r = search
    cost = cost_volume(a, b, block, search)
    n = 2 * r + 1
    flat = cost.reshape(n * n, h, w)
    # prefer small displacements on ties
    d_y, d_x = np.divmod(np.arange(n * n), n)
    order = np.lexsort((d_x, d_y, (d_y - r) ** 2 + (d_x - r) ** 2))
    best_o = np.argmin(flat[order], axis=0)
    best = order[best_o]
    by, bx = np.divmod(best, n)
    yy, xx = np.mgrid[0:h, 0:w]
    c0 = cost[by, bx, yy, xx]

    def nb(dy, dx):
        y = np.clip(by + dy, 0, n - 1)
        x = np.clip(bx + dx, 0, n - 1)
        inside = (by + dy >= 0) & (by + dy < n) & (bx + dx >= 0) & (bx + dx < n)
        return np.where(inside, cost[y, x, yy, xx], np.inf)

    cxm, cxp, cym, cyp = nb(0, -1), nb(0, 1), nb(-1, 0), nb(1, 0)
    finite = np.isfinite(c0) & np.isfinite(cxm) & np.isfinite(cxp) & np.isfinite(cym) & np.isfinite(cyp)
    fin = np.isfinite(flat)
    spread = np.where(fin, flat, -np.inf).max(axis=0) - np.where(fin, flat, np.inf).min(axis=0)
    textured = np.isfinite(spread) & (spread > FLAT_COST_TOL)
    exact = c0 <= EXACT_MATCH_TOL
    # an exact match needs no neighbours, so it stays valid at the edge of the search window
    valid = (finite | (exact & np.isfinite(c0))) & textured
    ox = np.where(exact | ~valid, 0.0, _parabola_offset(cxm, c0, cxp))
    oy = np.where(exact | ~valid, 0.0, _parabola_offset(cym, c0, cyp))
    grid = np.stack([bx - r + ox, by - r + oy], axis=-1).astype(float)
    grid[~valid] = 0.0
    return FlowField(grid, valid)


def estimate_flow_naive(frames: FrameSequence, block: int = DEFAULT_BLOCK,
                        search: int = DEFAULT_SEARCH) -> list:
    """Forward flows between consecutive frames (grey-level SAD block matching)."""
    if len(frames) < 2:
        raise DataError("need at least two frames")
    if block < 1 or search < 1:
        raise DataError("block and search must be positive")
    g = frames.gray()
    return [match_pair(g[i], g[i + 1], block, search) for i in range(len(g) - 1)]
