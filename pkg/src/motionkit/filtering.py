"""Forward-backward cycle consistency scoring and percentile filtering of clips."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .codec import nearest_rank
from .errors import DataError, UnscorableClipError
from .flow import FlowField, bilinear_support_valid, sample_bilinear
from .manifest import DatasetManifest

DEFAULT_FILTER_PERCENTILE = 90.0
# Reference figures reported for real-video flow: the 90th-percentile cycle
# error and the largest error observed.  Documentation only.
REFERENCE_THRESHOLD_PX = 1.19
REFERENCE_MAX_ERROR_PX = 1080.05
REPORT_PERCENTILES = (50, 90, 99, 100)


def cycle_error_map(fwd: FlowField, bwd: FlowField):
    """Per-pixel ``|fwd(p) + bwd(p + fwd(p))|``.

    ``bwd`` is sampled bilinearly.  Returns ``(errors, mask)``; the mask is
    true where ``fwd`` is valid and the warped position is inside the image
    with all four bilinear taps valid in ``bwd``.  Errors are 0 elsewhere.
    """
    if fwd.shape != bwd.shape:
        raise DataError(f"flow shapes differ: {fwd.shape} vs {bwd.shape}")
    h, w = fwd.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    x = xx + fwd.grid[..., 0]
    y = yy + fwd.grid[..., 1]
    mask = fwd.valid_mask & bilinear_support_valid(bwd.valid_mask, x, y)
    back = sample_bilinear(bwd.grid, x, y)
    err = np.linalg.norm(fwd.grid + back, axis=-1)
    return np.where(mask, err, 0.0), mask


def clip_score(error_map: np.ndarray, mask: np.ndarray) -> float:
    """Mean error over valid pixels."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise UnscorableClipError("no valid pixel to score")
    return float(np.asarray(error_map)[mask].mean())


def score_flow_pairs(pairs) -> tuple:
    """Pool errors over all (forward, backward) pairs of one clip.

    Returns ``(mean error, pixel count)``.
    """
    errs = []
    for fwd, bwd in pairs:
        e, m = cycle_error_map(fwd, bwd)
        errs.append(e[m])
    pooled = np.concatenate(errs) if errs else np.empty(0)
    if pooled.size == 0:
        raise UnscorableClipError("no valid pixel to score")
    return float(pooled.mean()), int(pooled.size)


@dataclass
class ConsistencyReport:
    per_clip: list = field(default_factory=list)  # (clip_id, error px, pixel count)

    def stats(self) -> dict:
        errs = [e for _, e, _ in self.per_clip]
        if not errs:
            return {}
        out = {"min": float(min(errs)), "max": float(max(errs)), "count": len(errs)}
        for p in REPORT_PERCENTILES:
            out[f"p{p}"] = nearest_rank(errs, p)
        return out

    def to_dict(self) -> dict:
        return {
            "per_clip": [{"clip_id": c, "error_px": e, "pixels": n} for c, e, n in self.per_clip],
            "distribution": self.stats(),
        }


def filter_dataset(manifest: DatasetManifest, percentile: float = DEFAULT_FILTER_PERCENTILE,
                   sources=None):
    """Mark clips whose cycle error exceeds the nearest-rank percentile threshold.

    The threshold is taken over every scored entry of the selected sources,
    whether or not it is currently kept, which makes filtering idempotent.
    Entries of other sources are left untouched; selected entries without a
    score are dropped.  Returns ``(new manifest, threshold)``.
    """
    if not 0 < percentile <= 100:
        raise DataError("percentile must lie in (0, 100]")
    out = copy.deepcopy(manifest)
    selected = [e for e in out.entries if sources is None or e.source in sources]
    scores = [e.error for e in selected if e.error is not None]
    if not scores:
        raise DataError("no scored clips to filter")
    threshold = nearest_rank(scores, percentile)
    for e in selected:
        e.kept = e.error is not None and e.error <= threshold
    return out, threshold
