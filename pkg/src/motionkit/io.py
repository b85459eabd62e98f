"""File formats: Middlebury ``.flo``, mask/frame PNGs and JSON helpers."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError
from .flow import FlowField

FLO_MAGIC = b"PIEH"  # float32 202021.25 little-endian


def write_flo(path, flow: FlowField, write_mask: bool = True) -> None:
    """Write ``flow`` as ``.flo``; the mask goes to a ``<stem>_mask.png`` sidecar."""
    path = Path(path)
    h, w = flow.shape
    with open(path, "wb") as f:
        f.write(FLO_MAGIC)
        f.write(np.array([w, h], dtype="<i4").tobytes())
        f.write(flow.grid.astype("<f4").tobytes())
    if write_mask:
        write_mask_png(mask_path_for(path), flow.valid_mask)


def read_flo(path, read_mask: bool = True) -> FlowField:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read flow file {path}: {exc}") from exc
    if raw[:4] != FLO_MAGIC:
        raise DataError(f"{path}: bad .flo magic {raw[:4]!r}")
    w, h = np.frombuffer(raw[4:12], dtype="<i4")
    data = np.frombuffer(raw[12:], dtype="<f4")
    if data.size != w * h * 2:
        raise DataError(f"{path}: expected {w * h * 2} floats, found {data.size}")
    grid = data.reshape(h, w, 2).astype(float)
    mask = None
    mp = mask_path_for(path)
    if read_mask and mp.exists():
        mask = read_mask_png(mp)
    return FlowField(grid, mask)


def mask_path_for(flo_path) -> Path:
    p = Path(flo_path)
    return p.with_name(p.stem + "_mask.png")


def write_mask_png(path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path)


def read_mask_png(path) -> np.ndarray:
    return np.asarray(Image.open(path)) > 127


def to_uint8(rgb: np.ndarray) -> np.ndarray:
    return np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_rgb_png(path, rgb: np.ndarray) -> None:
    """Save an (H, W, 3) float image in [0, 1] as 8-bit PNG."""
    Image.fromarray(to_uint8(rgb), mode="RGB").save(path)


def read_rgb_png(path) -> np.ndarray:
    try:
        img = Image.open(path).convert("RGB")
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return np.asarray(img, dtype=float) / 255.0


def write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise DataError(f"missing file: {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed JSON in {path}: {exc}") from exc
