"""Parametric scenes: textured planes and spheres with rigid per-frame motion."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

T_MIN = 1e-9


@dataclass
class Texture:
    """Procedural solid texture evaluated on surface coordinates.

    ``checker`` alternates two colours on cells of side ``period / 2``;
    ``sine`` is the smooth analogue, a product of sinusoids of period
    ``period``; ``plaid`` sums one sinusoid per axis; ``noise`` sums a few
    seeded random plane waves; ``flat`` is uniform ``color_a``.
    """

    kind: str = "checker"
    period: float = 1.0
    color_a: tuple = (0.9, 0.9, 0.9)
    color_b: tuple = (0.1, 0.1, 0.1)
    offset: tuple = (0.0, 0.0, 0.0)
    seed: int = 0
    n_waves: int = 6

    def __post_init__(self):
        if self.kind not in ("checker", "sine", "plaid", "noise", "flat"):
            raise DataError(f"unknown texture kind {self.kind!r}")
        if self.period <= 0:
            raise DataError("texture period must be positive")

    def weight(self, coords: np.ndarray) -> np.ndarray:
        """Blend weight in [0, 1] between ``color_b`` (0) and ``color_a`` (1)."""
        c = coords + np.asarray(self.offset, dtype=float)[: coords.shape[-1]]
        if self.kind == "flat":
            return np.ones(c.shape[:-1])
        if self.kind == "checker":
            cells = np.floor(c / (self.period / 2)).astype(np.int64).sum(axis=-1)
            return (cells % 2 == 0).astype(float)
        if self.kind == "sine":
            return 0.5 + 0.5 * np.prod(np.sin(2 * np.pi * c / self.period), axis=-1)
        if self.kind == "plaid":
            return 0.5 + 0.5 * np.mean(np.sin(2 * np.pi * c / self.period), axis=-1)
        rng = np.random.default_rng(self.seed)
        dim = c.shape[-1]
        acc = np.zeros(c.shape[:-1])
        total = 0.0
        for _ in range(self.n_waves):
            k = rng.standard_normal(dim)
            k *= 2 * np.pi / (self.period * np.linalg.norm(k)) * rng.uniform(0.5, 1.5)
            amp = rng.uniform(0.5, 1.0)
            acc += amp * np.sin(c @ k + rng.uniform(0, 2 * np.pi))
            total += amp
        return 0.5 + 0.5 * acc / total

    def color(self, coords: np.ndarray) -> np.ndarray:
        w = self.weight(coords)[..., None]
        return w * np.asarray(self.color_a, dtype=float) + (1 - w) * np.asarray(self.color_b, dtype=float)


@dataclass
class Plane:
    """Plane through ``point`` with unit ``normal``; infinite unless ``half_extent`` is set.

    Surface coordinates are measured along ``u_axis`` and ``normal x u_axis``.
    """

    point: tuple = (0.0, 0.0, 5.0)
    normal: tuple = (0.0, 0.0, -1.0)
    u_axis: tuple = (1.0, 0.0, 0.0)
    half_extent: tuple | None = None

    def __post_init__(self):
        self.point = np.asarray(self.point, dtype=float)
        n = np.asarray(self.normal, dtype=float)
        self.normal = n / np.linalg.norm(n)
        a = np.asarray(self.u_axis, dtype=float)
        a = a - (a @ self.normal) * self.normal
        if np.linalg.norm(a) < 1e-12:
            raise DataError("plane u_axis is parallel to its normal")
        self.u_axis = a / np.linalg.norm(a)
        self.v_axis = np.cross(self.normal, self.u_axis)

    def intersect(self, o: np.ndarray, d: np.ndarray):
        denom = d @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.point - o) @ self.normal) / denom
        t = np.where((np.abs(denom) > 1e-15) & (t > T_MIN), t, np.inf)
        if self.half_extent is not None:
            rel = o + np.where(np.isfinite(t), t, 0.0)[..., None] * d - self.point
            inside = (np.abs(rel @ self.u_axis) <= self.half_extent[0]) & \
                     (np.abs(rel @ self.v_axis) <= self.half_extent[1])
            t = np.where(inside, t, np.inf)
        return t

    def surface_coords(self, x: np.ndarray) -> np.ndarray:
        rel = x - self.point
        return np.stack([rel @ self.u_axis, rel @ self.v_axis], axis=-1)


@dataclass
class Sphere:
    center: tuple = (0.0, 0.0, 3.0)
    radius: float = 1.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        if self.radius <= 0:
            raise DataError("sphere radius must be positive")

    def intersect(self, o: np.ndarray, d: np.ndarray):
        oc = o - self.center
        a = np.einsum("...i,...i->...", d, d)
        b = 2.0 * np.einsum("...i,...i->...", d, oc)
        c = np.einsum("...i,...i->...", oc, oc) - self.radius ** 2
        disc = b * b - 4 * a * c
        sq = np.sqrt(np.maximum(disc, 0.0))
        # stable quadratic roots
        q = -0.5 * (b + np.where(b >= 0, sq, -sq))
        with np.errstate(divide="ignore", invalid="ignore"):
            r1 = q / a
            r2 = c / q
        lo = np.minimum(r1, r2)
        hi = np.maximum(r1, r2)
        t = np.where(lo > T_MIN, lo, np.where(hi > T_MIN, hi, np.inf))
        return np.where(disc >= 0, t, np.inf)

    def surface_coords(self, x: np.ndarray) -> np.ndarray:
        return x - self.center


def rigid(rotation=None, translation=None) -> np.ndarray:
    """4x4 homogeneous transform."""
    M = np.eye(4)
    if rotation is not None:
        M[:3, :3] = rotation
    if translation is not None:
        M[:3, 3] = translation
    return M


@dataclass
class SceneObject:
    """A shape in its rest frame plus optional per-frame object-to-world transforms."""

    shape: Plane | Sphere
    texture: Texture = field(default_factory=Texture)
    motion: list | None = None

    def __post_init__(self):
        if self.motion is not None:
            mats = [np.asarray(m, dtype=float) for m in self.motion]
            for m in mats:
                R = m[:3, :3]
                if m.shape != (4, 4) or np.abs(R.T @ R - np.eye(3)).max() > 1e-6 \
                        or abs(np.linalg.det(R) - 1) > 1e-6:
                    raise DataError("object motion must be rigid 4x4 transforms")
            self.motion = mats

    def transform(self, frame: int) -> np.ndarray:
        if self.motion is None:
            return np.eye(4)
        if not 0 <= frame < len(self.motion):
            raise DataError(f"object has no transform for frame {frame}")
        return self.motion[frame]


@dataclass
class SceneSpec:
    objects: list
    background: SceneObject | None = None
    background_color: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if len(self.objects) < 1:
            raise DataError("scene needs at least one object")

    @property
    def all_objects(self) -> list:
        return list(self.objects) + ([self.background] if self.background is not None else [])

    @property
    def is_static(self) -> bool:
        return all(o.motion is None for o in self.all_objects)
