"""Camera trajectories: fixed hemisphere cameras and NURBS paths."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .camera import CameraIntrinsics, CameraPose, look_at
from .errors import DataError

DEFAULT_N_FRAMES = 121
WORLD_UP = (0.0, 1.0, 0.0)


@dataclass
class Trajectory:
    """Ordered ``(frame index, pose)`` pairs sharing one set of intrinsics."""

    intrinsics: CameraIntrinsics
    frames: list = field(default_factory=list)

    def __post_init__(self):
        ns = [n for n, _ in self.frames]
        if any(b <= a for a, b in zip(ns, ns[1:])):
            raise DataError("trajectory frame indices must be strictly increasing")

    def __len__(self):
        return len(self.frames)

    @property
    def poses(self) -> list:
        return [p for _, p in self.frames]

    def pose(self, i: int) -> CameraPose:
        return self.frames[i][1]

    def to_dict(self) -> dict:
        return {
            "intrinsics": self.intrinsics.to_dict(),
            "frames": [{"n": int(n), **p.to_dict()} for n, p in self.frames],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Trajectory":
        intr = CameraIntrinsics.from_dict(d["intrinsics"])
        return cls(intr, [(int(f["n"]), CameraPose.from_dict(f)) for f in d["frames"]])

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "Trajectory":
        return cls.from_dict(json.loads(text))


def sample_hemisphere_pose(rng_seed: int, radius: float = 6.0, center=(0.0, 0.0, 0.0),
                           up=WORLD_UP) -> CameraPose:
    """Uniform random point on the upper hemisphere, looking at its centre."""
    if radius <= 0:
        raise DataError("radius must be positive")
    rng = np.random.default_rng(rng_seed)
    up = np.asarray(up, dtype=float)
    up = up / np.linalg.norm(up)
    d = rng.standard_normal(3)
    d /= np.linalg.norm(d)
    if d @ up < 0:
        d = d - 2 * (d @ up) * up
    center = np.asarray(center, dtype=float)
    return look_at(center + radius * d, center, up=up)


@dataclass
class NurbsSpec:
    control_points: np.ndarray
    weights: np.ndarray
    degree: int
    knots: np.ndarray

    def __post_init__(self):
        self.control_points = np.asarray(self.control_points, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        self.knots = np.asarray(self.knots, dtype=float)
        n, p = len(self.control_points), self.degree
        if p < 1:
            raise DataError("degree must be >= 1")
        if n < p + 1:
            raise DataError(f"degree {p} needs at least {p + 1} control points, got {n}")
        if self.weights.shape != (n,) or np.any(self.weights <= 0):
            raise DataError("need one positive weight per control point")
        if self.knots.shape != (n + p + 1,):
            raise DataError(f"knot vector must have {n + p + 1} entries")
        if np.any(np.diff(self.knots) < 0):
            raise DataError("knot vector must be non-decreasing")
        k = self.knots
        if np.any(k[: p + 1] != k[0]) or np.any(k[-p - 1:] != k[-1]) or k[-1] <= k[0]:
            raise DataError("knot vector must be clamped")

    @classmethod
    def clamped_uniform(cls, control_points, degree: int = 3, weights=None) -> "NurbsSpec":
        pts = np.asarray(control_points, dtype=float)
        n = len(pts)
        if n < degree + 1:
            raise DataError(f"degree {degree} needs at least {degree + 1} control points, got {n}")
        inner = np.linspace(0.0, 1.0, n - degree + 1)[1:-1]
        knots = np.concatenate([np.zeros(degree + 1), inner, np.ones(degree + 1)])
        w = np.ones(n) if weights is None else weights
        return cls(pts, w, degree, knots)

    def to_dict(self) -> dict:
        return {"control_points": self.control_points.tolist(), "weights": self.weights.tolist(),
                "degree": self.degree, "knots": self.knots.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NurbsSpec":
        return cls(d["control_points"], d["weights"], int(d["degree"]), d["knots"])


def _find_span(knots: np.ndarray, p: int, n: int, u: float) -> int:
    # u == last knot belongs to the last non-empty span
    if u >= knots[n]:
        return n - 1
    return int(np.searchsorted(knots, u, side="right") - 1)


def nurbs_eval(spec: NurbsSpec, u: float) -> np.ndarray:
    """Curve point at normalised parameter ``u`` in [0, 1] (de Boor on homogeneous points)."""
    if not (0.0 <= u <= 1.0):
        raise DataError(f"parameter {u} outside [0, 1]")
    k, p = spec.knots, spec.degree
    n = len(spec.control_points)
    x = k[p] + u * (k[n] - k[p])
    s = _find_span(k, p, n, x)
    hom = np.hstack([spec.control_points * spec.weights[:, None], spec.weights[:, None]])
    d = hom[s - p: s + 1].copy()
    for r in range(1, p + 1):
        for j in range(p, r - 1, -1):
            i = j + s - p
            denom = k[i + p - r + 1] - k[i]
            a = 0.0 if denom == 0 else (x - k[i]) / denom
            d[j] = (1.0 - a) * d[j - 1] + a * d[j]
    return d[p, :-1] / d[p, -1]


def nurbs_trajectory(keypoints, look_targets, n_frames: int = DEFAULT_N_FRAMES,
                     degree: int = 3, intrinsics: CameraIntrinsics | None = None,
                     weights=None, up=WORLD_UP) -> Trajectory:
    """Camera path through NURBS-interpolated key positions.

    Positions use the key positions as control points of a clamped uniform
    curve sampled at ``n_frames`` evenly spaced parameters.  Look targets are
    linearly interpolated over the same parameter.
    """
    keypoints = np.asarray(keypoints, dtype=float)
    targets = np.atleast_2d(np.asarray(look_targets, dtype=float))
    if n_frames < 2:
        raise DataError("n_frames must be >= 2")
    if len(keypoints) < degree + 1:
        raise DataError(f"degree {degree} needs at least {degree + 1} keypoints, got {len(keypoints)}")
    if len(targets) < 1:
        raise DataError("need at least one look target")
    if intrinsics is None:
        intrinsics = CameraIntrinsics.from_fov(32, 32, 60.0)
    spec = NurbsSpec.clamped_uniform(keypoints, degree, weights)
    us = np.linspace(0.0, 1.0, n_frames)
    tu = np.linspace(0.0, 1.0, len(targets))
    frames = []
    for i, u in enumerate(us):
        pos = nurbs_eval(spec, float(u))
        if len(targets) == 1:
            tgt = targets[0]
        else:
            tgt = np.array([np.interp(u, tu, targets[:, c]) for c in range(3)])
        frames.append((i, look_at(pos, tgt, up=up)))
    return Trajectory(intrinsics, frames)


def static_trajectory(pose: CameraPose, n_frames: int, intrinsics: CameraIntrinsics) -> Trajectory:
    return Trajectory(intrinsics, [(i, pose) for i in range(n_frames)])
