"""Pinhole cameras, Plücker ray maps and rotation distances.

Conventions used throughout the package:

* right-handed world, camera looks down its local +z axis, image x to the
  right and image y downwards (OpenCV style);
* ``CameraPose.rotation`` is camera-to-world, ``CameraPose.position`` is the
  camera centre in world units;
* rays pass through integer pixel coordinates (no half-pixel offset).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

ORTHO_TOL = 1e-6


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        vals = (self.fx, self.fy, self.cx, self.cy)
        if not all(np.isfinite(vals)):
            raise DataError("intrinsics must be finite")
        if self.fx <= 0 or self.fy <= 0:
            raise DataError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise DataError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise DataError("principal point must lie inside the image")

    @classmethod
    def from_fov(cls, width: int, height: int, fov_x_deg: float) -> "CameraIntrinsics":
        """Square pixels, principal point at the image centre."""
        f = 0.5 * width / np.tan(np.radians(fov_x_deg) / 2)
        return cls(f, f, width / 2, height / 2, width, height)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


def _check_rotation(R: np.ndarray, tol: float = ORTHO_TOL) -> None:
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise DataError("rotation must be a finite 3x3 matrix")
    if np.abs(R.T @ R - np.eye(3)).max() > tol:
        raise DataError("rotation is not orthonormal")
    if abs(np.linalg.det(R) - 1.0) > tol:
        raise DataError("rotation has determinant != +1")


@dataclass(frozen=True, eq=False)
class CameraPose:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        p = np.array(self.position, dtype=float).reshape(3)
        _check_rotation(R)
        if not np.all(np.isfinite(p)):
            raise DataError("position must be finite")
        R.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "position", p)

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        """Map (..., 3) world points into the camera frame."""
        return (np.asarray(points, dtype=float) - self.position) @ self.rotation

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.position

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.reshape(-1).tolist(), "position": self.position.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraPose":
        return cls(np.asarray(d["rotation"], dtype=float).reshape(3, 3),
                   np.asarray(d["position"], dtype=float))


def look_at(position, target, up=(0.0, 1.0, 0.0)) -> CameraPose:
    """Pose at ``position`` whose optical axis points at ``target``.

    Image "up" (camera -y) is aligned with ``up`` as far as possible.  When the
    viewing direction is parallel to ``up`` another world axis is used.
    """
    position = np.asarray(position, dtype=float)
    forward = np.asarray(target, dtype=float) - position
    norm = np.linalg.norm(forward)
    if norm == 0 or not np.isfinite(norm):
        raise DataError("look-at target coincides with the camera position")
    z = forward / norm
    up = np.asarray(up, dtype=float)
    up = up / np.linalg.norm(up)
    x = np.cross(-up, z)
    if np.linalg.norm(x) < 1e-9:
        for alt in np.eye(3):
            x = np.cross(-alt, z)
            if np.linalg.norm(x) > 1e-6:
                break
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return CameraPose(np.stack([x, y, z], axis=1), position)


def project(point, intr: CameraIntrinsics, pose: CameraPose):
    """Project one world point; returns ``None`` when it is not in front of the camera."""
    point = np.asarray(point, dtype=float)
    if point.shape != (3,) or not np.all(np.isfinite(point)):
        raise DataError("point must be a finite 3-vector")
    x, y, z = pose.world_to_camera(point)
    if z <= 0:
        return None
    return np.array([intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy])


def project_points(points: np.ndarray, intr: CameraIntrinsics, pose: CameraPose):
    """Vectorised projection of (..., 3) points.

    Returns ``(pixels, depth)``; pixels behind the camera are NaN.
    """
    cam = pose.world_to_camera(points)
    z = cam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * cam[..., 0] / z + intr.cx
        v = intr.fy * cam[..., 1] / z + intr.cy
    pix = np.stack([u, v], axis=-1)
    pix[z <= 0] = np.nan
    return pix, z


def unproject(pixel, depth: float, intr: CameraIntrinsics, pose: CameraPose) -> np.ndarray:
    """World point at camera-frame depth ``depth`` along the ray through ``pixel``."""
    pixel = np.asarray(pixel, dtype=float)
    if not np.isfinite(depth) or depth <= 0:
        raise DataError(f"depth must be positive, got {depth}")
    if pixel.shape != (2,) or not np.all(np.isfinite(pixel)):
        raise DataError("pixel must be a finite 2-vector")
    ray = np.array([(pixel[0] - intr.cx) / intr.fx, (pixel[1] - intr.cy) / intr.fy, 1.0])
    return pose.camera_to_world(depth * ray)


def pixel_rays(intr: CameraIntrinsics, pose: CameraPose, pixels=None) -> np.ndarray:
    """World-space ray directions with unit camera-frame depth.

    ``pixels`` defaults to the full integer grid, giving an (H, W, 3) array; a
    point at parameter ``t`` along such a ray has depth ``t``.
    """
    if pixels is None:
        v, u = np.mgrid[0:intr.height, 0:intr.width].astype(float)
    else:
        pixels = np.asarray(pixels, dtype=float)
        u, v = pixels[..., 0], pixels[..., 1]
    cam = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], axis=-1)
    return cam @ pose.rotation.T


def plucker_embedding(intr: CameraIntrinsics, pose: CameraPose) -> np.ndarray:
    """(H, W, 6) map of per-pixel ``(position x d, d)`` with unit world direction ``d``."""
    d = pixel_rays(intr, pose)
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    moment = np.cross(np.broadcast_to(pose.position, d.shape), d)
    return np.concatenate([moment, d], axis=-1)


def rotation_geodesic(R1, R2) -> float:
    """Angle in radians of the relative rotation ``R1^T R2``.

    Equal to ``arccos((trace(R1^T R2) - 1) / 2)`` but evaluated through
    ``atan2`` so that it stays accurate near 0 and pi.
    """
    R1 = np.asarray(R1, dtype=float)
    R2 = np.asarray(R2, dtype=float)
    _check_rotation(R1)
    _check_rotation(R2)
    # ||R1 - R2||_F = 2*sqrt(2)*sin(theta/2), (trace + 1)/4 = cos(theta/2)^2
    half_sin = np.linalg.norm(R1 - R2) / (2.0 * np.sqrt(2.0))
    half_cos_sq = (np.sum(R1 * R2) + 1.0) / 4.0
    return float(2.0 * np.arctan2(half_sin, np.sqrt(max(half_cos_sq, 0.0))))


def axis_angle(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix."""
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)
