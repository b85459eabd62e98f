"""Closed-form ray casting of parametric scenes: depth, optical flow and RGB frames."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import CameraIntrinsics, CameraPose, pixel_rays, project_points
from .errors import DataError
from .flow import FlowField, FrameSequence
from .scene import SceneSpec
from .trajectory import Trajectory

OCCLUSION_TOL = 1e-6


@dataclass
class DepthMap:
    depth: np.ndarray
    hit_mask: np.ndarray
    object_id: np.ndarray  # index into scene.all_objects, -1 where nothing was hit


def cast_rays(scene: SceneSpec, frame: int, origin: np.ndarray, dirs: np.ndarray):
    """Nearest hit along ``origin + t * dirs``.

    Returns ``(t, object_id, rest_points)`` where ``rest_points`` are the hit
    locations in each object's rest frame (NaN where nothing was hit).
    """
    origin = np.broadcast_to(np.asarray(origin, dtype=float), dirs.shape)
    best_t = np.full(dirs.shape[:-1], np.inf)
    best_id = np.full(dirs.shape[:-1], -1, dtype=int)
    rest = np.full(dirs.shape, np.nan)
    for k, obj in enumerate(scene.all_objects):
        M = obj.transform(frame)
        R, tr = M[:3, :3], M[:3, 3]
        o_rest = (origin - tr) @ R
        d_rest = dirs @ R
        t = obj.shape.intersect(o_rest, d_rest)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_id = np.where(closer, k, best_id)
        hit_pts = o_rest + np.where(np.isfinite(t), t, 0.0)[..., None] * d_rest
        rest = np.where(closer[..., None], hit_pts, rest)
    return best_t, best_id, rest


def render_depth(scene: SceneSpec, pose: CameraPose, intr: CameraIntrinsics, frame: int = 0) -> DepthMap:
    """Camera-frame depth of the nearest surface behind every pixel."""
    dirs = pixel_rays(intr, pose)
    t, ids, _ = cast_rays(scene, frame, pose.position, dirs)
    hit = np.isfinite(t)
    return DepthMap(np.where(hit, t, 0.0), hit, ids)


def _frame_number(traj: Trajectory, i: int) -> int:
    if not 0 <= i < len(traj):
        raise DataError(f"trajectory has no frame at position {i}")
    return traj.frames[i][0]


def _flow_between(scene: SceneSpec, traj: Trajectory, src: int, dst: int, pixels=None):
    intr = traj.intrinsics
    n_src, n_dst = _frame_number(traj, src), _frame_number(traj, dst)
    pose_s, pose_d = traj.pose(src), traj.pose(dst)
    if pixels is None:
        v, u = np.mgrid[0:intr.height, 0:intr.width].astype(float)
        pixels = np.stack([u, v], axis=-1)
    dirs = pixel_rays(intr, pose_s, pixels)
    t, ids, _ = cast_rays(scene, n_src, pose_s.position, dirs)
    hit = np.isfinite(t)
    X = pose_s.position + np.where(hit, t, 0.0)[..., None] * dirs

    moved = X.copy()
    for k, obj in enumerate(scene.all_objects):
        if obj.motion is None:
            continue
        T_s, T_d = obj.transform(n_src), obj.transform(n_dst)
        if np.array_equal(T_s, T_d):
            continue
        sel = ids == k
        step = T_d @ np.linalg.inv(T_s)
        moved[sel] = X[sel] @ step[:3, :3].T + step[:3, 3]

    pix, z = project_points(moved, intr, pose_d)
    valid = hit & (z > 0)

    # the moved point must be the first surface along its target-frame ray
    to_pt = moved - pose_d.position
    t2, _, _ = cast_rays(scene, n_dst, pose_d.position, to_pt)
    valid &= t2 >= 1.0 - OCCLUSION_TOL

    # reproject in the source view too so identical views cancel exactly
    pix_s, _ = project_points(X, intr, pose_s)
    disp = pix - np.where(hit[..., None], pix_s, pixels)
    disp[~valid] = 0.0
    return disp, valid


def render_flow(scene: SceneSpec, traj: Trajectory, n: int) -> FlowField:
    """Exact forward flow from trajectory frame ``n`` to ``n + 1``."""
    return FlowField(*_flow_between(scene, traj, n, n + 1))


def render_flow_backward(scene: SceneSpec, traj: Trajectory, n: int) -> FlowField:
    """Exact backward flow from trajectory frame ``n + 1`` to ``n``."""
    return FlowField(*_flow_between(scene, traj, n + 1, n))


def flow_at(scene: SceneSpec, traj: Trajectory, src: int, dst: int, pixels: np.ndarray):
    """Exact displacement from frame ``src`` to ``dst`` at arbitrary (..., 2) pixel positions.

    Returns ``(displacement, valid)``; used to check flows without resampling.
    """
    return _flow_between(scene, traj, src, dst, np.asarray(pixels, dtype=float))


def render_frame(scene: SceneSpec, pose: CameraPose, intr: CameraIntrinsics, frame: int) -> np.ndarray:
    dirs = pixel_rays(intr, pose)
    t, ids, rest = cast_rays(scene, frame, pose.position, dirs)
    img = np.empty(dirs.shape)
    img[...] = np.asarray(scene.background_color, dtype=float)
    for k, obj in enumerate(scene.all_objects):
        sel = ids == k
        if np.any(sel):
            coords = obj.shape.surface_coords(rest[sel])
            img[sel] = obj.texture.color(coords)
    return np.clip(img, 0.0, 1.0)


def render_frames(scene: SceneSpec, traj: Trajectory) -> FrameSequence:
    """Point-sampled texture colour of the visible surface at every pixel and frame."""
    frames = [render_frame(scene, pose, traj.intrinsics, n) for n, pose in traj.frames]
    return FrameSequence(np.stack(frames))
