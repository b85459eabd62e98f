"""Scene and clip builders for the two dataset sources.

``real`` clips come from the translation testbed: a camera sliding parallel
to a plaid-textured wall, so every frame pair is an exact integer shift.  Their
stored flow is what the block matcher recovers, standing in for flow estimated
on captured video.  ``synthetic`` clips are rendered scenes with exact flow,
either a NURBS camera path over a static scene (``camera`` mode) or a fixed
hemisphere camera watching rigidly moving objects (``human-like`` mode).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import CameraIntrinsics, CameraPose, axis_angle, look_at, plucker_embedding
from .errors import DataError
from .estimate import estimate_flow_naive
from .flow import FlowField, FrameSequence
from .render import render_flow, render_flow_backward, render_frames
from .scene import Plane, SceneObject, SceneSpec, Sphere, Texture, rigid
from .trajectory import Trajectory, nurbs_trajectory, sample_hemisphere_pose, static_trajectory

MODES = ("camera", "human-like")
TESTBED_DEPTH = 4.0
TESTBED_MAX_SHIFT = 3
DEFAULT_FOV_DEG = 60.0


@dataclass
class Clip:
    clip_id: str
    source: str
    scene: SceneSpec
    trajectory: Trajectory
    frames: FrameSequence
    flows: list
    backward_flows: list
    extra: dict


def default_intrinsics(width: int = 32, height: int = 32) -> CameraIntrinsics:
    return CameraIntrinsics.from_fov(width, height, DEFAULT_FOV_DEG)


# -- translation testbed -----------------------------------------------------------

def testbed_scene(intr: CameraIntrinsics, depth: float = TESTBED_DEPTH) -> SceneSpec:
    """Fronto-parallel plaid wall whose texture period spans the image width."""
    period = intr.width * depth / intr.fx
    wall = SceneObject(Plane(point=(0.0, 0.0, depth), normal=(0.0, 0.0, -1.0), u_axis=(1.0, 0.0, 0.0)),
                       Texture("plaid", period, color_a=(0.9, 0.9, 0.9), color_b=(0.1, 0.1, 0.1)))
    return SceneSpec([wall])


def testbed_trajectory(shift, n_frames: int, intr: CameraIntrinsics,
                       depth: float = TESTBED_DEPTH) -> Trajectory:
    """Constant lateral camera velocity producing image flow ``shift`` (px/frame) on the wall."""
    sx, sy = float(shift[0]), float(shift[1])
    pose0 = look_at((0.0, 0.0, 0.0), (0.0, 0.0, 1.0))
    step_cam = np.array([-sx * depth / intr.fx, -sy * depth / intr.fy, 0.0])
    step = pose0.rotation @ step_cam
    frames = [(k, CameraPose(pose0.rotation, k * step)) for k in range(n_frames)]
    return Trajectory(intr, frames)


def testbed_clip(clip_id: str, shift, n_frames: int, intr: CameraIntrinsics,
                 estimate: bool = True) -> Clip:
    scene = testbed_scene(intr)
    traj = testbed_trajectory(shift, n_frames, intr)
    frames = render_frames(scene, traj)
    if estimate:
        fwd = estimate_flow_naive(frames)
        bwd = estimate_flow_naive(FrameSequence(frames.frames[::-1].copy()))[::-1]
    else:
        fwd = [render_flow(scene, traj, n) for n in range(n_frames - 1)]
        bwd = [render_flow_backward(scene, traj, n) for n in range(n_frames - 1)]
    return Clip(clip_id, "real", scene, traj, frames, fwd, bwd, {"shift_px": [float(shift[0]), float(shift[1])]})


def testbed_gt_flows(shift, n_frames: int, intr: CameraIntrinsics) -> list:
    """Rendered (exact) flows of a testbed clip."""
    scene = testbed_scene(intr)
    traj = testbed_trajectory(shift, n_frames, intr)
    return [render_flow(scene, traj, n) for n in range(n_frames - 1)]


def random_shift(rng: np.random.Generator, max_shift: int = TESTBED_MAX_SHIFT) -> tuple:
    s = rng.integers(-max_shift, max_shift + 1, size=2)
    return int(s[0]), int(s[1])


def shift_cycle(rng: np.random.Generator, n: int, max_shift: int = TESTBED_MAX_SHIFT) -> list:
    """``n`` shifts that walk a seeded permutation of the whole integer grid, repeating as needed."""
    grid = [(int(x), int(y)) for y in range(-max_shift, max_shift + 1) for x in range(-max_shift, max_shift + 1)]
    out = []
    while len(out) < n:
        out += [grid[i] for i in rng.permutation(len(grid))]
    return out[:n]


# -- synthetic scenes ----------------------------------------------------------------

def _random_texture(rng: np.random.Generator) -> Texture:
    kind = ["checker", "sine", "noise"][int(rng.integers(3))]
    a = tuple(float(x) for x in rng.uniform(0.5, 1.0, 3))
    b = tuple(float(x) for x in rng.uniform(0.0, 0.4, 3))
    return Texture(kind, float(rng.uniform(0.4, 1.2)), a, b, seed=int(rng.integers(2 ** 31)))


def _environment() -> SceneObject:
    return SceneObject(Sphere((0.0, 0.0, 0.0), 15.0),
                       Texture("noise", 4.0, (0.8, 0.85, 0.95), (0.3, 0.35, 0.5), seed=7))


def _ground() -> SceneObject:
    return SceneObject(Plane(point=(0.0, -1.0, 0.0), normal=(0.0, 1.0, 0.0), u_axis=(1.0, 0.0, 0.0)),
                       Texture("checker", 1.0, (0.7, 0.7, 0.6), (0.25, 0.25, 0.2)))


def _props(rng: np.random.Generator, n: int, n_frames: int, moving: bool) -> list:
    objs = []
    for _ in range(n):
        r = float(rng.uniform(0.4, 0.9))
        c = np.array([rng.uniform(-1.5, 1.5), -1.0 + r, rng.uniform(-1.5, 1.5)])
        motion = None
        if moving:
            heading = rng.uniform(0, 2 * np.pi)
            speed = rng.uniform(0.08, 0.25)
            spin = rng.uniform(-0.2, 0.2)
            v = speed * np.array([np.cos(heading), 0.0, np.sin(heading)])
            motion = [rigid(axis_angle((0, 1, 0), spin * k), c + k * v) for k in range(n_frames)]
            c = np.zeros(3)
        objs.append(SceneObject(Sphere(tuple(c), r), _random_texture(rng), motion))
    return objs


def synthetic_scene(rng: np.random.Generator, n_frames: int, moving: bool) -> SceneSpec:
    props = _props(rng, int(rng.integers(2, 4)), n_frames, moving)
    return SceneSpec(props + [_ground()], background=_environment())


def camera_path(rng: np.random.Generator, n_frames: int, intr: CameraIntrinsics) -> Trajectory:
    """NURBS camera path: four keypoints drifting from a hemisphere start, looking near the origin."""
    start = sample_hemisphere_pose(int(rng.integers(2 ** 31)), radius=6.0).position.copy()
    start[1] = max(start[1], 1.0)
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    length = rng.uniform(0.25, 0.45) * (n_frames - 1)
    keys = [start + (i / 3) * length * direction + rng.normal(0.0, 0.05, 3) for i in range(4)]
    for k in keys:
        k[1] = max(k[1], 0.5)
    targets = [rng.normal(0.0, 0.2, 3), rng.normal(0.0, 0.6, 3)]
    return nurbs_trajectory(keys, targets, n_frames=n_frames, intrinsics=intr)


def synthetic_clip(clip_id: str, seed: int, mode: str, n_frames: int, intr: CameraIntrinsics) -> Clip:
    if mode not in MODES:
        raise DataError(f"mode must be one of {MODES}, got {mode!r}")
    rng = np.random.default_rng(seed)
    if mode == "camera":
        scene = synthetic_scene(rng, n_frames, moving=False)
        traj = camera_path(rng, n_frames, intr)
    else:
        scene = synthetic_scene(rng, n_frames, moving=True)
        pose = sample_hemisphere_pose(int(rng.integers(2 ** 31)), radius=6.0)
        if pose.position[1] < 1.0:
            p = pose.position.copy()
            p[1] = 1.0
            pose = look_at(p, (0.0, 0.0, 0.0))
        traj = static_trajectory(pose, n_frames, intr)
    frames = render_frames(scene, traj)
    fwd = [render_flow(scene, traj, n) for n in range(n_frames - 1)]
    bwd = [render_flow_backward(scene, traj, n) for n in range(n_frames - 1)]
    return Clip(clip_id, "synthetic", scene, traj, frames, fwd, bwd, {"mode": mode, "seed": int(seed)})


# -- conditioning tensors ----------------------------------------------------------------

def relative_trajectory(traj: Trajectory) -> Trajectory:
    """Poses re-expressed in the first camera's frame."""
    p0 = traj.pose(0)
    R0t = p0.rotation.T
    frames = [(n, CameraPose(R0t @ p.rotation, R0t @ (p.position - p0.position))) for n, p in traj.frames]
    return Trajectory(traj.intrinsics, frames)


def plucker_stack(traj: Trajectory) -> np.ndarray:
    """(6 * frames, H, W) Plücker maps of the first-camera-relative trajectory."""
    rel = relative_trajectory(traj)
    maps = [plucker_embedding(rel.intrinsics, p) for p in rel.poses]
    return np.concatenate([m.transpose(2, 0, 1) for m in maps]).astype(np.float32)


def dense_fill(flow: FlowField) -> FlowField:
    """Copy each invalid pixel's value from its nearest valid pixel.

    Encoded flow images have no notion of validity, so sparse estimates are
    densified before encoding.  The result is valid everywhere (a masked
    field would zero the filled pixels again).
    """
    from scipy.ndimage import distance_transform_edt

    m = flow.valid_mask
    if m.all() or not m.any():
        return FlowField(flow.grid.copy())
    _, (iy, ix) = distance_transform_edt(~m, return_indices=True)
    return FlowField(flow.grid[iy, ix])
